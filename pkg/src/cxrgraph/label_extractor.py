"""Rule-based soft label extraction with severity and uncertainty."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .report_parser import RadiologyReport, Section, parse_report
from .rules import (
    DISEASES,
    NEGATION_RANK,
    NOT_MENTIONED_RANK,
    RuleSet,
    Severity,
    load_rules,
)

NEGATION_TOKENS = ("no", "without")
UNCERTAIN_RANKS = (2, 3, 4)
# max number of unrelated tokens allowed between two words of an uncertainty phrase
PHRASE_GAP = 2

_TOKEN = re.compile(r"[a-z0-9]+")
_SUFFIXES = ("ing", "ed", "es", "s", "e", "d")


@dataclass(frozen=True)
class DiseaseMention:
    disease: str
    section: Section
    sentence_index: int
    matched_keyword: str
    severity: Severity | None
    uncertainty_rank: int
    probability: float


@dataclass(frozen=True)
class Label:
    disease: str
    probability: float
    severity: Severity | None = None


@dataclass(frozen=True)
class SoftLabelVector:
    study_id: str
    labels: tuple[Label, ...]

    def probabilities(self) -> np.ndarray:
        return np.array([lab.probability for lab in self.labels], dtype=float)

    def __getitem__(self, disease: str) -> Label:
        return self.labels[DISEASES.index(disease)]

    def to_record(self) -> dict:
        return {
            "study_id": self.study_id,
            "labels": [
                {
                    "disease": lab.disease,
                    "probability": lab.probability,
                    "severity": lab.severity.value if lab.severity else None,
                }
                for lab in self.labels
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SoftLabelVector":
        by_name = {lab["disease"]: lab for lab in rec["labels"]}
        labels = []
        for d in DISEASES:
            lab = by_name[d]
            sev = lab.get("severity")
            labels.append(Label(d, float(lab["probability"]), Severity(sev) if sev else None))
        return cls(str(rec["study_id"]), tuple(labels))

    @classmethod
    def from_probabilities(cls, study_id: str, probs) -> "SoftLabelVector":
        return cls(study_id, tuple(Label(d, float(p)) for d, p in zip(DISEASES, probs)))


def _stem(token: str) -> str:
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _tokens(text: str) -> list[tuple[str, int, int]]:
    out = []
    for m in _TOKEN.finditer(text):
        tok = m.group()
        if tok == "cannot":
            out.append(("can", m.start(), m.start() + 3))
            out.append(("not", m.start() + 3, m.end()))
        else:
            out.append((tok, m.start(), m.end()))
    return out


def _phrase_tokens(phrase: str) -> list[str]:
    return [t for t, _, _ in _tokens(phrase)]


def _token_matches(pattern: str, token: str) -> bool:
    if len(pattern) <= 2:
        return token == pattern
    return token.startswith(_stem(pattern))


def _phrase_in(phrase_toks: list[str], toks: list[str]) -> bool:
    """Ordered match of phrase words, each a stem prefix, with bounded gaps."""

    def search(pi: int, start: int, first: bool) -> bool:
        if pi == len(phrase_toks):
            return True
        stop = len(toks) if first else min(len(toks), start + PHRASE_GAP + 1)
        for ti in range(start, stop):
            if _token_matches(phrase_toks[pi], toks[ti]) and search(pi + 1, ti + 1, False):
                return True
        return False

    return search(0, 0, True)


def _compile_phrases(phrases: Iterable[str]) -> list[tuple[re.Pattern, str]]:
    return [(re.compile(r"(?<![a-z0-9])" + re.escape(p)), p) for p in phrases]


def _find_phrases(text: str, patterns: list[tuple[re.Pattern, str]]) -> list[tuple[int, int, str]]:
    """Leftmost-longest, non-overlapping phrase occurrences anchored at word starts."""
    hits = []
    for pat, p in patterns:
        for m in pat.finditer(text):
            hits.append((m.start(), m.end(), p))
    hits.sort(key=lambda h: (h[0], -(h[1] - h[0])))
    chosen = []
    last_end = -1
    for s, e, p in hits:
        if s >= last_end:
            chosen.append((s, e, p))
            last_end = e
    return chosen


def negation_scope(sentence: str, keyword_position: int, tokens: Iterable[str] = NEGATION_TOKENS) -> bool:
    """True iff a standalone negation token precedes the keyword in its comma clause."""
    if not 0 <= keyword_position <= len(sentence):
        raise ValueError(f"keyword position {keyword_position} outside sentence")
    clause = sentence[: keyword_position]
    clause = clause[clause.rfind(",") + 1 :]
    words = set(_TOKEN.findall(clause))
    return any(t in words for t in tokens)


def sentence_uncertainty(sentence: str, rules: RuleSet) -> int:
    """Most uncertain hedge rank (2-4) present in the sentence, else 1."""
    return _matcher(rules).hedge_rank(sentence)


class _Matcher:
    """Precompiled keyword/severity tables for one RuleSet."""

    def __init__(self, rules: RuleSet):
        self.rules = rules
        self.keyword_owner = {p: d for d, ps in rules.disease_keywords.items() for p in ps}
        self.keyword_patterns = _compile_phrases(self.keyword_owner)
        self.severity_patterns = _compile_phrases(rules.severity_map)
        self.hedges = [
            (rank, [_phrase_tokens(p) for p in rules.phrases_for_rank(rank)]) for rank in UNCERTAIN_RANKS
        ]
        self.negation_tokens = tuple(dict.fromkeys([*rules.phrases_for_rank(NEGATION_RANK), *NEGATION_TOKENS]))

    def severities(self, text: str) -> list[tuple[int, int, Severity]]:
        out = []
        for s, e, p in _find_phrases(text, self.severity_patterns):
            if e < len(text) and text[e].isalnum():
                continue
            out.append((s, e, self.rules.severity_map[p]))
        return out

    def hedge_rank(self, sentence: str) -> int:
        toks = [t for t, _, _ in _tokens(sentence)]
        best = 1
        for rank, phrases in self.hedges:
            if any(_phrase_in(pt, toks) for pt in phrases):
                best = rank
        return best

    def mentions(self, sentence_text: str, section: Section, index: int) -> list[DiseaseMention]:
        kw_hits = _find_phrases(sentence_text, self.keyword_patterns)
        if not kw_hits:
            return []
        sev_hits = self.severities(sentence_text)
        hedge = self.hedge_rank(sentence_text)
        best: dict[str, DiseaseMention] = {}
        for s, e, phrase in kw_hits:
            disease = self.keyword_owner[phrase]
            if negation_scope(sentence_text, s, self.negation_tokens):
                rank = NEGATION_RANK
            else:
                rank = hedge
            # an absent finding has no severity
            severity = None if rank == NEGATION_RANK else _nearest(sev_hits, s, e)
            m = DiseaseMention(
                disease, section, index, phrase, severity, rank, self.rules.probability(rank)
            )
            if disease not in best or m.probability > best[disease].probability:
                best[disease] = m
        return [best[d] for d in DISEASES if d in best]


def _nearest(sev_hits, s: int, e: int) -> Severity | None:
    best, best_dist = None, None
    for hs, he, level in sev_hits:
        if he <= s:
            dist = s - he
        elif hs >= e:
            dist = hs - e
        else:
            dist = 0
        # strict comparison keeps the earlier (preceding) phrase on ties
        if best_dist is None or dist < best_dist:
            best, best_dist = level, dist
    return best


_MATCHERS: dict[int, tuple[RuleSet, _Matcher]] = {}


def _matcher(rules: RuleSet) -> _Matcher:
    hit = _MATCHERS.get(id(rules))
    if hit is None or hit[0] is not rules:
        if len(_MATCHERS) > 32:
            _MATCHERS.clear()
        hit = _MATCHERS[id(rules)] = (rules, _Matcher(rules))
    return hit[1]


def match_mentions(report: RadiologyReport, rules: RuleSet) -> list[DiseaseMention]:
    matcher = _matcher(rules)
    out = []
    for sent in report.sentences:
        out.extend(matcher.mentions(sent.text, sent.section, sent.index))
    return out


def resolve_labels(
    mentions: list[DiseaseMention], study_id: str = "", rules: RuleSet | None = None
) -> SoftLabelVector:
    """Collapse mentions to one label per disease.

    IMPRESSION mentions take priority over FINDINGS; within the chosen section
    the most probable mention wins, ties going to the later sentence.
    """
    default = rules.probability(NOT_MENTIONED_RANK) if rules is not None else 0.1
    labels = []
    for d in DISEASES:
        ms = [m for m in mentions if m.disease == d]
        imp = [m for m in ms if m.section is Section.IMPRESSION]
        pool = imp or ms
        if not pool:
            labels.append(Label(d, default))
            continue
        win = max(pool, key=lambda m: (m.probability, m.sentence_index))
        labels.append(Label(d, win.probability, win.severity))
    return SoftLabelVector(study_id, tuple(labels))


def harden_labels(v: SoftLabelVector) -> SoftLabelVector:
    """Certain positives stay 1.0, everything else becomes 0.0."""
    return replace(
        v,
        labels=tuple(replace(lab, probability=1.0 if lab.probability == 1.0 else 0.0) for lab in v.labels),
    )


def extract_labels(raw: str, study_id: str, rules: RuleSet) -> SoftLabelVector:
    report = parse_report(raw, study_id)
    return resolve_labels(match_mentions(report, rules), study_id, rules)


class SoftLabelExtractor(TransformerMixin, BaseEstimator):
    """Transformer from report texts to an ``(n_reports, 18)`` label matrix.

    Parameters
    ----------
    rules_path : str or None
        Rule file; the shipped tables when None.
    hard : bool
        Return hardened (0/1) labels instead of soft probabilities.
    """

    def __init__(self, rules_path=None, hard=False):
        self.rules_path = rules_path
        self.hard = hard

    def fit(self, X=None, y=None):
        self.rules_ = load_rules(self.rules_path)
        return self

    def label_vectors(self, X) -> list[SoftLabelVector]:
        rules = getattr(self, "rules_", None) or load_rules(self.rules_path)
        out = []
        for i, item in enumerate(X):
            study_id, text = item if isinstance(item, tuple) else (str(i), item)
            v = extract_labels(text, study_id, rules)
            out.append(harden_labels(v) if self.hard else v)
        return out

    def transform(self, X):
        vecs = self.label_vectors(X)
        return np.array([v.probabilities() for v in vecs]).reshape(len(vecs), len(DISEASES))
