"""Editable rule tables: disease keywords, severity words, uncertainty ranks."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .report_parser import normalize

DISEASES = (
    "Atelectasis",
    "Blunting of costophrenic angle",
    "Calcification",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fracture",
    "Granuloma",
    "Hernia",
    "Lung Opacity",
    "Pleural Effusion",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
    "Scoliosis",
    "Tortuosity of the thoracic aorta",
    "Vascular congestion",
)
N_CLASSES = len(DISEASES)

RANK_PROBABILITIES = {1: 1.0, 2: 0.7, 3: 0.5, 4: 0.3, 5: 0.1, 6: 0.0}
NOT_MENTIONED_RANK = 5
NEGATION_RANK = 6


class Severity(str, enum.Enum):
    MILD = "MILD"
    MODERATE = "MODERATE"
    SEVERE = "SEVERE"


class RuleFileError(ValueError):
    """Invalid rule file. ``line`` is 1-based when the location is known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class UncertaintyRank:
    rank: int
    probability: float
    phrases: tuple[str, ...]


@dataclass(frozen=True)
class RuleSet:
    disease_keywords: dict[str, tuple[str, ...]]
    severity_map: dict[str, Severity]
    uncertainty_ranks: tuple[UncertaintyRank, ...]
    checksum: str = ""

    def probability(self, rank: int) -> float:
        return self.uncertainty_ranks[rank - 1].probability

    def phrases_for_rank(self, rank: int) -> tuple[str, ...]:
        return self.uncertainty_ranks[rank - 1].phrases


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that remembers the source line of every mapping key."""


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=deep)
    lines = {}
    for key_node, _ in node.value:
        lines[loader.construct_object(key_node)] = key_node.start_mark.line + 1
    mapping["__lines__"] = lines
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _phrase_list(value, where: str, line: int | None) -> tuple[str, ...]:
    if not isinstance(value, list):
        raise RuleFileError(f"{where}: expected a list of phrases", line)
    out = []
    for p in value:
        if not isinstance(p, str):
            raise RuleFileError(f"{where}: phrase {p!r} is not a string", line)
        norm = normalize(p)
        if not norm:
            raise RuleFileError(f"{where}: empty phrase", line)
        out.append(norm)
    return tuple(out)


def _check_unique(phrases, table: str, line_of):
    seen = {}
    for owner, phrase in phrases:
        if phrase in seen:
            raise RuleFileError(
                f"{table}: phrase {phrase!r} listed under both {seen[phrase]!r} and {owner!r}",
                line_of(owner),
            )
        seen[phrase] = owner


def parse_rules(text: str) -> RuleSet:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise RuleFileError(f"malformed YAML: {exc}", mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise RuleFileError("top level must be a mapping", 1)
    top_lines = doc.get("__lines__", {})
    for key in ("diseases", "severity", "uncertainty"):
        if key not in doc:
            raise RuleFileError(f"missing section {key!r}")

    dis = doc["diseases"]
    if not isinstance(dis, dict):
        raise RuleFileError("'diseases' must map disease -> phrases", top_lines.get("diseases"))
    dlines = dis.pop("__lines__", {})
    unknown = set(dis) - set(DISEASES)
    if unknown:
        name = sorted(unknown)[0]
        raise RuleFileError(f"unknown disease {name!r}", dlines.get(name))
    missing = [d for d in DISEASES if d not in dis]
    if missing:
        raise RuleFileError(f"missing disease {missing[0]!r}", top_lines.get("diseases"))
    keywords = {d: _phrase_list(dis[d], d, dlines.get(d)) for d in DISEASES}
    _check_unique(
        [(d, p) for d in DISEASES for p in keywords[d]], "diseases", dlines.get
    )

    sev = doc["severity"]
    if not isinstance(sev, dict):
        raise RuleFileError("'severity' must map level -> phrases", top_lines.get("severity"))
    slines = sev.pop("__lines__", {})
    severity_map = {}
    pairs = []
    for level, phrases in sev.items():
        try:
            lev = Severity(str(level).upper())
        except ValueError:
            raise RuleFileError(f"unknown severity level {level!r}", slines.get(level)) from None
        for p in _phrase_list(phrases, f"severity {level}", slines.get(level)):
            pairs.append((level, p))
            severity_map[p] = lev
    _check_unique(pairs, "severity", slines.get)

    unc = doc["uncertainty"]
    if not isinstance(unc, list) or len(unc) != 6:
        raise RuleFileError("'uncertainty' must list exactly six ranks", top_lines.get("uncertainty"))
    ranks = []
    pairs = []
    for i, entry in enumerate(unc, start=1):
        line = entry.get("__lines__", {}).get("rank") if isinstance(entry, dict) else None
        if not isinstance(entry, dict) or entry.get("rank") != i:
            raise RuleFileError(f"uncertainty entry {i} must have rank {i}", line)
        prob = entry.get("probability")
        if not isinstance(prob, (int, float)) or not 0.0 <= prob <= 1.0:
            raise RuleFileError(f"rank {i}: probability must be a number in [0, 1]", line)
        phrases = _phrase_list(entry.get("phrases", []), f"rank {i}", line)
        if i == NOT_MENTIONED_RANK and phrases:
            raise RuleFileError("rank 5 ('not mentioned') must have no phrases", line)
        pairs.extend((i, p) for p in phrases)
        ranks.append(UncertaintyRank(i, float(prob), phrases))
    _check_unique(pairs, "uncertainty", lambda _: None)
    probs = [r.probability for r in ranks]
    if any(a <= b for a, b in zip(probs, probs[1:])):
        raise RuleFileError("uncertainty probabilities must strictly decrease with rank")

    return RuleSet(
        disease_keywords=keywords,
        severity_map=severity_map,
        uncertainty_ranks=tuple(ranks),
        checksum=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


def default_rules_path() -> Path:
    return Path(str(resources.files("cxrgraph") / "data" / "rules.yaml"))


def load_rules(path: str | Path | None = None) -> RuleSet:
    path = Path(path) if path is not None else default_rules_path()
    return parse_rules(path.read_text(encoding="utf-8"))
