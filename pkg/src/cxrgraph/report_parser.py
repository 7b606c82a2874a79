"""Split raw radiology report text into FINDINGS / IMPRESSION sentences."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field


class Section(str, enum.Enum):
    FINDINGS = "FINDINGS"
    IMPRESSION = "IMPRESSION"


class EmptyReportError(ValueError):
    """Raised when a report has no non-whitespace content."""


@dataclass(frozen=True)
class Sentence:
    section: Section
    text: str
    index: int


@dataclass(frozen=True)
class RadiologyReport:
    study_id: str
    findings: list[Sentence] = field(default_factory=list)
    impression: list[Sentence] = field(default_factory=list)
    raw_text: str = ""

    @property
    def sentences(self) -> list[Sentence]:
        return [*self.findings, *self.impression]


# "findings:" / "impression:" anywhere, or the bare word alone on its own line.
_TARGET_HEADER = re.compile(
    r"\b(findings|impression)\s*:|^[ \t]*(findings|impression)[ \t]*$",
    re.IGNORECASE | re.MULTILINE,
)
# Any other upper-case line-start header (INDICATION:, COMPARISON: ...) closes the section.
_OTHER_HEADER = re.compile(r"^[ \t]*([A-Z][A-Z /&()-]*[A-Z)])[ \t]*:", re.MULTILINE)

_NON_ASCII = re.compile(r"[^\x00-\x7f]")
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, map non-ASCII to spaces, collapse whitespace."""
    text = _NON_ASCII.sub(" ", text)
    return _WS.sub(" ", text).strip().lower()


def split_sentences(section_text: str) -> list[str]:
    """Split on ``. ! ? ;`` followed by whitespace or end of text.

    A period directly after a single-letter token (initials, ``e.g.``) never
    ends a sentence. Returned fragments are normalized; empty ones dropped.
    """
    text = normalize(section_text)
    out = []
    start = 0
    n = len(text)
    for i, ch in enumerate(text):
        if ch not in ".!?;":
            continue
        if i + 1 < n and not text[i + 1].isspace():
            continue
        if ch == "." and i >= 1 and text[i - 1].isalpha() and (i == 1 or not text[i - 2].isalpha()):
            continue
        out.append(text[start : i + 1])
        start = i + 1
    out.append(text[start:])
    return [s.strip() for s in out if s.strip() and any(c.isalnum() for c in s)]


def _section_spans(raw: str) -> list[tuple[Section, int, int]]:
    markers = []
    for m in _TARGET_HEADER.finditer(raw):
        name = (m.group(1) or m.group(2)).upper()
        markers.append((m.start(), m.end(), Section(name)))
    target_starts = {start for start, _, _ in markers}
    for m in _OTHER_HEADER.finditer(raw):
        word = m.group(1).strip().lower()
        if word in ("findings", "impression"):
            continue
        # skip if this colon belongs to a recognised header on the same span
        if any(s <= m.start(1) < e for s, e, _ in markers) or m.start() in target_starts:
            continue
        markers.append((m.start(), m.end(), None))
    if not any(sec is not None for _, _, sec in markers):
        return [(Section.FINDINGS, 0, len(raw))]
    markers.sort(key=lambda t: t[0])
    spans = []
    for k, (_, end, sec) in enumerate(markers):
        if sec is None:
            continue
        stop = markers[k + 1][0] if k + 1 < len(markers) else len(raw)
        spans.append((sec, end, stop))
    return spans


def parse_report(raw: str, study_id: str) -> RadiologyReport:
    """Parse a report into section-tagged, normalized sentences.

    Text preceding the first header is discarded. Without any FINDINGS or
    IMPRESSION header the whole text is treated as FINDINGS.
    """
    if not raw or not raw.strip():
        raise EmptyReportError(f"report {study_id!r} is empty")
    found: dict[Section, list[str]] = {Section.FINDINGS: [], Section.IMPRESSION: []}
    for sec, start, stop in _section_spans(raw):
        found[sec].extend(split_sentences(raw[start:stop]))
    return RadiologyReport(
        study_id=study_id,
        findings=[Sentence(Section.FINDINGS, t, i) for i, t in enumerate(found[Section.FINDINGS])],
        impression=[Sentence(Section.IMPRESSION, t, i) for i, t in enumerate(found[Section.IMPRESSION])],
        raw_text=raw,
    )
