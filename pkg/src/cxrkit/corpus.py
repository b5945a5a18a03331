"""Report parsing, JSONL corpus loading and section selection."""
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from .errors import AllRecordsInvalid, EmptyReport, InvalidReport, NoUsableSection, SectionMissing
from .textproc import split_sentences

logger = logging.getLogger(__name__)

SECTION_FIELDS = ("background", "findings", "impression")
SECTION_MODES = ("findings", "impression", "impression_fallback")

# heading -> Report field; None means the section is recognised and dropped
DEFAULT_HEADINGS: Dict[str, Optional[str]] = {
    "FINDINGS": "findings",
    "IMPRESSION": "impression",
    "INDICATION": "background",
    "HISTORY": "background",
    "COMPARISON": None,
    "TECHNIQUE": None,
}


@dataclass(frozen=True)
class Report:
    id: str
    background: Optional[str] = None
    findings: Optional[str] = None
    impression: Optional[str] = None

    def to_record(self) -> dict:
        return {"id": self.id, "background": self.background,
                "findings": self.findings, "impression": self.impression}


@dataclass
class Corpus:
    reports: List[Report]
    source_path: str = ""
    skipped: int = 0
    errors: List[Tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.reports)

    def __iter__(self):
        return iter(self.reports)


def _heading_pattern(headings: Mapping[str, Optional[str]]) -> re.Pattern:
    names = sorted(headings, key=len, reverse=True)
    return re.compile(r"(?<![A-Za-z])(" + "|".join(map(re.escape, names)) + r")\s*:")


_DEFAULT_PATTERN = _heading_pattern(DEFAULT_HEADINGS)


def _clean(text: Optional[str]) -> Optional[str]:
    if text is None:
        return None
    text = text.strip()
    return text or None


def _join(parts: List[str]) -> Optional[str]:
    return _clean(" ".join(p for p in parts if p))


def parse_report(raw: str, id: str, headings: Optional[Mapping[str, Optional[str]]] = None) -> Report:
    """Split free report text into background / findings / impression.

    Headings are uppercase words followed by a colon. Text before the first
    heading goes to findings when the report has no FINDINGS section of its own;
    a report with no headings at all is entirely findings.
    """
    if not id:
        raise InvalidReport("report id must be non-empty")
    if raw is None or not raw.strip():
        raise EmptyReport(f"report {id!r} has no content")
    heading_map = DEFAULT_HEADINGS if headings is None else headings
    pattern = _DEFAULT_PATTERN if headings is None else _heading_pattern(heading_map)

    parts: Dict[str, List[str]] = {name: [] for name in SECTION_FIELDS}
    matches = list(pattern.finditer(raw))
    preamble = raw[: matches[0].start()] if matches else raw
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        target = heading_map[m.group(1)]
        if target is not None:
            parts[target].append(raw[m.end():end].strip())
    if not parts["findings"]:
        parts["findings"].append(preamble.strip())

    report = Report(id=id, background=_join(parts["background"]),
                    findings=_join(parts["findings"]), impression=_join(parts["impression"]))
    if report.findings is None and report.impression is None:
        raise NoUsableSection(f"report {id!r} has neither findings nor impression")
    return report


def report_to_text(report: Report) -> str:
    """Re-serialise a report with canonical headings (inverse of parse_report)."""
    chunks = []
    if report.background:
        chunks.append(f"INDICATION: {report.background}")
    if report.findings:
        chunks.append(f"FINDINGS: {report.findings}")
    if report.impression:
        chunks.append(f"IMPRESSION: {report.impression}")
    return "\n".join(chunks)


def record_to_report(record: dict) -> Report:
    if not isinstance(record, dict):
        raise InvalidReport("record is not a JSON object")
    rid = record.get("id")
    if not isinstance(rid, str) or not rid:
        raise InvalidReport("record has no string id")
    if "text" in record:
        if not isinstance(record["text"], str):
            raise InvalidReport(f"record {rid!r}: text is not a string")
        return parse_report(record["text"], rid)
    sections = {}
    for name in SECTION_FIELDS:
        value = record.get(name)
        if value is not None and not isinstance(value, str):
            raise InvalidReport(f"record {rid!r}: {name} is not a string")
        sections[name] = _clean(value)
    if sections["findings"] is None and sections["impression"] is None:
        raise NoUsableSection(f"report {rid!r} has neither findings nor impression")
    return Report(id=rid, **sections)


def load_corpus(path) -> Corpus:
    """Read line-delimited JSON reports. Bad lines are skipped and counted."""
    reports: List[Report] = []
    errors: List[Tuple[int, str]] = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                report = record_to_report(json.loads(line))
            except (json.JSONDecodeError, InvalidReport) as exc:
                errors.append((lineno, str(exc)))
                continue
            if report.id in seen:
                errors.append((lineno, f"duplicate id {report.id!r}"))
                continue
            seen.add(report.id)
            reports.append(report)
    for lineno, msg in errors:
        logger.warning("%s:%d skipped: %s", path, lineno, msg)
    if not reports:
        raise AllRecordsInvalid(f"{path}: no valid records ({len(errors)} malformed)")
    return Corpus(reports=reports, source_path=str(path), skipped=len(errors), errors=errors)


def corpus_to_jsonl(corpus: Corpus) -> str:
    return "".join(json.dumps(r.to_record(), ensure_ascii=False) + "\n" for r in corpus.reports)


def effective_text(report: Report, mode: str = "findings") -> str:
    if mode == "findings":
        if report.findings is None:
            raise SectionMissing(f"report {report.id!r} has no findings")
        return report.findings
    if mode == "impression":
        if report.impression is None:
            raise SectionMissing(f"report {report.id!r} has no impression")
        return report.impression
    if mode == "impression_fallback":
        if report.impression is not None:
            return report.impression
        if report.findings is not None:
            sentences = split_sentences(report.findings)
            if sentences:
                return sentences[0]
        raise SectionMissing(f"report {report.id!r} has no impression or findings")
    raise ValueError(f"unknown section mode {mode!r}")
