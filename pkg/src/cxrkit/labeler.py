"""Rule-based report labeler.

A transparent stand-in for CheXpert-style labelers: lexicon phrase matching
per sentence, a fixed-width preceding window for negation and uncertainty cues,
and modifier extraction that turns "mild pneumonia" into a fine-grained class.
Lexicons are plain files under ``lexicons/`` (override the directory with the
``CXRKIT_LEXICON_DIR`` environment variable).
"""
import enum
import os
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .corpus import Corpus, Report, effective_text
from .errors import EmptyCorpus, LexiconError, SectionMissing
from .textproc import split_sentences, tokenize

LEXICON_ENV = "CXRKIT_LEXICON_DIR"
NEGATION_WINDOW = 6
MODIFIER_WINDOW = 3
DEFAULT_VOCAB_THRESHOLD = 100
NO_FINDING = 0


class LabelState(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    UNCERTAIN = "Uncertain"
    ABSENT = "Absent"


# aggregation precedence, strongest first
_PRECEDENCE = (LabelState.POSITIVE, LabelState.UNCERTAIN, LabelState.NEGATIVE)


@dataclass(frozen=True)
class Lexicon:
    categories: Tuple[str, ...]
    phrases: Dict[Tuple[str, ...], int]
    negation: Tuple[Tuple[str, ...], ...]
    uncertainty: Tuple[Tuple[str, ...], ...]
    modifiers: FrozenSet[str]
    version: str = "unversioned"
    max_phrase_len: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "max_phrase_len", max(map(len, self.phrases), default=0))

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def index(self, name: str) -> int:
        return self.categories.index(name)


@dataclass(frozen=True)
class Mention:
    category: int
    sentence: int
    start: int
    end: int


@dataclass(frozen=True)
class LabelVector:
    report_id: str
    states: Tuple[LabelState, ...]

    def to_record(self, fine: Iterable[str] = ()) -> dict:
        return {"id": self.report_id, "states": [s.value for s in self.states], "fine": sorted(fine)}


@dataclass(frozen=True, order=True)
class FineLabel:
    surface: str
    category: int


@dataclass
class FineGrainedVocab:
    entries: List[Tuple[str, str, int]]  # (surface, category name, count), stable order
    threshold: int

    def __len__(self):
        return len(self.entries)

    def __contains__(self, surface):
        return any(s == surface for s, _, _ in self.entries)

    def counts(self) -> Dict[str, int]:
        return {s: c for s, _, c in self.entries}

    def to_tsv(self) -> str:
        lines = ["surface\tcategory\tcount"]
        lines += [f"{s}\t{cat}\t{c}" for s, cat, c in self.entries]
        return "\n".join(lines) + "\n"


def _read_lines(path: Path) -> List[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def _cue_list(lines: Iterable[str]) -> Tuple[Tuple[str, ...], ...]:
    cues = {tuple(tokenize(line)) for line in lines}
    cues.discard(())
    return tuple(sorted(cues, key=lambda c: (-len(c), c)))


def lexicon_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(LEXICON_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("cxrkit") / "lexicons"))


def load_lexicon(path=None) -> Lexicon:
    root = lexicon_dir(path)
    try:
        categories = tuple(_read_lines(root / "categories.txt"))
        phrase_rows = _read_lines(root / "category_phrases.tsv")
        negation = _cue_list(_read_lines(root / "negation.txt"))
        uncertainty = _cue_list(_read_lines(root / "uncertainty.txt"))
        modifiers = frozenset(t for line in _read_lines(root / "modifiers.txt") for t in tokenize(line))
    except FileNotFoundError as exc:
        raise LexiconError(f"lexicon file missing: {exc.filename}") from exc
    version_file = root / "VERSION"
    version = version_file.read_text(encoding="utf-8").strip() if version_file.exists() else "unversioned"

    if len(set(categories)) != len(categories):
        raise LexiconError("duplicate category names")
    if not categories or categories[NO_FINDING] != "No Finding":
        raise LexiconError("first category must be 'No Finding'")
    phrases: Dict[Tuple[str, ...], int] = {}
    for row in phrase_rows:
        try:
            phrase, category = row.split("\t")
        except ValueError:
            raise LexiconError(f"bad phrase row {row!r}") from None
        if category not in categories:
            raise LexiconError(f"unknown category {category!r} for phrase {phrase!r}")
        key = tuple(tokenize(phrase))
        idx = categories.index(category)
        if key in phrases and phrases[key] != idx:
            raise LexiconError(f"phrase {phrase!r} maps to two categories")
        phrases[key] = idx
    return Lexicon(categories, phrases, negation, uncertainty, modifiers, version)


_default_lexicon: Optional[Lexicon] = None


def default_lexicon() -> Lexicon:
    global _default_lexicon
    if _default_lexicon is None:
        _default_lexicon = load_lexicon()
    return _default_lexicon


def find_mentions(tokens: Sequence[str], lexicon: Lexicon, sentence: int = 0) -> List[Mention]:
    """Longest-match-first, left-to-right, non-overlapping phrase matches."""
    mentions = []
    i, n = 0, len(tokens)
    phrases = lexicon.phrases
    while i < n:
        for length in range(min(lexicon.max_phrase_len, n - i), 0, -1):
            cat = phrases.get(tuple(tokens[i:i + length]))
            if cat is not None:
                mentions.append(Mention(cat, sentence, i, i + length))
                i += length
                break
        else:
            i += 1
    return mentions


def _find_cues(tokens: Sequence[str], cues: Sequence[Tuple[str, ...]]) -> List[Tuple[int, int]]:
    found = []
    for cue in cues:
        k = len(cue)
        for i in range(len(tokens) - k + 1):
            if tokens[i] == cue[0] and tuple(tokens[i:i + k]) == cue:
                found.append((i, i + k))
    return found


def _cue_in_window(spans: Iterable[Tuple[int, int]], start: int, window: int) -> bool:
    lo = start - window
    return any(s >= lo and e <= start for s, e in spans)


def classify_mention(tokens: Sequence[str], mention: Mention, lexicon: Lexicon,
                     window: int = NEGATION_WINDOW) -> LabelState:
    neg = _find_cues(tokens, lexicon.negation)
    unc = _find_cues(tokens, lexicon.uncertainty)
    return _classify(mention, neg, unc, window)


def _classify(mention, neg_spans, unc_spans, window) -> LabelState:
    if _cue_in_window(neg_spans, mention.start, window):
        return LabelState.NEGATIVE
    if _cue_in_window(unc_spans, mention.start, window):
        return LabelState.UNCERTAIN
    return LabelState.POSITIVE


def _modifiers_before(tokens, mention, blocked: Set[int], modifiers, window) -> List[str]:
    found = []
    for pos in range(mention.start - 1, max(mention.start - window, 0) - 1, -1):
        if pos in blocked:
            break
        if tokens[pos] in modifiers:
            found.append(tokens[pos])
    return found


@dataclass
class TextAnalysis:
    """Per-mention results for one piece of text."""
    mentions: List[Tuple[Mention, LabelState]]
    fine: Set[FineLabel]


def analyze_text(text: str, lexicon: Optional[Lexicon] = None,
                 negation_window: int = NEGATION_WINDOW,
                 modifier_window: int = MODIFIER_WINDOW) -> TextAnalysis:
    lexicon = lexicon or default_lexicon()
    mentions: List[Tuple[Mention, LabelState]] = []
    fine: Set[FineLabel] = set()
    for s_idx, sentence in enumerate(split_sentences(text)):
        tokens = tokenize(sentence)
        found = find_mentions(tokens, lexicon, s_idx)
        if not found:
            continue
        neg = _find_cues(tokens, lexicon.negation)
        unc = _find_cues(tokens, lexicon.uncertainty)
        blocked = {p for s, e in neg + unc for p in range(s, e)}
        for m in found:
            state = _classify(m, neg, unc, negation_window)
            mentions.append((m, state))
            if state is LabelState.POSITIVE:
                phrase = " ".join(tokens[m.start:m.end])
                fine.add(FineLabel(phrase, m.category))
                for mod in _modifiers_before(tokens, m, blocked, lexicon.modifiers, modifier_window):
                    fine.add(FineLabel(f"{mod} {phrase}", m.category))
    return TextAnalysis(mentions, fine)


def aggregate(report_id: str, mentions: Iterable[Tuple[Mention, LabelState]], n_categories: int) -> LabelVector:
    seen: List[Set[LabelState]] = [set() for _ in range(n_categories)]
    for m, state in mentions:
        seen[m.category].add(state)
    states = [LabelState.ABSENT] * n_categories
    for c in range(n_categories):
        for state in _PRECEDENCE:
            if state in seen[c]:
                states[c] = state
                break
    abnormal = any(states[c] in (LabelState.POSITIVE, LabelState.UNCERTAIN)
                   for c in range(n_categories) if c != NO_FINDING)
    states[NO_FINDING] = LabelState.ABSENT if abnormal else LabelState.POSITIVE
    return LabelVector(report_id, tuple(states))


def label_text(text: str, report_id: str = "", lexicon: Optional[Lexicon] = None) -> LabelVector:
    lexicon = lexicon or default_lexicon()
    return aggregate(report_id, analyze_text(text, lexicon).mentions, lexicon.n_categories)


def label_report(report: Report, section_mode: str = "findings",
                 lexicon: Optional[Lexicon] = None) -> LabelVector:
    return label_text(effective_text(report, section_mode), report.id, lexicon)


def label_and_extract(report: Report, section_mode: str = "findings",
                      lexicon: Optional[Lexicon] = None) -> Tuple[LabelVector, Set[FineLabel]]:
    """Single pass producing both the coarse label vector and the fine labels."""
    lexicon = lexicon or default_lexicon()
    analysis = analyze_text(effective_text(report, section_mode), lexicon)
    return aggregate(report.id, analysis.mentions, lexicon.n_categories), analysis.fine


def extract_fine_grained(report: Report, lv: Optional[LabelVector] = None,
                         lexicon: Optional[Lexicon] = None,
                         section_mode: str = "findings") -> Set[FineLabel]:
    """Disease phrases of Positive mentions, bare and with each preceding modifier.

    ``lv`` is accepted for interface symmetry; gating happens per mention, so a
    negated "no large effusion" never yields a class even if another sentence
    makes the category Positive.
    """
    if lv is not None and lv.report_id != report.id:
        raise ValueError(f"label vector {lv.report_id!r} does not belong to report {report.id!r}")
    return analyze_text(effective_text(report, section_mode), lexicon or default_lexicon()).fine


def count_fine_labels(reports: Iterable[Report], lexicon: Lexicon,
                      section_mode: str = "findings") -> Counter:
    counts: Counter = Counter()
    for report in reports:
        try:
            text = effective_text(report, section_mode)
        except SectionMissing:
            continue
        counts.update(analyze_text(text, lexicon).fine)
    return counts


def build_vocab(corpus: Corpus, threshold: int = DEFAULT_VOCAB_THRESHOLD,
                lexicon: Optional[Lexicon] = None, section_mode: str = "findings") -> FineGrainedVocab:
    """Count fine labels (once per report) and keep those seen at least ``threshold`` times."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if corpus is None or not len(corpus):
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    lexicon = lexicon or default_lexicon()
    counts = count_fine_labels(corpus, lexicon, section_mode)
    kept = [(fl.surface, lexicon.categories[fl.category], c) for fl, c in counts.items() if c >= threshold]
    kept.sort(key=lambda e: (-e[2], e[0], e[1]))
    return FineGrainedVocab(kept, threshold)
