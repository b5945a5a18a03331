"""Shared text primitives: tokenizer, sentence splitter, n-grams, light stemmer, LCS.

Labeling and every n-gram metric go through the same tokenizer so that scores
stay comparable within this toolkit.
"""
import re
from collections import Counter
from typing import Dict, List, Sequence, Tuple

# decimals ("1.5") stay whole; everything else is a run of letters/digits
_TOKEN_RE = re.compile(r"\d+(?:\.\d+)+|[^\W_]+")
_SENT_END_RE = re.compile(r"[.!?]+(?=\s|$)")

ABBREVIATIONS = frozenset({
    "dr.", "mr.", "mrs.", "ms.", "vs.", "a.m.", "p.m.", "e.g.", "i.e.",
    "approx.", "etc.", "cf.", "st.", "fig.",
})

STEM_SUFFIXES = ("ing", "es", "ed", "s")
MIN_STEM_LEN = 3


def tokenize(text: str) -> List[str]:
    """Lowercase word/number tokens; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> List[str]:
    """Split on ``.``, ``!`` or ``?`` followed by whitespace or end of text.

    A terminator that closes a known abbreviation ("vs.", "a.m.") does not split.
    """
    sentences = []
    start = 0
    for match in _SENT_END_RE.finditer(text):
        end = match.end()
        word_start = max(text.rfind(" ", 0, end), text.rfind("\n", 0, end), text.rfind("\t", 0, end)) + 1
        if text[word_start:end].lower() in ABBREVIATIONS:
            continue
        chunk = text[start:end].strip()
        if chunk:
            sentences.append(chunk)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def ngrams(tokens: Sequence[str], n: int) -> Dict[Tuple[str, ...], int]:
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def stem(token: str) -> str:
    """Strip one of -ing, -es, -ed, -s, keeping a stem of at least 3 characters."""
    for suffix in STEM_SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= MIN_STEM_LEN:
            return token[: -len(suffix)]
    return token


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]
