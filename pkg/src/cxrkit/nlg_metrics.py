"""Corpus-level BLEU-1..4, ROUGE-L, METEOR (exact + stem) and CIDEr-D.

Single reference per candidate. All variants and constants are fixed here;
see README for how they relate to the usual captioning toolkits.
"""
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import EmptyInput, TooFewPairs
from .textproc import lcs_length, ngrams, stem, tokenize

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
CIDER_N = 4
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


@dataclass(frozen=True)
class EvalPair:
    id: str
    candidate: Tuple[str, ...]
    reference: Tuple[str, ...]

    @classmethod
    def from_text(cls, id, candidate: str, reference: str) -> "EvalPair":
        return cls(id, tuple(tokenize(candidate)), tuple(tokenize(reference)))


@dataclass
class NlgScores:
    bleu: List[float]
    rouge_l: float
    meteor: float
    cider: Optional[float]  # None when the corpus is too small for IDF

    def as_columns(self) -> Dict[str, Optional[float]]:
        cols = {f"B{n}": b for n, b in enumerate(self.bleu, 1)}
        cols.update(RG=self.rouge_l, MTR=self.meteor, CDR=self.cider)
        return cols


def _require(pairs):
    if not pairs:
        raise EmptyInput("metric needs at least one candidate/reference pair")


def bleu_stats(pairs: Sequence[EvalPair], max_n: int = 4):
    """Clipped match and candidate n-gram totals per order, plus total lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for p in pairs:
        cand_len += len(p.candidate)
        ref_len += len(p.reference)
        for n in range(1, max_n + 1):
            cand = ngrams(p.candidate, n)
            ref = ngrams(p.reference, n)
            matches[n - 1] += sum(min(c, ref.get(g, 0)) for g, c in cand.items())
            totals[n - 1] += sum(cand.values())
    return matches, totals, cand_len, ref_len


def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    _require(pairs)
    matches, totals, cand_len, ref_len = bleu_stats(pairs, n)
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def rouge_l_pair(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(candidate)
    rec = lcs / len(reference)
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    _require(pairs)
    return sum(rouge_l_pair(p.candidate, p.reference) for p in pairs) / len(pairs)


def meteor_alignment(candidate: Sequence[str], reference: Sequence[str]) -> List[Tuple[int, int]]:
    """Exact matches first, then stem matches on what is left; leftmost-greedy, one-to-one."""
    used_ref = [False] * len(reference)
    aligned: Dict[int, int] = {}
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in reference]
        for i, tok in enumerate(candidate):
            if i in aligned:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if not used_ref[j] and rk == k:
                    used_ref[j] = True
                    aligned[i] = j
                    break
    return sorted(aligned.items())


def count_chunks(alignment: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(candidate: Sequence[str], reference: Sequence[str]) -> float:
    alignment = meteor_alignment(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    prec = m / len(candidate)
    rec = m / len(reference)
    fmean = prec * rec / (METEOR_ALPHA * prec + (1 - METEOR_ALPHA) * rec)
    penalty = METEOR_GAMMA * (count_chunks(alignment) / m) ** METEOR_BETA
    return fmean * (1 - penalty)


def meteor(pairs: Sequence[EvalPair]) -> float:
    _require(pairs)
    return sum(meteor_pair(p.candidate, p.reference) for p in pairs) / len(pairs)


def _tfidf(counts, idf, unseen_idf):
    vec = {g: c * idf.get(g, unseen_idf) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_scores(pairs: Sequence[EvalPair], sigma: float = CIDER_SIGMA) -> List[float]:
    """Per-pair CIDEr-D. IDF is log(N / (1 + df)) over the references, floored at 0."""
    _require(pairs)
    if len(pairs) < 2:
        raise TooFewPairs("CIDEr needs at least two pairs to estimate document frequencies")
    n_docs = len(pairs)
    ref_counts = [[ngrams(p.reference, n) for n in range(1, CIDER_N + 1)] for p in pairs]
    df: Counter = Counter()
    for per_n in ref_counts:
        for counts in per_n:
            df.update(counts.keys())
    idf = {g: max(0.0, math.log(n_docs / (1.0 + d))) for g, d in df.items()}
    unseen = math.log(n_docs)  # df = 0: n-gram absent from every reference

    scores = []
    for p, per_n in zip(pairs, ref_counts):
        delta = len(p.candidate) - len(p.reference)
        length_pen = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        total = 0.0
        for n in range(1, CIDER_N + 1):
            vc, nc = _tfidf(ngrams(p.candidate, n), idf, unseen)
            vr, nr = _tfidf(per_n[n - 1], idf, unseen)
            if nc == 0.0 or nr == 0.0:
                continue
            dot = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
            total += CIDER_SCALE * length_pen * dot / (nc * nr)
        scores.append(total / CIDER_N)
    return scores


def cider(pairs: Sequence[EvalPair]) -> float:
    scores = cider_scores(pairs)
    return sum(scores) / len(scores)


def evaluate_nlg(pairs: Sequence[EvalPair]) -> NlgScores:
    _require(pairs)
    try:
        cider_value: Optional[float] = cider(pairs)
    except TooFewPairs:
        cider_value = None
    return NlgScores(
        bleu=[bleu(pairs, n) for n in range(1, 5)],
        rouge_l=rouge_l(pairs),
        meteor=meteor(pairs),
        cider=cider_value,
    )
