"""Clinical accuracy: micro precision/recall and macro-F1 over positivity masks."""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .errors import IdMismatch, LengthMismatch
from .labeler import LabelState, LabelVector


@dataclass
class ClinicalScores:
    precision: float
    recall: float
    macro_f1: float
    per_class: List[Optional[float]]  # None = no support on either side, excluded
    confusion: List[Tuple[int, int, int]]  # (tp, fp, fn) per class

    def as_columns(self) -> dict:
        return {"P": self.precision, "R": self.recall, "F1": self.macro_f1}


def binarize(lv: LabelVector) -> Tuple[bool, ...]:
    """Positive -> True; Uncertain, Negative and Absent all -> False."""
    return tuple(s is LabelState.POSITIVE for s in lv.states)


def clinical_eval(cands: Sequence[LabelVector], refs: Sequence[LabelVector],
                  exclude_empty: bool = True) -> ClinicalScores:
    """Corpus confusion counts per class.

    With ``exclude_empty`` (default) classes with TP = FP = FN = 0 are left out of
    the macro mean; otherwise they count as F1 = 0.
    """
    if len(cands) != len(refs):
        raise LengthMismatch(f"{len(cands)} candidate vs {len(refs)} reference label vectors")
    if not refs:
        return ClinicalScores(0.0, 0.0, 0.0, [], [])
    n_cls = len(refs[0].states)
    tp = [0] * n_cls
    fp = [0] * n_cls
    fn = [0] * n_cls
    for c_lv, r_lv in zip(cands, refs):
        if c_lv.report_id != r_lv.report_id:
            raise IdMismatch(f"candidate {c_lv.report_id!r} aligned with reference {r_lv.report_id!r}")
        if len(c_lv.states) != n_cls or len(r_lv.states) != n_cls:
            raise LengthMismatch(f"label vector size differs for {r_lv.report_id!r}")
        for k, (pc, pr) in enumerate(zip(binarize(c_lv), binarize(r_lv))):
            if pc and pr:
                tp[k] += 1
            elif pc:
                fp[k] += 1
            elif pr:
                fn[k] += 1

    per_class: List[Optional[float]] = []
    for k in range(n_cls):
        denom = 2 * tp[k] + fp[k] + fn[k]
        if denom == 0:
            per_class.append(None if exclude_empty else 0.0)
        else:
            per_class.append(2 * tp[k] / denom)
    included = [f for f in per_class if f is not None]
    macro = sum(included) / len(included) if included else 0.0

    s_tp, s_fp, s_fn = sum(tp), sum(fp), sum(fn)
    precision = s_tp / (s_tp + s_fp) if s_tp + s_fp else 0.0
    recall = s_tp / (s_tp + s_fn) if s_tp + s_fn else 0.0
    return ClinicalScores(precision, recall, macro, per_class, list(zip(tp, fp, fn)))
