"""Synthetic data: planted-pattern images for CCVE and labelled report corpora."""
from typing import List, Sequence, Tuple

import numpy as np

from .ccve import TrainSample
from .textproc import tokenize

# one impression phrase per cluster, in cluster index order
CLUSTER_PHRASES = (
    "no acute cardiopulmonary process",
    "widened mediastinum",
    "cardiomegaly",
    "patchy opacity",
    "pulmonary nodule",
    "pulmonary edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "rib fracture",
    "endotracheal tube",
)
SEVERITY = ("mild", "moderate", "small", "large", "stable", "new")
NORMAL_VARIANTS = ("no acute cardiopulmonary process", "no acute process", "lungs are clear")


def block_geometry(cluster: int, size: int) -> Tuple[int, int, int, int]:
    """(top, left, height, width) of the bright block planted for a cluster.

    Only the position encodes the cluster: one cell of a 4 x 4 grid each.
    """
    cell = size // 4
    row, col = divmod(cluster, 4)
    side = max(2, cell - 1)
    return row * cell, col * cell, side, side


def planted_image(cluster: int, size: int, rng: np.random.Generator, noise: float = 0.25) -> np.ndarray:
    img = rng.uniform(0.0, noise, size=(size, size))
    top, left, h, w = block_geometry(cluster, size)
    img[top:top + h, left:left + w] = 1.0 - rng.uniform(0.0, noise / 2, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def impression_text(cluster: int, rng: np.random.Generator) -> str:
    if cluster == 0:
        text = NORMAL_VARIANTS[rng.integers(len(NORMAL_VARIANTS))]
    else:
        text = f"{SEVERITY[rng.integers(len(SEVERITY))]} {CLUSTER_PHRASES[cluster]}"
    return text[0].upper() + text[1:] + "."


def planted_dataset(n_clusters: int = 13, per_cluster: int = 50, size: int = 16,
                    seed: int = 0) -> List[Tuple[str, np.ndarray, str, int]]:
    """Records ``(id, image, impression, cluster)`` ordered by cluster then sample."""
    if not 1 <= n_clusters <= len(CLUSTER_PHRASES):
        raise ValueError(f"n_clusters must be in 1..{len(CLUSTER_PHRASES)}")
    if size < 8:
        raise ValueError("image size must be at least 8")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_clusters):
        for i in range(per_cluster):
            out.append((f"syn-{k:02d}-{i:04d}", planted_image(k, size, rng), impression_text(k, rng), k))
    return out


def to_samples(records: Sequence[Tuple[str, np.ndarray, str, int]]) -> List[TrainSample]:
    return [TrainSample(img, tuple(tokenize(text)), k, rid) for rid, img, text, k in records]


def vocabulary(samples: Sequence[TrainSample]) -> Tuple[str, ...]:
    return tuple(sorted({t for s in samples for t in s.tokens}))


FINDING_TEMPLATES = (
    "{mod} {phrase}.",
    "There is {mod} {phrase}.",
    "No {phrase}.",
    "Possible {phrase}.",
    "Heart size is normal.",
    "Lungs are clear.",
)
REPORT_PHRASES = (
    "cardiomegaly", "pulmonary edema", "pleural effusion", "pneumothorax", "pneumonia",
    "atelectasis", "consolidation", "opacity", "nodule", "fracture", "endotracheal tube",
    "pleural thickening", "widened mediastinum",
)


def synthetic_reports(n: int, seed: int = 0) -> List[dict]:
    """Random findings/impression records in the corpus JSONL schema."""
    rng = np.random.default_rng(seed)
    mods = ("mild", "moderate", "severe", "small", "large", "left", "right", "bilateral", "stable")
    records = []
    for i in range(n):
        sentences = []
        for _ in range(int(rng.integers(2, 7))):
            tmpl = FINDING_TEMPLATES[rng.integers(len(FINDING_TEMPLATES))]
            sentences.append(tmpl.format(mod=mods[rng.integers(len(mods))],
                                         phrase=REPORT_PHRASES[rng.integers(len(REPORT_PHRASES))]))
        findings = " ".join(s[0].upper() + s[1:] for s in sentences)
        impression = impression_text(int(rng.integers(len(CLUSTER_PHRASES))), rng)
        records.append({"id": f"rep-{i:06d}", "findings": findings, "impression": impression})
    return records
