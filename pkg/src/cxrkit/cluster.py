"""13-way impression clustering used to pick a CCVE filter per training sample.

The 14 label categories collapse to 13 clusters by merging Pleural Effusion
and Pleural Other. Multi-disease impressions go to the rarest Positive cluster
(then the rarest Uncertain one), with No Finding as the fallback.
"""
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .corpus import Corpus, Report
from .errors import EmptyCorpus, SectionMissing
from .labeler import NO_FINDING, LabelState, LabelVector, Lexicon, default_lexicon, label_report

CLUSTER_SECTION = "impression_fallback"
MERGED_PLEURAL = ("Pleural Effusion", "Pleural Other")
MERGED_NAME = "Pleural Effusion/Other"


@dataclass(frozen=True)
class ClusterId:
    index: int
    name: str


@dataclass(frozen=True)
class ClusterScheme:
    names: Tuple[str, ...]
    category_to_cluster: Tuple[int, ...]

    @property
    def n_clusters(self) -> int:
        return len(self.names)


def cluster_scheme(lexicon: Optional[Lexicon] = None) -> ClusterScheme:
    lexicon = lexicon or default_lexicon()
    names: List[str] = []
    mapping: List[int] = []
    for cat in lexicon.categories:
        if cat in MERGED_PLEURAL:
            if MERGED_NAME not in names:
                names.append(MERGED_NAME)
            mapping.append(names.index(MERGED_NAME))
        else:
            names.append(cat)
            mapping.append(len(names) - 1)
    return ClusterScheme(tuple(names), tuple(mapping))


def _clusters_with(lv: LabelVector, state: LabelState, scheme: ClusterScheme) -> set:
    return {scheme.category_to_cluster[c] for c, s in enumerate(lv.states)
            if s is state and c != NO_FINDING}


def priority_from_counts(counts: Sequence[int], no_finding: int = NO_FINDING) -> Tuple[int, ...]:
    """Rarest first, ties by index, No Finding always last."""
    order = sorted((c for c in range(len(counts)) if c != no_finding), key=lambda c: (counts[c], c))
    return tuple(order) + (no_finding,)


def positive_cluster_counts(labels: Iterable[LabelVector], scheme: ClusterScheme) -> List[int]:
    counts = Counter()
    for lv in labels:
        counts.update(_clusters_with(lv, LabelState.POSITIVE, scheme))
    return [counts[c] for c in range(scheme.n_clusters)]


def _label_all(reports: Iterable[Report], lexicon: Lexicon) -> List[Tuple[Report, LabelVector]]:
    out = []
    for report in reports:
        try:
            out.append((report, label_report(report, CLUSTER_SECTION, lexicon)))
        except SectionMissing:
            continue
    return out


def cluster_priority(corpus: Corpus, lexicon: Optional[Lexicon] = None) -> Tuple[int, ...]:
    if corpus is None or not len(corpus):
        raise EmptyCorpus("cluster priority needs a non-empty corpus")
    lexicon = lexicon or default_lexicon()
    scheme = cluster_scheme(lexicon)
    labels = [lv for _, lv in _label_all(corpus, lexicon)]
    return priority_from_counts(positive_cluster_counts(labels, scheme))


def choose_cluster(lv: LabelVector, priority: Sequence[int], scheme: ClusterScheme,
                   use_uncertain: bool = True) -> ClusterId:
    rank = {c: i for i, c in enumerate(priority)}
    candidates = _clusters_with(lv, LabelState.POSITIVE, scheme)
    if not candidates and use_uncertain:
        candidates = _clusters_with(lv, LabelState.UNCERTAIN, scheme)
    index = min(candidates, key=rank.__getitem__) if candidates else scheme.category_to_cluster[NO_FINDING]
    return ClusterId(index, scheme.names[index])


def assign_cluster(report: Report, priority: Sequence[int], lexicon: Optional[Lexicon] = None,
                   use_uncertain: bool = True) -> ClusterId:
    lexicon = lexicon or default_lexicon()
    lv = label_report(report, CLUSTER_SECTION, lexicon)
    return choose_cluster(lv, priority, cluster_scheme(lexicon), use_uncertain)


def cluster_corpus(corpus: Corpus, lexicon: Optional[Lexicon] = None,
                   use_uncertain: bool = True) -> List[Tuple[str, ClusterId]]:
    """Label once, derive the priority, and assign every report with usable text."""
    if corpus is None or not len(corpus):
        raise EmptyCorpus("cannot cluster an empty corpus")
    lexicon = lexicon or default_lexicon()
    scheme = cluster_scheme(lexicon)
    labelled = _label_all(corpus, lexicon)
    priority = priority_from_counts(positive_cluster_counts([lv for _, lv in labelled], scheme))
    return [(r.id, choose_cluster(lv, priority, scheme, use_uncertain)) for r, lv in labelled]
