"""Report parsing, rule-based labeling, captioning metrics and a cluster-conditioned
contrastive encoder for chest X-ray report generation experiments."""

__version__ = "0.1.0"
