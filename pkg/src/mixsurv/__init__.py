"""Survival prediction from bags of patch features.

Quantile-gated patch selection, graph-guided balanced clustering,
hierarchical attention and a mixture-of-log-logistic-experts head, with
censored-likelihood training and concordance / Kaplan-Meier / log-rank
evaluation.
"""

__version__ = "0.1.0"
