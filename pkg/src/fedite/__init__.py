"""Federated individual-treatment-effect estimation at desk scale.

A self-contained stack: float64 tensor ops with a reverse-mode tape,
a tabular attention encoder over named covariates, treatment fusion by
cross-attention, per-site personalized outcome heads, alternating local
optimization, data-size-weighted federated aggregation, counterfactual
metrics, a synthetic data generator with known potential outcomes, a
zero-shot treatment protocol, and attention export.
"""

__version__ = "0.1.0"
