"""Group-relative policy-gradient estimators on enumerable tabular bandits."""

__version__ = "0.1.0"
