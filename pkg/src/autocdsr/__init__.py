"""Cross-domain sequential recommendation with Pareto-reconciled attention regularisation."""

__version__ = "0.1.0"
