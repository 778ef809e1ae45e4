"""Multi-task MRC-style named entity recognition on a from-scratch autodiff core."""

__version__ = "0.1.0"
