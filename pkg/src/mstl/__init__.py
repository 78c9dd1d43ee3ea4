"""Multi-stage transfer learning for small CNNs, built on a numpy autodiff core."""

__version__ = "0.1.0"
