"""Exact, soft and fast DTW plus learned neural approximations of DTW."""

__version__ = "0.1.0"

from .metrics import InvalidInput, WarpingPath, dtw, dtw_brute, fast_dtw, soft_dtw, soft_dtw_grad  # noqa: E402

__all__ = ["InvalidInput", "WarpingPath", "dtw", "dtw_brute", "fast_dtw", "soft_dtw", "soft_dtw_grad", "__version__"]
