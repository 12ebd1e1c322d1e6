"""Input validation shared by the detector estimators."""

from __future__ import annotations

import numpy as np

__all__ = ["check_complex_samples", "check_indices", "check_is_fitted"]


def check_complex_samples(x, pair: bool) -> np.ndarray:
    """Coerce received samples to complex128 and validate the shape.

    Parameters
    ----------
    x : array-like
        Received fields; shape (n,) for single-polarization detectors or
        (n, 2) for polarization pairs.
    pair : bool
        Whether a two-column array is required.

    Returns
    -------
    ndarray of complex128
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.number):
        raise ValueError(f"samples must be numeric, got dtype {x.dtype}")
    x = x.astype(np.complex128, copy=False)
    want = 2 if pair else 1
    if x.ndim != want or (pair and x.shape[1] != 2):
        shape = "(n, 2)" if pair else "(n,)"
        raise ValueError(f"expected samples of shape {shape}, got {x.shape}")
    if x.size and not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    return x


def check_indices(y, n: int, m: int, pair: bool) -> np.ndarray:
    """Validate transmitted symbol indices against the constellation order."""
    y = np.asarray(y)
    want_shape = (n, 2) if pair else (n,)
    if y.shape != want_shape:
        raise ValueError(f"expected labels of shape {want_shape}, got {y.shape}")
    if y.size == 0:
        return y.astype(np.int64)
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=float))
        if not np.array_equal(rounded, np.asarray(y, dtype=float)):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= m:
        raise ValueError(f"labels must lie in [0, {m})")
    return y


def check_is_fitted(est, attrs) -> None:
    """Raise if any trailing-underscore attribute is missing."""
    missing = [a for a in attrs if getattr(est, a, None) is None]
    if missing:
        raise RuntimeError(
            f"{type(est).__name__} is not fitted (missing {', '.join(missing)}); "
            "call fit() or build it from calibration artifacts"
        )
