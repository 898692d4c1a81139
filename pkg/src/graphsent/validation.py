"""Input validation helpers used by the estimator-facing API."""

import numpy as np

from .errors import InputError


def as_float_array(values, name="array", ndim=None):
    """Coerce to a C-contiguous float64 array and reject non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InputError(f"{name}: expected {ndim}-d array, got {arr.ndim}-d")
    if not np.all(np.isfinite(arr)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise InputError(f"{name}: non-finite entry at index {bad}")
    return arr


def check_embeddings(values, n=None, d=None):
    """Validate an n-by-d embedding matrix against optional expected shape."""
    arr = as_float_array(values, "embeddings", ndim=2)
    if n is not None and arr.shape[0] != n:
        raise InputError(f"embeddings: expected {n} rows, got {arr.shape[0]}")
    if d is not None and arr.shape[1] != d:
        raise InputError(f"embeddings: expected {d} columns, got {arr.shape[1]}")
    return arr


def check_binary_labels(y, name="y", allow_unlabeled=False):
    """Validate integer labels: 1 = non-negative, 0 = negative, -1 = unlabeled."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise InputError(f"{name}: expected 1-d label vector")
    arr = arr.astype(np.int64)
    allowed = {0, 1, -1} if allow_unlabeled else {0, 1}
    present = set(np.unique(arr).tolist())
    if not present <= allowed:
        raise InputError(f"{name}: labels must be in {sorted(allowed)}, got {sorted(present)}")
    return arr


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise InputError(f"inputs have inconsistent lengths: {sorted(lengths)}")


def check_probabilities(p, name="p"):
    """Validate a vector of probabilities in [0, 1]."""
    arr = as_float_array(p, name, ndim=1)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError(f"{name}: values must lie in [0, 1]")
    return arr
