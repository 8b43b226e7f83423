"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InputError


def check_cloud(X, name="X", min_points=1, dim=None):
    """One cloud as a finite float64 ``[N, d]`` array with ``1 <= d <= 3``."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=min_points,
                        ensure_all_finite=True)
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from None
    if not 1 <= X.shape[1] <= 3:
        raise InputError(f"{name}: points must have 1 to 3 coordinates, got {X.shape[1]}")
    if dim is not None and X.shape[1] != dim:
        raise InputError(f"{name}: expected {dim} coordinates, got {X.shape[1]}")
    return X


def check_clouds(X, name="X", dim=None):
    """A batch of equally sized clouds as ``[S, N, d]``; a single cloud is promoted."""
    try:
        X = np.asarray(X, dtype=np.float64) if not isinstance(X, list) else np.stack(
            [np.asarray(c, dtype=np.float64) for c in X])
    except ValueError as exc:
        raise InputError(f"{name}: clouds must share one shape ({exc})") from None
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or 0 in X.shape:
        raise InputError(f"{name}: expected a non-empty [S, N, d] array, got shape {X.shape}")
    for i in range(len(X)):
        check_cloud(X[i], f"{name}[{i}]", dim=dim)
    return X


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_seed(random_state):
    """``None``, an int or a ``Generator`` to a ``Generator``."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
