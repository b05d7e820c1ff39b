"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ValidationError


def check_embeddings(X) -> np.ndarray:
    """2-D finite float array of embeddings; ``None`` rows are rejected."""
    if isinstance(X, (list, tuple)):
        if any(x is None for x in X):
            raise ValidationError("detection without embedding")
        if len(X) == 0:
            return np.zeros((0, 0))
    try:
        return check_array(X, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=0,
                           ensure_min_features=0)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def check_distance_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValidationError(f"distance matrix must be 2-D, got shape {M.shape}")
    if M.size and not np.all(np.isfinite(M)):
        raise ValidationError("distance matrix must be finite")
    return M


def check_points(points, dim: int = 3) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return P.reshape(0, dim)
    P = P.reshape(-1, P.shape[-1])
    if P.shape[1] < dim:
        raise ValidationError(f"points need at least {dim} coordinates, got {P.shape[1]}")
    if not np.all(np.isfinite(P)):
        raise ValidationError("points must be finite")
    return P
