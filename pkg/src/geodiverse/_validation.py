"""Input validation helpers used by the estimators and the module-level API."""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

import numpy as np

from .errors import ValidationError

SIMPLEX_TOL = 1e-9


def check_simplex(weights: Sequence[float], tol: float = SIMPLEX_TOL, name: str = "weights") -> list[float]:
    """Return ``weights`` as floats after checking they lie on the probability simplex."""
    out = [float(w) for w in weights]
    if not out:
        raise ValidationError(f"{name} must be nonempty")
    for w in out:
        if not math.isfinite(w) or w < 0:
            raise ValidationError(f"{name} must be finite and >= 0, got {w!r}")
    total = math.fsum(out)
    if abs(total - 1.0) > tol:
        raise ValidationError(f"{name} must sum to 1 (got {total!r})")
    return out


def check_unique(items: Iterable, name: str = "items") -> list:
    items = list(items)
    seen = set()
    for item in items:
        if item in seen:
            raise ValidationError(f"duplicate entry in {name}: {item!r}")
        seen.add(item)
    return items


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_latlon(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise ValidationError(f"latitude out of range: {lat!r}")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise ValidationError(f"longitude out of range: {lon!r}")


def check_band_stack(X) -> np.ndarray:
    """Coerce one tile's pixels to a ``(bands, height, width)`` float64 array.

    2-D input is treated as a single band.
    """
    arr = np.asarray(getattr(X, "pixels", X))
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValidationError(f"expected (bands, height, width) pixels, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValidationError(f"empty pixel grid of shape {arr.shape}")
    return arr.astype(np.float64, copy=False)


def check_tile_collection(X) -> list:
    """Accept a 4-D array ``(n, bands, h, w)`` or any iterable of tiles/arrays."""
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            return list(X)
        if X.ndim in (2, 3):
            return [X]
        raise ValidationError(f"cannot interpret array of shape {X.shape} as tiles")
    if isinstance(X, Sequence) and not isinstance(X, (str, bytes)):
        return X  # may be lazy; indexing loads on demand
    return list(X)
