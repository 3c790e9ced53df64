"""Allocation-controlled point sampling over group polygons.

Groups (continents by default) are allocated sample counts from a target
vector on the simplex; points are then drawn uniformly per unit area on the
sphere inside each group's polygons.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely
from shapely.geometry import shape
from shapely.ops import unary_union
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rng import stream
from ._validation import check_positive_int
from .errors import ConfigurationError, PersistenceError, SaturationError, ValidationError
from .manifest import AllocationVector, DatasetManifest, GeoSample
from .overlay import AUTHALIC_RADIUS_M, VectorRegionMap, _clean, spherical_area

__all__ = [
    "AllocationVector",
    "RegionSet",
    "RegionSampler",
    "allocate_counts",
    "sample_points",
    "parse_alpha",
]


def allocate_counts(alpha: AllocationVector, n: int) -> dict:
    """Largest-remainder rounding of ``n * alpha``.

    Quotas are evaluated exactly (weights are renormalised as rationals), and
    leftover units go to the largest fractional parts, earlier groups first on
    ties.
    """
    n = check_positive_int(n, "n")
    weights = [Fraction(w) for w in alpha.weights]
    total = sum(weights)
    quotas = [n * w / total for w in weights]
    counts = [q.numerator // q.denominator for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return dict(zip(alpha.groups, counts))


def parse_alpha(text: str, groups: Sequence[str]) -> AllocationVector:
    """Parse ``global``, ``one-hot:<group>`` or ``name=weight,...`` into an allocation.

    Groups left out of an explicit mapping get weight 0.
    """
    text = text.strip()
    if text.lower() == "global":
        return AllocationVector.uniform(groups)
    if text.lower().startswith("one-hot:"):
        return AllocationVector.one_hot(groups, text.split(":", 1)[1].strip())
    weights = dict.fromkeys(groups, 0.0)
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.rpartition("=")
        name = name.strip()
        if not sep or name not in weights:
            raise ConfigurationError(f"cannot parse allocation term {part!r} for groups {list(groups)}")
        try:
            weights[name] = float(value)
        except ValueError:
            raise ConfigurationError(f"weight for {name!r} is not a number: {value!r}") from None
    try:
        return AllocationVector(tuple(groups), tuple(weights.values()))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid allocation {text!r}: {exc}") from None


class RegionSet:
    """Ordered group polygons in WGS84, optionally with population shares."""

    def __init__(self, regions: Sequence, population_fraction: Optional[dict] = None):
        merged: dict = {}
        for group, geom in regions:
            merged.setdefault(group, []).append(_clean(geom))
        if not merged:
            raise ValidationError("region set is empty")
        self.groups = tuple(merged)
        self.geometries = {g: unary_union(parts) for g, parts in merged.items()}
        self.population_fraction = dict(population_fraction) if population_fraction else None

    @classmethod
    def from_geojson(cls, path, prop: str = "group"):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"cannot load GeoJSON: {exc}", path=path) from exc
        regions = []
        for feat in data.get("features", []):
            props = feat.get("properties") or {}
            group = props.get(prop, props.get("class"))
            if group is None:
                raise ValidationError(f"{path}: feature without a {prop!r} property")
            regions.append((group, shape(feat["geometry"])))
        return cls(regions)

    def land_area_fractions(self) -> dict:
        """Area share of each group on the sphere; a default for ``population_fraction``."""
        areas = {g: spherical_area(geom) for g, geom in self.geometries.items()}
        total = math.fsum(areas.values())
        return {g: a / total for g, a in areas.items()}

    def to_region_map(self) -> VectorRegionMap:
        return VectorRegionMap(list(self.geometries.items()))


def _unit_vectors(lat, lon):
    phi, lam = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


class _SeparationIndex:
    """Spatial hash on unit-sphere coordinates for minimum-distance checks."""

    def __init__(self, min_separation_m: float):
        angle = min_separation_m / AUTHALIC_RADIUS_M
        self.chord = 2.0 * math.sin(min(angle, math.pi) / 2.0)
        self.cell = max(self.chord, 1e-9)
        self.buckets = defaultdict(list)

    def _key(self, v):
        return tuple(int(math.floor(c / self.cell)) for c in v)

    def admits(self, v) -> bool:
        kx, ky, kz = self._key(v)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for u in self.buckets.get((kx + dx, ky + dy, kz + dz), ()):
                        if np.linalg.norm(v - u) < self.chord:
                            return False
        return True

    def add(self, v):
        self.buckets[self._key(v)].append(v)


class RegionSampler(BaseEstimator):
    """Uniform-by-area point sampler driven by an allocation vector.

    Parameters
    ----------
    alpha : AllocationVector
        Target group proportions.
    min_separation_m : float, optional
        Minimum great-circle distance between any two emitted points.
    strict : bool
        Reject region sets whose groups overlap instead of resolving overlaps
        by region order.
    batch_size : int
        Candidates drawn per rejection round.
    max_rejections : int
        Consecutive rejected candidates tolerated per group before giving up.

    Notes
    -----
    Candidates are drawn in each group's bounding box with longitude uniform
    and ``sin(latitude)`` uniform, which is the uniform measure on the sphere
    restricted to the box. A candidate counts for a group only if that group
    is the first one in region order to contain it. Each group draws from its
    own stream derived from ``(seed, group)``.
    """

    def __init__(self, alpha=None, min_separation_m=None, strict=False, batch_size=4096,
                 max_rejections=200_000):
        self.alpha = alpha
        self.min_separation_m = min_separation_m
        self.strict = strict
        self.batch_size = batch_size
        self.max_rejections = max_rejections

    def fit(self, regions: RegionSet, y=None):
        if not isinstance(regions, RegionSet):
            raise ValidationError("fit expects a RegionSet")
        if self.alpha is None:
            raise ConfigurationError("alpha is not set")
        if self.strict:
            overlaps = regions.to_region_map().overlaps()
            if overlaps:
                raise ConfigurationError(f"overlapping groups in strict mode: {overlaps}")
        for g, w in zip(self.alpha.groups, self.alpha.weights):
            if w > 0 and (g not in regions.geometries or regions.geometries[g].is_empty):
                raise ConfigurationError(f"group {g!r} has positive weight but no polygons")
        claimed = None
        exclusive = {}
        for g in regions.groups:
            geom = regions.geometries[g]
            exclusive[g] = geom if claimed is None else geom.difference(claimed)
            claimed = geom if claimed is None else claimed.union(geom)
        for geom in exclusive.values():
            shapely.prepare(geom)
        self.regions_ = regions
        self.geometries_ = exclusive
        return self

    def _draw_group(self, group, count, seed, index):
        geom = self.geometries_[group]
        minx, miny, maxx, maxy = geom.bounds
        s_lo, s_hi = math.sin(math.radians(miny)), math.sin(math.radians(maxy))
        rng = stream(seed, "sampler", group)
        lats, lons = [], []
        rejected = 0
        while len(lats) < count:
            lon = rng.uniform(minx, maxx, self.batch_size)
            lat = np.degrees(np.arcsin(rng.uniform(s_lo, s_hi, self.batch_size)))
            inside = shapely.contains_xy(geom, lon, lat)
            if index is None:
                take = np.flatnonzero(inside)[: count - len(lats)]
                if take.size:
                    lats.extend(lat[take].tolist())
                    lons.extend(lon[take].tolist())
                    rejected = int(self.batch_size - 1 - np.flatnonzero(inside)[-1])
                else:
                    rejected += self.batch_size
                if rejected >= self.max_rejections:
                    raise SaturationError(
                        f"group {group!r}: stopped at {len(lats)} of {count} points after "
                        f"{rejected} consecutive rejections",
                        achieved=len(lats),
                        requested=count,
                    )
                continue
            for ok, la, lo in zip(inside, lat, lon):
                if len(lats) == count:
                    break
                if ok and index is not None:
                    v = _unit_vectors(la, lo)
                    ok = index.admits(v)
                    if ok:
                        index.add(v)
                if ok:
                    lats.append(float(la))
                    lons.append(float(lo))
                    rejected = 0
                else:
                    rejected += 1
                    if rejected >= self.max_rejections:
                        raise SaturationError(
                            f"group {group!r}: stopped at {len(lats)} of {count} points after "
                            f"{rejected} consecutive rejections",
                            achieved=len(lats),
                            requested=count,
                        )
        return lats, lons

    def sample(self, n, seed=0, name="sampled"):
        """Draw ``n`` points and return them as a :class:`DatasetManifest`."""
        check_is_fitted(self, "geometries_")
        counts = allocate_counts(self.alpha, n)
        index = _SeparationIndex(self.min_separation_m) if self.min_separation_m else None
        samples = []
        achieved = 0
        for group in self.alpha.groups:
            try:
                lats, lons = self._draw_group(group, counts[group], seed, index) if counts[group] else ([], [])
            except SaturationError as exc:
                raise SaturationError(
                    f"{exc} (total achieved {achieved + exc.achieved} of {n})",
                    achieved=achieved + exc.achieved,
                    requested=n,
                ) from None
            achieved += len(lats)
            for la, lo in zip(lats, lons):
                samples.append(GeoSample(id=f"{name}-{len(samples):07d}", lat=la, lon=lo, group_label=group))
        return DatasetManifest(name, self.alpha.groups, self.alpha, tuple(samples), seed=int(seed))


def sample_points(regions: RegionSet, alpha: AllocationVector, n: int, seed: int,
                  min_separation_m: Optional[float] = None, name: str = "sampled",
                  strict: bool = False) -> DatasetManifest:
    sampler = RegionSampler(alpha=alpha, min_separation_m=min_separation_m, strict=strict)
    return sampler.fit(regions).sample(n, seed=seed, name=name)
