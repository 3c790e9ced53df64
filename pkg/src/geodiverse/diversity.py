"""Entropy-based diversity measures for pretraining datasets.

All entropies are Shannon entropies of discrete distributions, natural log
by default. Sums go through :func:`math.fsum`, which is correctly rounded and
therefore independent of summation order: shuffling samples, bands or classes
cannot change a result.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_band_stack, check_tile_collection
from .errors import DegenerateInputError, NoOverlapError, PersistenceError, ValidationError
from .overlay import AreaVector, point_group

logger = logging.getLogger(__name__)

MEASURES = ("continent", "biome", "landcover", "spectral", "per_band", "sample_biome", "sample_landcover")

_LOG_BASES = {"e": None, "natural": None, "2": 2.0, "10": 10.0}


def _log_scale(log_base) -> float:
    """Divisor converting nats into the requested unit."""
    key = "e" if log_base is None else str(log_base).lower()
    if key in ("2.0", "10.0"):
        key = key[:-2]
    if key not in _LOG_BASES:
        raise ValidationError(f"log_base must be 'e', 2 or 10, got {log_base!r}")
    base = _LOG_BASES[key]
    return 1.0 if base is None else math.log(base)


@dataclass(frozen=True)
class Distribution:
    labels: tuple
    probs: tuple

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != len(self.labels):
            raise ValidationError("labels and probs differ in length")
        if not probs or any(not (p >= 0) for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValidationError("probs must be >= 0 and sum to 1")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_counts(cls, labels: Sequence, counts: Sequence[float]) -> "Distribution":
        counts = [float(c) for c in counts]
        total = math.fsum(counts)
        if total <= 0:
            raise DegenerateInputError("counts sum to zero")
        return cls(tuple(labels), tuple(c / total for c in counts))


def _entropy_of_probs(probs, scale: float = 1.0) -> float:
    return math.fsum(-p * math.log(p) for p in probs if p > 0) / scale


def shannon_entropy(d, log_base="e") -> float:
    """``-sum p log p`` with ``0 log 0 = 0``.

    ``d`` is a :class:`Distribution` or a plain sequence of probabilities.
    """
    if not isinstance(d, Distribution):
        d = Distribution(tuple(range(len(d))), tuple(d))
    return _entropy_of_probs(d.probs, _log_scale(log_base))


def entropy_from_counts(counts, log_base="e") -> float:
    counts = [float(c) for c in counts]
    total = math.fsum(counts)
    if total <= 0:
        raise DegenerateInputError("counts sum to zero")
    return _entropy_of_probs((c / total for c in counts), _log_scale(log_base))


# -- continent / class-area diversity ----------------------------------------------


def continent_counts(manifest, continents=None, strict: bool = True):
    """Images per continent, plus the number of samples that could not be placed.

    Without a map the samples' ``group_label`` is taken as their continent.
    """
    if continents is None:
        counts = manifest.group_counts()
        return counts, 0
    counts = dict.fromkeys(continents.classes, 0)
    excluded = 0
    for s in manifest.samples:
        try:
            counts[point_group(s.lat, s.lon, continents)] += 1
        except NoOverlapError:
            if strict:
                raise NoOverlapError(f"sample {s.id!r} at ({s.lat}, {s.lon}) is on no continent") from None
            excluded += 1
    if excluded:
        logger.warning("%d samples fell outside every continent and were excluded", excluded)
    return counts, excluded


def continent_diversity(manifest, continents=None, strict: bool = True, log_base="e") -> float:
    counts, _ = continent_counts(manifest, continents, strict)
    return entropy_from_counts(list(counts.values()), log_base)


def _check_area_vectors(vectors) -> list:
    vectors = list(vectors)
    if not vectors:
        raise DegenerateInputError("no area vectors")
    classes = vectors[0].classes
    for v in vectors[1:]:
        if v.classes != classes:
            raise ValidationError("area vectors disagree on the class set")
    return vectors


def class_area_diversity(area_vectors: Iterable[AreaVector], log_base="e") -> float:
    """Entropy of the dataset's pooled area over classes (biomes or landcover)."""
    vectors = _check_area_vectors(area_vectors)
    pooled = [math.fsum(col) for col in zip(*(v.areas for v in vectors))]
    if math.fsum(pooled) <= 0:
        raise DegenerateInputError("total area is zero")
    return entropy_from_counts(pooled, log_base)


def per_sample_class_entropy(area_vectors, log_base="e") -> np.ndarray:
    """Entropy of each tile's own area distribution; NaN for zero-area tiles."""
    scale = _log_scale(log_base)
    out = []
    for v in _check_area_vectors(area_vectors):
        total = math.fsum(v.areas)
        out.append(_entropy_of_probs((a / total for a in v.areas), scale) if total > 0 else math.nan)
    return np.array(out)


def sample_class_diversity(area_vectors: Iterable[AreaVector], log_base="e") -> float:
    """Mean over tiles of per-tile class entropy; zero-area tiles are skipped."""
    values = per_sample_class_entropy(area_vectors, log_base)
    kept = values[~np.isnan(values)]
    if kept.size < values.size:
        logger.warning("%d tiles with zero area excluded", values.size - kept.size)
    if kept.size == 0:
        raise DegenerateInputError("every tile has zero area")
    return math.fsum(kept.tolist()) / kept.size


# -- spectral diversity ------------------------------------------------------------


@dataclass(frozen=True)
class HistogramSpec:
    """Binning of one band's pixel values.

    ``range_mode="sample"`` spans each tile's own per-band min..max;
    ``range_mode="fixed"`` uses ``value_range``, either one ``(lo, hi)`` for
    every band or a mapping band id -> ``(lo, hi)``. Fixed-range values
    outside the range fall into the end bins.
    """

    bins: int = 100
    range_mode: str = "sample"
    value_range: object = None

    def __post_init__(self):
        if int(self.bins) != self.bins or self.bins < 2:
            raise ValidationError(f"bins must be an integer >= 2, got {self.bins!r}")
        if self.range_mode not in ("sample", "fixed"):
            raise ValidationError(f"range_mode must be 'sample' or 'fixed', got {self.range_mode!r}")
        if self.range_mode == "fixed" and self.value_range is not None:
            ranges = self.value_range.values() if isinstance(self.value_range, dict) else [self.value_range]
            for lo, hi in ranges:
                if not lo < hi:
                    raise ValidationError(f"fixed range needs lo < hi, got ({lo}, {hi})")

    def range_for(self, band, values: np.ndarray):
        if self.range_mode == "sample":
            return float(values.min()), float(values.max())
        if self.value_range is None:
            raise ValidationError("fixed range mode needs value_range (or fit SpectralEntropy first)")
        if isinstance(self.value_range, dict):
            if band not in self.value_range:
                raise ValidationError(f"no fixed range for band {band!r}")
            lo, hi = self.value_range[band]
        else:
            lo, hi = self.value_range
        return float(lo), float(hi)

    def echo(self) -> dict:
        vr = self.value_range
        if isinstance(vr, dict):
            vr = {str(k): list(v) for k, v in vr.items()}
        elif vr is not None:
            vr = list(vr)
        return {"bins": int(self.bins), "range_mode": self.range_mode, "value_range": vr}


# Bin positions within this distance (in bin widths) of an integer are snapped
# onto it, so values sitting on an edge land in the same bin whatever affine
# rescaling was applied beforehand.
_EDGE_SNAP = 1e-9


def histogram_counts(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    """Counts over ``bins`` equal-width bins on ``[lo, hi]``; ``hi`` goes to the last bin."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if hi <= lo:
        out = np.zeros(bins, dtype=np.int64)
        out[0] = values.size
        return out
    pos = (values - lo) * bins / (hi - lo)
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) <= _EDGE_SNAP, nearest, pos)
    idx = np.clip(np.floor(pos), 0, bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=bins)


def band_entropy(values, spec: HistogramSpec = HistogramSpec(), band=None, log_base="e") -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise DegenerateInputError(f"band {band!r} has no valid pixels")
    lo, hi = spec.range_for(band, values)
    counts = histogram_counts(values, int(spec.bins), lo, hi)
    n = values.size
    return _entropy_of_probs((c / n for c in counts.tolist() if c), _log_scale(log_base))


def _band_values(tile):
    """Yield ``(band id, float64 values with NaN at invalid pixels)``."""
    if hasattr(tile, "valid_mask"):
        px = tile.pixels.astype(np.float64)
        px = np.where(tile.valid_mask(), px, np.nan)
        return list(zip(tile.bands, px))
    px = check_band_stack(tile)
    return [(i, px[i]) for i in range(px.shape[0])]


def spectral_entropy_sample(tile, spec: HistogramSpec = HistogramSpec(), log_base="e"):
    """Per-band entropies ``{band: H}`` and their mean for one tile."""
    per_band = {b: band_entropy(v, spec, b, log_base) for b, v in _band_values(tile)}
    return per_band, math.fsum(per_band.values()) / len(per_band)


class SpectralEntropy(BaseEstimator, TransformerMixin):
    """Histogram entropy of every band of every tile.

    ``transform`` maps a collection of tiles to an array of shape
    ``(n_tiles, n_bands)`` holding each band's entropy (NaN where a band has
    no valid pixel). In ``range_mode="fixed"`` without an explicit
    ``value_range``, ``fit`` learns per-band min/max over the training tiles.

    Parameters
    ----------
    bins : int, default=100
    range_mode : {"sample", "fixed"}, default="sample"
    value_range : tuple or dict, optional
    log_base : {"e", 2, 10}, default="e"
    """

    def __init__(self, bins=100, range_mode="sample", value_range=None, log_base="e"):
        self.bins = bins
        self.range_mode = range_mode
        self.value_range = value_range
        self.log_base = log_base

    def fit(self, X, y=None):
        tiles = check_tile_collection(X)
        if not tiles:
            raise DegenerateInputError("no tiles")
        self.bands_ = self._common_bands(tiles)
        value_range = self.value_range
        if self.range_mode == "fixed" and value_range is None:
            lo = {b: math.inf for b in self.bands_}
            hi = {b: -math.inf for b in self.bands_}
            for t in tiles:
                for b, v in _band_values(t):
                    if b in lo and np.any(~np.isnan(v)):
                        lo[b] = min(lo[b], float(np.nanmin(v)))
                        hi[b] = max(hi[b], float(np.nanmax(v)))
            value_range = {b: (lo[b], hi[b]) for b in self.bands_}
        self.spec_ = HistogramSpec(self.bins, self.range_mode, value_range)
        _log_scale(self.log_base)
        return self

    @staticmethod
    def _common_bands(tiles) -> tuple:
        band_lists = [[b for b, _ in _band_values(t)] for t in tiles]
        common = set(band_lists[0]).intersection(*band_lists[1:])
        extras = set().union(*band_lists) - common
        if extras:
            logger.warning("bands %s are not present in every tile and are ignored", sorted(map(str, extras)))
        if not common:
            raise DegenerateInputError("tiles share no band")
        return tuple(b for b in band_lists[0] if b in common)

    def transform(self, X):
        check_is_fitted(self, "spec_")
        tiles = check_tile_collection(X)
        out = np.full((len(tiles), len(self.bands_)), np.nan)
        for i, t in enumerate(tiles):
            values = dict(_band_values(t))
            for j, b in enumerate(self.bands_):
                try:
                    out[i, j] = band_entropy(values[b], self.spec_, b, self.log_base)
                except DegenerateInputError:
                    pass
        return out


def spectral_entropy_dataset(tiles, spec: HistogramSpec = HistogramSpec(), log_base="e",
                             return_excluded: bool = False):
    """Dataset spectral entropy (mean of per-tile means) and per-band means.

    Tiles with a band holding no valid pixel are dropped from both means.
    """
    tiles = check_tile_collection(tiles)
    if not tiles:
        raise DegenerateInputError("no tiles")
    est = SpectralEntropy(spec.bins, spec.range_mode, spec.value_range, log_base)
    est.bands_ = SpectralEntropy._common_bands(tiles)
    est.spec_ = spec
    H = est.transform(tiles)
    keep = ~np.isnan(H).any(axis=1)
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("%d tiles with an empty band excluded from spectral means", excluded)
    H = H[keep]
    if H.shape[0] == 0:
        raise DegenerateInputError("no tile has valid pixels in every band")
    per_tile = [math.fsum(row) / len(row) for row in H.tolist()]
    h_spectral = math.fsum(per_tile) / len(per_tile)
    per_band = {b: math.fsum(H[:, j].tolist()) / H.shape[0] for j, b in enumerate(est.bands_)}
    if return_excluded:
        return h_spectral, per_band, excluded
    return h_spectral, per_band


# -- reports -----------------------------------------------------------------------


@dataclass
class DiversityReport:
    dataset: str
    continent: Optional[float] = None
    biome: Optional[float] = None
    landcover: Optional[float] = None
    spectral: Optional[float] = None
    per_band: dict = field(default_factory=dict)
    sample_biome: Optional[float] = None
    sample_landcover: Optional[float] = None
    sample_count: int = 0
    excluded: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    SCALAR_MEASURES = ("continent", "biome", "landcover", "spectral", "sample_biome", "sample_landcover")

    def measure(self, name: str) -> Optional[float]:
        """Scalar value of a measure; ``band:<id>`` selects one per-band entropy."""
        if name.startswith("band:"):
            return self.per_band.get(name[5:])
        if name not in self.SCALAR_MEASURES:
            raise ValidationError(f"unknown measure {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_band"] = {str(k): v for k, v in self.per_band.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DiversityReport":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})

    @classmethod
    def from_json(cls, path) -> "DiversityReport":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"cannot read diversity report: {exc}", path=path) from exc

    def csv_columns(self) -> list:
        return ["dataset", "sample_count", *self.SCALAR_MEASURES] + [f"band_{b}" for b in self.per_band]

    def to_csv(self) -> str:
        cols = self.csv_columns()
        row = [self.dataset, self.sample_count] + [
            "" if getattr(self, m) is None else repr(getattr(self, m)) for m in self.SCALAR_MEASURES
        ] + [repr(v) for v in self.per_band.values()]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow(row)
        return buf.getvalue()


def build_report(
    name: str,
    manifest=None,
    tiles=None,
    continents=None,
    biomes=None,
    landcover=None,
    spec: HistogramSpec = HistogramSpec(),
    log_base="e",
    measures: Sequence[str] = MEASURES,
    strict: bool = False,
) -> DiversityReport:
    """Compute the requested measures from whatever inputs are supplied.

    ``continent`` needs ``manifest``; the spectral measures need ``tiles``;
    the biome/landcover measures need ``tiles`` (for footprints) and the
    matching region map.
    """
    from .overlay import area_vector, footprint

    unknown = set(measures) - set(MEASURES)
    if unknown:
        raise ValidationError(f"unknown measures {sorted(unknown)}")
    tiles = check_tile_collection(tiles) if tiles is not None else None
    count = len(manifest) if manifest is not None else len(tiles or [])
    report = DiversityReport(name, sample_count=count,
                             config={"histogram": spec.echo(), "log_base": str(log_base)})

    if "continent" in measures:
        if manifest is None:
            raise ValidationError("continent diversity needs a manifest")
        counts, excluded = continent_counts(manifest, continents, strict)
        report.continent = entropy_from_counts(list(counts.values()), log_base)
        report.excluded["continent"] = excluded

    if {"spectral", "per_band"} & set(measures):
        if not tiles:
            raise ValidationError("spectral diversity needs tiles")
        h, per_band, excluded = spectral_entropy_dataset(tiles, spec, log_base, return_excluded=True)
        if "spectral" in measures:
            report.spectral = h
        if "per_band" in measures:
            report.per_band = {str(b): v for b, v in per_band.items()}
        report.excluded["spectral"] = excluded

    for kind, region_map in (("biome", biomes), ("landcover", landcover)):
        wanted = [m for m in (kind, f"sample_{kind}") if m in measures]
        if not wanted:
            continue
        if region_map is None or not tiles:
            raise ValidationError(f"{kind} diversity needs tiles and a {kind} map")
        vectors, excluded = [], 0
        for t in tiles:
            try:
                vectors.append(area_vector(footprint(t), region_map))
            except NoOverlapError:
                excluded += 1
        if not vectors:
            raise DegenerateInputError(f"no tile overlaps the {kind} map")
        report.excluded[kind] = excluded
        if kind in measures:
            setattr(report, kind, class_area_diversity(vectors, log_base))
        if f"sample_{kind}" in measures:
            setattr(report, f"sample_{kind}", sample_class_diversity(vectors, log_base))
    return report
