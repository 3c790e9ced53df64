"""Tile acquisition, normalization and idempotent storage for manifest points."""
from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._io import atomic_write_bytes, atomic_write_text, sha256_file
from .errors import (
    AvailabilityError,
    CloudFilterError,
    ConfigurationError,
    PersistenceError,
    SourceError,
    TransientSourceError,
    ValidationError,
)
from .manifest import DatasetManifest
from .overlay import from_wgs84

logger = logging.getLogger(__name__)

SENTINEL2_BANDS = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12")


@dataclass(eq=False)
class RasterTile:
    """Multi-band pixel grid ``(bands, height, width)`` with a GDAL-ordered geotransform."""

    bands: tuple
    pixels: np.ndarray
    geotransform: tuple
    crs: str = "EPSG:4326"
    nodata: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[np.newaxis]
        if pixels.ndim != 3:
            raise ValidationError(f"pixels must be (bands, height, width), got {pixels.shape}")
        self.pixels = pixels
        self.bands = tuple(self.bands) if self.bands else tuple(f"B{i + 1}" for i in range(pixels.shape[0]))
        if len(self.bands) != pixels.shape[0]:
            raise ValidationError(f"{len(self.bands)} band ids for {pixels.shape[0]} bands")
        gt = tuple(float(v) for v in self.geotransform)
        if len(gt) != 6 or gt[1] == 0 or gt[5] == 0:
            raise ValidationError(f"geotransform needs nonzero pixel sizes, got {self.geotransform!r}")
        self.geotransform = gt

    @property
    def dtype(self) -> str:
        return str(self.pixels.dtype)

    @property
    def shape(self):
        return self.pixels.shape[1:]

    def valid_mask(self) -> np.ndarray:
        """True where a pixel holds data (not NaN and not the nodata sentinel)."""
        px = self.pixels
        mask = ~np.isnan(px) if px.dtype.kind == "f" else np.ones(px.shape, bool)
        if self.nodata is not None and not (isinstance(self.nodata, float) and math.isnan(self.nodata)):
            mask &= px != self.nodata
        return mask


# -- GeoTIFF I/O -------------------------------------------------------------------


def _profile(tile: RasterTile) -> dict:
    from rasterio.transform import Affine

    return {
        "driver": "GTiff",
        "height": tile.shape[0],
        "width": tile.shape[1],
        "count": len(tile.bands),
        "dtype": tile.pixels.dtype.name,
        "crs": tile.crs,
        "transform": Affine.from_gdal(*tile.geotransform),
        "nodata": tile.nodata,
        "interleave": "band",
    }


def tile_to_bytes(tile: RasterTile) -> bytes:
    from rasterio.io import MemoryFile

    with MemoryFile() as mem:
        with mem.open(**_profile(tile)) as ds:
            ds.write(tile.pixels)
            for i, band in enumerate(tile.bands, start=1):
                ds.set_band_description(i, str(band))
            tags = {k.upper(): str(v) for k, v in sorted(tile.meta.items()) if v is not None}
            if tags:
                ds.update_tags(**tags)
        return mem.read()


def write_tile(tile: RasterTile, path) -> bytes:
    data = tile_to_bytes(tile)
    atomic_write_bytes(path, data)
    return data


def _from_dataset(ds) -> RasterTile:
    pixels = ds.read()
    bands = tuple(d or f"B{i + 1}" for i, d in enumerate(ds.descriptions))
    tags = {k.lower(): v for k, v in ds.tags().items() if k in ("SCENE_ID", "CLOUD_PCT", "DATETIME")}
    if "cloud_pct" in tags:
        tags["cloud_pct"] = float(tags["cloud_pct"])
    crs = ds.crs.to_string() if ds.crs else "EPSG:4326"
    return RasterTile(bands, pixels, ds.transform.to_gdal(), crs, ds.nodata, tags)


def read_tile(path) -> RasterTile:
    import rasterio

    try:
        with rasterio.open(path) as ds:
            return _from_dataset(ds)
    except rasterio.errors.RasterioError as exc:
        raise SourceError(f"cannot decode {path}: {exc}") from exc


def tile_from_bytes(data: bytes) -> RasterTile:
    import rasterio
    from rasterio.io import MemoryFile

    try:
        with MemoryFile(data) as mem, mem.open() as ds:
            return _from_dataset(ds)
    except rasterio.errors.RasterioError as exc:
        raise SourceError(f"cannot decode GeoTIFF payload: {exc}") from exc


# -- normalization ---------------------------------------------------------------


@dataclass(frozen=True)
class BandStats:
    mean: dict
    std: dict

    def __post_init__(self):
        if set(self.mean) != set(self.std):
            raise ValidationError("mean and std must cover the same bands")
        for band, s in self.std.items():
            if not (float(s) > 0) or not math.isfinite(float(s)):
                raise ValidationError(f"std for band {band!r} must be > 0, got {s!r}")

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"cannot read band stats: {exc}", path=path) from exc
        return cls({b: float(v["mean"]) for b, v in raw.items()},
                   {b: float(v["std"]) for b, v in raw.items()})

    def to_dict(self) -> dict:
        return {b: {"mean": self.mean[b], "std": self.std[b]} for b in self.mean}

    def _vectors(self, bands):
        missing = [b for b in bands if b not in self.mean]
        if missing:
            raise ConfigurationError(f"band stats lack bands {missing}")
        mean = np.array([self.mean[b] for b in bands], dtype=np.float64)[:, None, None]
        std = np.array([self.std[b] for b in bands], dtype=np.float64)[:, None, None]
        return mean, std


def normalize(tile: RasterTile, stats: BandStats) -> RasterTile:
    """Per-band z-score to float32; nodata pixels become NaN."""
    mean, std = stats._vectors(tile.bands)
    valid = tile.valid_mask()
    out = ((tile.pixels.astype(np.float64) - mean) / std).astype(np.float32)
    out[~valid] = np.nan
    return replace(tile, pixels=out, nodata=float("nan"))


def denormalize(tile: RasterTile, stats: BandStats) -> RasterTile:
    mean, std = stats._vectors(tile.bands)
    return replace(tile, pixels=tile.pixels.astype(np.float64) * std + mean)


class BandNormalizer(BaseEstimator, TransformerMixin):
    """Per-band standardization of raster tiles.

    With ``stats`` given, ``fit`` only checks it; otherwise the per-band mean
    and (population) standard deviation are estimated from the valid pixels
    of the training tiles.
    """

    def __init__(self, stats: Optional[BandStats] = None):
        self.stats = stats

    def fit(self, X, y=None):
        tiles = [X] if isinstance(X, RasterTile) else list(X)
        if self.stats is not None:
            for t in tiles:
                self.stats._vectors(t.bands)
            self.stats_ = self.stats
            return self
        if not tiles:
            raise ValidationError("cannot estimate band stats from zero tiles")
        values: dict = {}
        for t in tiles:
            mask = t.valid_mask()
            for i, b in enumerate(t.bands):
                values.setdefault(b, []).append(t.pixels[i][mask[i]].astype(np.float64))
        mean, std = {}, {}
        for b, chunks in values.items():
            v = np.concatenate(chunks)
            mean[b] = float(v.mean())
            std[b] = float(v.std())
        self.stats_ = BandStats(mean, std)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, RasterTile):
            return normalize(X, self.stats_)
        return [normalize(t, self.stats_) for t in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, RasterTile):
            return denormalize(X, self.stats_)
        return [denormalize(t, self.stats_) for t in X]


# -- tile sources ------------------------------------------------------------------


@dataclass(frozen=True)
class TileRequest:
    sample_id: str
    lat: float
    lon: float
    size_px: tuple = (96, 96)
    date_window: tuple = ("2024-01-01", "2024-12-31")
    max_cloud_pct: float = 20.0

    def __post_init__(self):
        h, w = self.size_px
        if int(h) < 1 or int(w) < 1:
            raise ValidationError(f"size_px must be positive, got {self.size_px}")
        start, end = (date.fromisoformat(str(d)[:10]) for d in self.date_window)
        if end < start:
            raise ValidationError(f"empty date window {self.date_window}")

    def in_window(self, when: Optional[str]) -> bool:
        if not when:
            return True
        day = str(when)[:10]
        return str(self.date_window[0])[:10] <= day <= str(self.date_window[1])[:10]


@dataclass(frozen=True)
class Scene:
    id: str
    cloud_pct: float
    datetime: Optional[str] = None
    assets: dict = field(default_factory=dict, hash=False, compare=False)
    path: Optional[str] = None


class LocalTileSource:
    """Directory-backed tile source that works fully offline.

    Two layouts are recognised and may be mixed:

    * ``<root>/<sample id>.tif``: a pre-cut tile for that sample. Scene
      metadata comes from the ``CLOUD_PCT``/``DATETIME``/``SCENE_ID`` tags
      (missing cloud cover reads as 0).
    * ``<root>/catalog.json``: ``{"scenes": [{"id", "asset", "cloud_pct",
      "datetime", "bbox": [minlon, minlat, maxlon, maxlat]}]}``; scenes are
      matched by bbox containment and date window and cropped on read.
    """

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigurationError(f"tile store {self.root} is not a directory")
        catalog = self.root / "catalog.json"
        self.catalog = []
        if catalog.exists():
            raw = json.loads(catalog.read_text(encoding="utf-8"))
            self.catalog = raw.get("scenes", raw) if isinstance(raw, dict) else raw

    def search(self, request: TileRequest) -> list:
        scenes = []
        direct = self.root / f"{safe_name(request.sample_id)}.tif"
        if direct.exists():
            import rasterio

            with rasterio.open(direct) as ds:
                tags = ds.tags()
            scenes.append(Scene(
                id=tags.get("SCENE_ID", request.sample_id),
                cloud_pct=float(tags.get("CLOUD_PCT", 0.0)),
                datetime=tags.get("DATETIME"),
                path=str(direct),
            ))
        for entry in self.catalog:
            minx, miny, maxx, maxy = entry["bbox"]
            if minx <= request.lon <= maxx and miny <= request.lat <= maxy and request.in_window(entry.get("datetime")):
                scenes.append(Scene(
                    id=str(entry["id"]),
                    cloud_pct=float(entry["cloud_pct"]),
                    datetime=entry.get("datetime"),
                    path=str(self.root / entry["asset"]),
                ))
        return [s for s in scenes if request.in_window(s.datetime)]

    def read(self, scene: Scene) -> RasterTile:
        if not scene.path or not Path(scene.path).exists():
            raise AvailabilityError(f"asset for scene {scene.id!r} is missing")
        return read_tile(scene.path)


class HttpTileSource:
    """Client for a two-endpoint scene catalog.

    ``GET {base}/search?bbox=&datetime=&max_cloud=`` returns a JSON list of
    ``{id, cloud_pct, assets}`` objects (optionally with ``datetime``), and
    ``GET {base}/asset/{id}`` returns the scene as GeoTIFF bytes.
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _get(self, url, params=None):
        import requests

        try:
            resp = requests.get(url, params=params, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientSourceError(f"{url}: {exc}") from exc
        except requests.RequestException as exc:
            raise SourceError(f"{url}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientSourceError(f"{url}: HTTP {resp.status_code}")
        if resp.status_code == 404:
            raise AvailabilityError(f"{url}: not found")
        if resp.status_code >= 400:
            raise SourceError(f"{url}: HTTP {resp.status_code}")
        return resp

    def search(self, request: TileRequest) -> list:
        params = {
            "bbox": f"{request.lon},{request.lat},{request.lon},{request.lat}",
            "datetime": f"{request.date_window[0]}/{request.date_window[1]}",
            "max_cloud": request.max_cloud_pct,
        }
        resp = self._get(f"{self.base_url}/search", params)
        try:
            payload = resp.json()
        except ValueError as exc:
            raise SourceError(f"search returned invalid JSON: {exc}") from exc
        items = payload.get("scenes", payload.get("features", [])) if isinstance(payload, dict) else payload
        try:
            return [Scene(id=str(it["id"]), cloud_pct=float(it["cloud_pct"]),
                          datetime=it.get("datetime"), assets=it.get("assets") or {})
                    for it in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise SourceError(f"malformed scene record: {exc}") from exc

    def read(self, scene: Scene) -> RasterTile:
        resp = self._get(f"{self.base_url}/asset/{scene.id}")
        return tile_from_bytes(resp.content)


def _retry(fn, retries: int, backoff: float):
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransientSourceError:
            if attempt == retries:
                raise
            time.sleep(backoff * 2**attempt)


def crop_centered(tile: RasterTile, lat: float, lon: float, size_px) -> RasterTile:
    """Window of ``size_px`` centered on the point; unchanged if already that size."""
    h, w = (int(v) for v in size_px)
    if tile.shape == (h, w):
        return tile
    x0, a, b, y0, d, e = tile.geotransform
    x, y = from_wgs84(lon, lat, tile.crs)
    inv = np.linalg.inv(np.array([[a, b], [d, e]]))
    col, row = inv @ np.array([float(x) - x0, float(y) - y0])
    r0, c0 = int(math.floor(row)) - h // 2, int(math.floor(col)) - w // 2
    H, W = tile.shape
    if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise AvailabilityError(f"scene does not cover a {h}x{w} window around ({lat}, {lon})")
    gt = (x0 + c0 * a + r0 * b, a, b, y0 + c0 * d + r0 * e, d, e)
    return replace(tile, pixels=tile.pixels[:, r0 : r0 + h, c0 : c0 + w].copy(), geotransform=gt)


def fetch_tile(request: TileRequest, source, retries: int = 3, backoff: float = 0.5) -> RasterTile:
    """Fetch the best acceptable scene for ``request``.

    Scenes above ``max_cloud_pct`` are discarded; among the rest the lowest
    cloud cover wins, then the earliest acquisition, then the scene id.
    """
    scenes = _retry(lambda: source.search(request), retries, backoff)
    if not scenes:
        raise AvailabilityError(f"no scene for sample {request.sample_id!r}")
    ok = [s for s in scenes if s.cloud_pct <= request.max_cloud_pct]
    if not ok:
        lowest = min(s.cloud_pct for s in scenes)
        raise CloudFilterError(
            f"sample {request.sample_id!r}: best scene has {lowest}% cloud, limit {request.max_cloud_pct}%"
        )
    best = min(ok, key=lambda s: (s.cloud_pct, s.datetime or "9999", s.id))
    tile = _retry(lambda: source.read(best), retries, backoff)
    tile = crop_centered(tile, request.lat, request.lon, request.size_px)
    meta = dict(tile.meta, scene_id=best.id, cloud_pct=best.cloud_pct, datetime=best.datetime)
    return replace(tile, meta=meta)


# -- manifest ingestion ------------------------------------------------------------


def safe_name(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", sample_id)


STATUSES = ("succeeded", "skipped", "cloud_rejected", "unavailable", "failed")


@dataclass
class IngestReport:
    counts: dict
    outcomes: list
    manifest: Optional[DatasetManifest] = None

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "counts": {k: self.counts[k] for k in STATUSES},
            "problems": [
                {"id": sid, "status": status, "message": msg}
                for sid, status, msg in self.outcomes
                if status not in ("succeeded", "skipped")
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _already_done(tif: Path):
    side = _sidecar(tif)
    if not (tif.exists() and side.exists()):
        return None
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if meta.get("sha256") != sha256_file(tif):
        return None
    return meta


def _updated_sample(sample, tif: Path, meta: dict):
    when = meta.get("datetime")
    return replace(
        sample,
        tile_uri=str(tif),
        acquisition_date=str(when)[:10] if when else sample.acquisition_date,
        cloud_cover_pct=meta.get("cloud_pct", sample.cloud_cover_pct),
    )


def ingest_manifest(
    manifest: DatasetManifest,
    source,
    stats: Optional[BandStats],
    out_dir,
    parallelism: int = 1,
    size_px=(96, 96),
    date_window=("2024-01-01", "2024-12-31"),
    max_cloud_pct: float = 20.0,
    retries: int = 3,
    backoff: float = 0.5,
) -> IngestReport:
    """Fetch, optionally normalize, and store one GeoTIFF per sample.

    Per-sample failures are recorded, never raised. Samples whose output file
    exists and matches the checksum in its ``<id>.json`` sidecar are skipped,
    so reruns are idempotent. Results are reduced in manifest order, so the
    report and the updated manifest do not depend on ``parallelism``.
    """
    if int(parallelism) < 1:
        raise ConfigurationError("parallelism must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PersistenceError(f"output directory is not writable: {exc}", path=out) from exc

    def work(sample):
        tif = out / f"{safe_name(sample.id)}.tif"
        done = _already_done(tif)
        if done is not None:
            return "skipped", _updated_sample(sample, tif, done), ""
        request = TileRequest(sample.id, sample.lat, sample.lon, tuple(size_px), tuple(date_window), max_cloud_pct)
        try:
            tile = fetch_tile(request, source, retries=retries, backoff=backoff)
            if stats is not None:
                tile = normalize(tile, stats)
            write_tile(tile, tif)
            meta = {
                "id": sample.id,
                "sha256": sha256_file(tif),
                "scene_id": tile.meta.get("scene_id"),
                "cloud_pct": tile.meta.get("cloud_pct"),
                "datetime": tile.meta.get("datetime"),
                "normalized": stats is not None,
            }
            atomic_write_text(_sidecar(tif), json.dumps(meta, indent=2) + "\n")
            return "succeeded", _updated_sample(sample, tif, meta), ""
        except CloudFilterError as exc:
            return "cloud_rejected", None, str(exc)
        except (AvailabilityError, TransientSourceError) as exc:
            # a source that stays unreachable after retries has no tile to give
            return "unavailable", None, str(exc)
        except PersistenceError:
            raise
        except Exception as exc:  # per-sample failures are data, not process failure
            logger.warning("sample %s failed: %s", sample.id, exc)
            return "failed", None, f"{type(exc).__name__}: {exc}"

    samples = list(manifest.samples)
    if int(parallelism) == 1:
        results = [work(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=int(parallelism)) as pool:
            results = list(pool.map(work, samples))

    counts = dict.fromkeys(STATUSES, 0)
    outcomes, kept = [], []
    for sample, (status, updated, msg) in zip(samples, results):
        counts[status] += 1
        outcomes.append((sample.id, status, msg))
        if updated is not None:
            kept.append(updated)
    return IngestReport(counts, outcomes, manifest.with_samples(kept))
