"""Map image footprints onto categorical class maps.

Areas in geographic coordinates are measured on a sphere of the authalic
radius with the spherical-excess formula (great-circle edges); projected maps
use planar area in map units. Entropies downstream only use area ratios, so
the convention cancels out as long as it is applied consistently.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon, box, shape
from shapely.geometry.polygon import orient
from shapely.ops import transform as shp_transform, unary_union

from .errors import ConfigurationError, NoOverlapError, PersistenceError, ValidationError

AUTHALIC_RADIUS_M = 6371007.2
WGS84 = "EPSG:4326"


# -- CRS helpers ---------------------------------------------------------------


@lru_cache(maxsize=64)
def _crs(crs):
    from pyproj import CRS
    from pyproj.exceptions import CRSError

    try:
        return CRS.from_user_input(crs)
    except CRSError as exc:
        raise ConfigurationError(f"unknown CRS {crs!r}: {exc}") from None


def is_geographic(crs) -> bool:
    return bool(_crs(crs).is_geographic)


@lru_cache(maxsize=64)
def _transformer(src, dst):
    from pyproj import Transformer

    return Transformer.from_crs(_crs(src), _crs(dst), always_xy=True)


def to_wgs84(x, y, crs):
    """Transform map coordinates to ``(lon, lat)``; a no-op for geographic CRSs."""
    if is_geographic(crs):
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return _transformer(crs, WGS84).transform(x, y)


def from_wgs84(lon, lat, crs):
    if is_geographic(crs):
        return np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
    return _transformer(WGS84, crs).transform(lon, lat)


# -- spherical measures ------------------------------------------------------


def ring_area(lon, lat, radius: float = AUTHALIC_RADIUS_M) -> float:
    """Signed area of a lon/lat ring (degrees), positive when counterclockwise.

    Edges are straight in the lon/lat plane, the same convention the raster
    grids and the sampler use, and the result is the exact area on the sphere
    of the region they bound: ``R^2 * closed-integral of -sin(lat) d(lon)``.
    Along an edge with linear latitude that integral has the closed form
    ``-dlon * sin(mid) * sinc(half)``, which is the spherical excess of the
    ring densified without limit.
    """
    lam = np.radians(np.asarray(lon, dtype=float))
    phi = np.radians(np.asarray(lat, dtype=float))
    if lam.size < 3:
        return 0.0
    if lam[0] != lam[-1] or phi[0] != phi[-1]:
        lam = np.append(lam, lam[0])
        phi = np.append(phi, phi[0])
    dlam = np.diff(lam)
    mid = (phi[:-1] + phi[1:]) / 2.0
    half = (phi[1:] - phi[:-1]) / 2.0
    terms = -dlam * np.sin(mid) * np.sinc(half / np.pi)
    return math.fsum(terms.tolist()) * radius * radius


def _polygons(geom):
    if geom is None or geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        return [geom]
    if isinstance(geom, MultiPolygon):
        return list(geom.geoms)
    if hasattr(geom, "geoms"):
        return [p for g in geom.geoms for p in _polygons(g)]
    return []


def spherical_area(geom, radius: float = AUTHALIC_RADIUS_M) -> float:
    """Area in square meters of a lon/lat (multi)polygon, holes subtracted."""
    total = []
    for poly in _polygons(geom):
        x, y = poly.exterior.xy
        total.append(abs(ring_area(x, y, radius)))
        for hole in poly.interiors:
            hx, hy = hole.xy
            total.append(-abs(ring_area(hx, hy, radius)))
    return math.fsum(total)


def great_circle_distance(lat1, lon1, lat2, lon2, radius: float = AUTHALIC_RADIUS_M):
    """Haversine distance in meters; broadcasts over numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


# -- point in polygon (independent of shapely predicates) -------------------------

_OUTSIDE, _INSIDE, _BOUNDARY = 0, 1, 2


def _ring_locate(px: float, py: float, coords: np.ndarray) -> int:
    xs, ys = coords[:, 0], coords[:, 1]
    if xs[0] != xs[-1] or ys[0] != ys[-1]:
        xs = np.append(xs, xs[0])
        ys = np.append(ys, ys[0])
    x1, y1, x2, y2 = xs[:-1], ys[:-1], xs[1:], ys[1:]
    dx, dy = x2 - x1, y2 - y1
    scale = max(1.0, float(np.max(np.abs(coords))))
    tol = 1e-12 * scale
    cross = dx * (py - y1) - (px - x1) * dy
    on_line = np.abs(cross) <= tol * (np.abs(dx) + np.abs(dy) + tol)
    in_box = (
        (px >= np.minimum(x1, x2) - tol)
        & (px <= np.maximum(x1, x2) + tol)
        & (py >= np.minimum(y1, y2) - tol)
        & (py <= np.maximum(y1, y2) + tol)
    )
    if np.any(on_line & in_box):
        return _BOUNDARY
    straddle = (y1 > py) != (y2 > py)
    if not np.any(straddle):
        return _OUTSIDE
    xa, ya, xb, yb = x1[straddle], y1[straddle], x2[straddle], y2[straddle]
    x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
    return _INSIDE if np.count_nonzero(px < x_cross) % 2 else _OUTSIDE


def point_in_polygon(x: float, y: float, polygon) -> bool:
    """Boundary-inclusive containment test by ray crossing over every ring.

    Works on the raw vertex arrays, so it serves as an independent check on
    the shapely predicates used elsewhere.
    """
    for poly in _polygons(polygon):
        minx, miny, maxx, maxy = poly.bounds
        if not (minx <= x <= maxx and miny <= y <= maxy):
            continue
        where = _ring_locate(x, y, np.asarray(poly.exterior.coords))
        if where == _OUTSIDE:
            continue
        if where == _BOUNDARY:
            return True
        if all(_ring_locate(x, y, np.asarray(h.coords)) != _INSIDE for h in poly.interiors):
            return True
    return False


# -- region maps -------------------------------------------------------------------


def _clean(geom):
    geom = shapely.make_valid(geom)
    polys = _polygons(geom)
    if not polys:
        raise ValidationError("geometry has no polygonal part")
    return unary_union(polys)


class VectorRegionMap:
    """Ordered ``(class id, polygon set)`` entries in one CRS.

    Where entries overlap, the earlier entry wins, both for point lookups and
    for area accounting.
    """

    def __init__(self, entries: Sequence, crs=WGS84, class_names: Optional[dict] = None):
        if not entries:
            raise ValidationError("region map has no entries")
        _crs(crs)
        self.crs = crs
        self.entries = [(cid, _clean(geom)) for cid, geom in entries]
        self.classes = tuple(dict.fromkeys(cid for cid, _ in self.entries))
        self.class_names = dict(class_names or {c: str(c) for c in self.classes})
        merged = {c: unary_union([g for cid, g in self.entries if cid == c]) for c in self.classes}
        self._exclusive = {}
        claimed = None
        for c in self.classes:
            geom = merged[c] if claimed is None else merged[c].difference(claimed)
            self._exclusive[c] = geom
            claimed = merged[c] if claimed is None else claimed.union(merged[c])
        self._union = claimed

    @classmethod
    def from_geojson(cls, path, prop: str = "class", crs=WGS84):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"cannot load GeoJSON: {exc}", path=path) from exc
        entries = []
        for feat in data.get("features", []):
            props = feat.get("properties") or {}
            key = props.get(prop, props.get("group", props.get("class")))
            if key is None:
                raise ValidationError(f"{path}: feature without a {prop!r} property")
            entries.append((key, shape(feat["geometry"])))
        return cls(entries, crs=crs)

    def geometry(self, class_id):
        return self._exclusive[class_id]

    def overlaps(self) -> list:
        """Pairs of classes whose polygons share positive area."""
        out = []
        geoms = [(c, unary_union([g for cid, g in self.entries if cid == c])) for c in self.classes]
        for i, (ci, gi) in enumerate(geoms):
            for cj, gj in geoms[i + 1 :]:
                if gi.intersection(gj).area > 0:
                    out.append((ci, cj))
        return out

    def bounds(self):
        return self._union.bounds


class RasterRegionMap:
    """Categorical grid with a GDAL-ordered geotransform and a value legend."""

    def __init__(self, grid, geotransform, legend: dict, crs=WGS84, nodata=None,
                 class_names: Optional[dict] = None):
        grid = np.asarray(grid)
        if grid.ndim != 2:
            raise ValidationError("categorical grid must be 2-D")
        gt = tuple(float(v) for v in geotransform)
        if len(gt) != 6 or gt[1] == 0 or gt[5] == 0:
            raise ValidationError(f"invalid geotransform {geotransform!r}")
        _crs(crs)
        legend = {int(k): v for k, v in legend.items()}
        values = set(np.unique(grid).tolist())
        if nodata is not None:
            values.discard(nodata)
        uncovered = values - set(legend)
        if uncovered:
            raise ValidationError(f"legend misses grid values {sorted(uncovered)}")
        self.grid = grid
        self.geotransform = gt
        self.legend = legend
        self.crs = crs
        self.nodata = nodata
        self.classes = tuple(dict.fromkeys(legend.values()))
        self.class_names = dict(class_names or {c: str(c) for c in self.classes})

    @classmethod
    def from_geotiff(cls, path, legend_path=None):
        import rasterio

        path = Path(path)
        legend_path = Path(legend_path) if legend_path else path.with_suffix(".json")
        try:
            with rasterio.open(path) as ds:
                grid = ds.read(1)
                gt = ds.transform.to_gdal()
                crs = ds.crs.to_string() if ds.crs else WGS84
                nodata = ds.nodata
            raw = json.loads(legend_path.read_text(encoding="utf-8"))
        except (OSError, rasterio.errors.RasterioError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"cannot load raster map: {exc}", path=path) from exc
        legend = raw.get("legend", raw)
        return cls(grid, gt, legend, crs=crs, nodata=None if nodata is None else int(nodata),
                   class_names=raw.get("class_names"))

    def _pixel_areas(self, rows, cols):
        x0, a, b, y0, d, e = self.geotransform
        if not is_geographic(self.crs):
            return np.full(rows.shape, abs(a * e - b * d))
        r2 = AUTHALIC_RADIUS_M**2
        if b == 0 and d == 0:
            top = np.radians(y0 + rows * e)
            bot = np.radians(y0 + (rows + 1) * e)
            return r2 * math.radians(abs(a)) * np.abs(np.sin(top) - np.sin(bot))
        lat_c = y0 + (cols + 0.5) * d + (rows + 0.5) * e
        return r2 * np.cos(np.radians(lat_c)) * abs(a * e - b * d) * (math.pi / 180) ** 2

    def class_areas(self, footprint_map_crs) -> np.ndarray:
        """Per-class weighted pixel area for pixels whose centers fall in the footprint."""
        x0, a, b, y0, d, e = self.geotransform
        h, w = self.grid.shape
        inv = np.linalg.inv(np.array([[a, b], [d, e]]))
        minx, miny, maxx, maxy = footprint_map_crs.bounds
        corners = np.array([[minx, miny], [minx, maxy], [maxx, miny], [maxx, maxy]]) - [x0, y0]
        cr = corners @ inv.T
        c_lo = max(int(math.floor(cr[:, 0].min())) - 1, 0)
        c_hi = min(int(math.ceil(cr[:, 0].max())) + 1, w)
        r_lo = max(int(math.floor(cr[:, 1].min())) - 1, 0)
        r_hi = min(int(math.ceil(cr[:, 1].max())) + 1, h)
        out = np.zeros(len(self.classes))
        if c_lo >= c_hi or r_lo >= r_hi:
            return out
        rows, cols = np.mgrid[r_lo:r_hi, c_lo:c_hi]
        rows, cols = rows.ravel(), cols.ravel()
        xc = x0 + (cols + 0.5) * a + (rows + 0.5) * b
        yc = y0 + (cols + 0.5) * d + (rows + 0.5) * e
        inside = shapely.contains_xy(footprint_map_crs, xc, yc)
        rows, cols = rows[inside], cols[inside]
        values = self.grid[rows, cols]
        valid = np.ones(values.shape, bool) if self.nodata is None else values != self.nodata
        rows, cols, values = rows[valid], cols[valid], values[valid]
        weights = self._pixel_areas(rows, cols)
        index = {c: i for i, c in enumerate(self.classes)}
        for value, cid in self.legend.items():
            sel = values == value
            if np.any(sel):
                out[index[cid]] += math.fsum(weights[sel].tolist())
        return out


# -- area vectors ------------------------------------------------------------------


@dataclass(frozen=True)
class AreaVector:
    classes: tuple
    areas: tuple
    total_area: float

    def __post_init__(self):
        areas = tuple(float(v) for v in self.areas)
        if len(areas) != len(self.classes):
            raise ValidationError("areas and classes differ in length")
        if any(not (v >= 0) for v in areas):
            raise ValidationError("areas must be >= 0")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "areas", areas)

    @classmethod
    def from_areas(cls, classes, areas):
        areas = [float(v) for v in areas]
        return cls(tuple(classes), tuple(areas), math.fsum(areas))

    def as_dict(self) -> dict:
        return dict(zip(self.classes, self.areas))

    def __add__(self, other: "AreaVector") -> "AreaVector":
        if self.classes != other.classes:
            raise ValidationError("cannot add area vectors over different classes")
        return AreaVector.from_areas(self.classes, np.add(self.areas, other.areas))


def footprint(tile) -> Polygon:
    """Counterclockwise WGS84 quadrilateral spanned by the tile's pixel-grid corners."""
    x0, a, b, y0, d, e = (float(v) for v in tile.geotransform)
    if a == 0 or e == 0:
        raise ValidationError("geotransform has a zero pixel size")
    height, width = np.shape(tile.pixels)[-2:]
    px = np.array([0, 0, width, width], dtype=float)
    py = np.array([0, height, height, 0], dtype=float)
    xs = x0 + px * a + py * b
    ys = y0 + px * d + py * e
    lon, lat = to_wgs84(xs, ys, tile.crs)
    return orient(Polygon(zip(np.asarray(lon).tolist(), np.asarray(lat).tolist())), sign=1.0)


def _footprint_in(fp, crs):
    if is_geographic(crs):
        return fp
    tr = _transformer(WGS84, crs)
    return shp_transform(lambda x, y, z=None: tr.transform(x, y), fp)


def area_vector(tile_footprint, region_map) -> AreaVector:
    """Per-class area of ``tile_footprint`` (WGS84 polygon) under ``region_map``."""
    fp = _clean(tile_footprint)
    if isinstance(region_map, RasterRegionMap):
        areas = region_map.class_areas(_footprint_in(fp, region_map.crs))
    else:
        local = _footprint_in(fp, region_map.crs)
        geographic = is_geographic(region_map.crs)
        areas = []
        for c in region_map.classes:
            inter = local.intersection(region_map.geometry(c))
            areas.append(spherical_area(inter) if geographic else inter.area)
    vec = AreaVector.from_areas(region_map.classes, areas)
    if vec.total_area <= 0:
        raise NoOverlapError("footprint does not overlap any class of the map")
    return vec


def point_group(lat: float, lon: float, region_map: VectorRegionMap):
    """Class of the first map entry containing the point (borders count as inside)."""
    if not isinstance(region_map, VectorRegionMap):
        raise ConfigurationError("point_group needs a vector region map")
    x, y = from_wgs84(lon, lat, region_map.crs)
    x, y = float(x), float(y)
    for cid, geom in region_map.entries:
        if point_in_polygon(x, y, geom):
            return cid
    raise NoOverlapError(f"point ({lat}, {lon}) lies outside every class")


def rectangle(lon0, lat0, lon1, lat1) -> Polygon:
    """Counterclockwise lon/lat box; convenience for fixtures and configs."""
    return orient(box(min(lon0, lon1), min(lat0, lat1), max(lon0, lon1), max(lat0, lat1)), 1.0)
