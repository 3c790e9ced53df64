"""Synthetic world used across the suite: six box continents, a striped biome
map, a gridded landcover map and an offline scene store."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

from geodiverse.ingest import RasterTile, write_tile
from geodiverse.overlay import RasterRegionMap, VectorRegionMap, rectangle
from geodiverse.sampler import RegionSet

CONTINENT_BOXES = {
    "Asia": (60.0, 20.0, 100.0, 50.0),
    "Africa": (0.0, -20.0, 30.0, 10.0),
    "Europe": (0.0, 40.0, 30.0, 60.0),
    "North-America": (-110.0, 30.0, -80.0, 50.0),
    "South-America": (-70.0, -40.0, -50.0, 0.0),
    "Oceania": (120.0, -40.0, 150.0, -20.0),
}
BANDS = ("B2", "B3", "B4", "B8")
SCENE_MARGIN = 4.0
SCENE_RES = 0.5


def write_geojson(path, features):
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": props, "geometry": geom.__geo_interface__}
            for props, geom in features
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
    return Path(path)


def continents_geojson(path):
    return write_geojson(path, [({"group": g}, rectangle(*b)) for g, b in CONTINENT_BOXES.items()])


def biome_map():
    """Ten-degree meridional stripes cycling through five biome classes."""
    entries = [(f"biome-{(k // 10) % 5}", rectangle(k, -60, k + 10, 70)) for k in range(-180, 180, 10)]
    return VectorRegionMap(entries)


def landcover_map(seed=7, res=0.25):
    rng = np.random.default_rng(seed)
    h, w = int(130 / res), int(360 / res)
    grid = rng.integers(0, 4, size=(h, w), dtype=np.uint8)
    grid[: int(5 / res)] = 255  # nodata strip near the top edge
    legend = {0: "water", 1: "trees", 2: "crops", 3: "built"}
    return RasterRegionMap(grid, (-180.0, res, 0.0, 70.0, 0.0, -res), legend, nodata=255)


def make_scene(lon0, lat0, lon1, lat1, seed, res=SCENE_RES, bands=BANDS):
    rng = np.random.default_rng(seed)
    w, h = int(round((lon1 - lon0) / res)), int(round((lat1 - lat0) / res))
    base = rng.integers(200, 4000, size=(len(bands), 1, 1))
    pixels = (base + rng.integers(0, 1500, size=(len(bands), h, w))).astype(np.uint16)
    return RasterTile(bands, pixels, (lon0, res, 0.0, lat1, 0.0, -res), "EPSG:4326", nodata=0)


def build_scene_store(root, boxes=CONTINENT_BOXES, cloud=5.0):
    """One scene per box, padded so an 8x8 crop around any interior point fits."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i, (g, (x0, y0, x1, y1)) in enumerate(boxes.items()):
        m = SCENE_MARGIN
        tile = make_scene(x0 - m, y0 - m, x1 + m, y1 + m, seed=100 + i)
        asset = f"scene-{i}.tif"
        write_tile(tile, root / asset)
        scenes.append({"id": f"S{i}-{g}", "asset": asset, "cloud_pct": cloud,
                       "datetime": "2024-06-01T10:00:00Z", "bbox": [x0, y0, x1, y1]})
    (root / "catalog.json").write_text(json.dumps({"scenes": scenes}, indent=1), encoding="utf-8")
    return root


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    cont = continents_geojson(root / "continents.geojson")
    biomes = biome_map()
    write_geojson(root / "biomes.geojson", [({"class": c}, g) for c, g in biomes.entries])
    lc = landcover_map()
    from rasterio.transform import Affine
    import rasterio

    with rasterio.open(root / "landcover.tif", "w", driver="GTiff", height=lc.grid.shape[0],
                       width=lc.grid.shape[1], count=1, dtype="uint8", crs="EPSG:4326",
                       transform=Affine.from_gdal(*lc.geotransform), nodata=255) as ds:
        ds.write(lc.grid, 1)
    (root / "landcover.json").write_text(json.dumps({"legend": {str(k): v for k, v in lc.legend.items()}}))
    store = build_scene_store(root / "store")
    return {
        "root": root,
        "continents_path": cont,
        "regions": RegionSet.from_geojson(cont),
        "biomes": biomes,
        "biomes_path": root / "biomes.geojson",
        "landcover": lc,
        "landcover_path": root / "landcover.tif",
        "store": store,
    }


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
