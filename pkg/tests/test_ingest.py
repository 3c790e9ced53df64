import http.server
import json
import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geodiverse.errors import (
    AvailabilityError,
    CloudFilterError,
    ConfigurationError,
    PersistenceError,
    ValidationError,
)
from geodiverse.ingest import (
    BandNormalizer,
    BandStats,
    HttpTileSource,
    LocalTileSource,
    RasterTile,
    TileRequest,
    denormalize,
    fetch_tile,
    ingest_manifest,
    normalize,
    read_tile,
    tile_to_bytes,
    write_tile,
)
from geodiverse.manifest import AllocationVector, DatasetManifest, GeoSample
from geodiverse.sampler import sample_points

from conftest import BANDS, CONTINENT_BOXES, build_scene_store, make_scene

SMALL = (8, 8)


def _tile(values, bands=("B2",)):
    px = np.asarray(values, dtype=np.uint16).reshape(len(bands), 1, -1)
    return RasterTile(bands, px, (0.0, 0.01, 0.0, 0.0, 0.0, -0.01))


def test_geotiff_roundtrip_and_stable_bytes(tmp_path):
    tile = make_scene(10, 40, 12, 41, seed=1)
    tile.meta.update(scene_id="S", cloud_pct=3.5, datetime="2024-05-01")
    write_tile(tile, tmp_path / "a.tif")
    back = read_tile(tmp_path / "a.tif")
    assert back.bands == tile.bands and back.dtype == "uint16"
    assert np.array_equal(back.pixels, tile.pixels)
    assert back.geotransform == pytest.approx(tile.geotransform)
    assert back.meta["scene_id"] == "S"
    assert tile_to_bytes(back) == tile_to_bytes(tile)


def test_normalize_examples():
    stats = BandStats({"B2": 1000.0}, {"B2": 200.0})
    out = normalize(_tile([800, 1000, 1200]), stats)
    assert out.dtype == "float32"
    assert out.pixels.ravel().tolist() == [-1.0, 0.0, 1.0]
    ident = normalize(_tile([3, 7]), BandStats({"B2": 0.0}, {"B2": 1.0}))
    assert ident.pixels.ravel().tolist() == [3.0, 7.0]


def test_normalize_errors_and_nodata():
    with pytest.raises(ConfigurationError):
        normalize(_tile([1, 2]), BandStats({"B3": 0.0}, {"B3": 1.0}))
    with pytest.raises(ValidationError):
        BandStats({"B2": 0.0}, {"B2": 0.0})
    t = _tile([0, 5, 10])
    t.nodata = 0
    out = normalize(t, BandStats({"B2": 5.0}, {"B2": 5.0}))
    assert np.isnan(out.pixels.ravel()[0]) and out.pixels.ravel()[1:].tolist() == [0.0, 1.0]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 65535), min_size=1, max_size=64),
       st.floats(0, 10000), st.floats(0.5, 5000))
def test_normalization_inverts_within_float32_ulp(values, mean, std):
    stats = BandStats({"B2": mean}, {"B2": std})
    tile = _tile(values)
    z = normalize(tile, stats).pixels.astype(np.float64)
    back = denormalize(normalize(tile, stats), stats).pixels
    err = np.abs(back - tile.pixels.astype(np.float64))
    bound = std * np.maximum(1.0, np.abs(z)) * 2.0**-23
    assert np.all(err <= bound)


def test_band_normalizer_estimator():
    tiles = [make_scene(0, 0, 2, 2, seed=s) for s in range(3)]
    est = BandNormalizer().fit(tiles)
    out = est.transform(tiles)
    stacked = np.concatenate([t.pixels.reshape(len(BANDS), -1) for t in out], axis=1)
    assert np.allclose(stacked.mean(axis=1), 0, atol=1e-5)
    assert np.allclose(stacked.std(axis=1), 1, atol=1e-5)
    back = est.inverse_transform(out)
    assert np.allclose(back[0].pixels, tiles[0].pixels, atol=1e-2)
    assert BandNormalizer(**est.get_params()).get_params() == est.get_params()


def _catalog(root, scenes):
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cloud, when) in enumerate(scenes):
        write_tile(make_scene(0, 0, 10, 10, seed=i), root / f"s{i}.tif")
        entries.append({"id": f"s{i}", "asset": f"s{i}.tif", "cloud_pct": cloud, "datetime": when,
                        "bbox": [0, 0, 10, 10]})
    (root / "catalog.json").write_text(json.dumps({"scenes": entries}))
    return LocalTileSource(root)


def test_cloud_filter(tmp_path):
    src = _catalog(tmp_path / "c", [(25.0, "2024-03-01")])
    with pytest.raises(CloudFilterError):
        fetch_tile(TileRequest("p", 5.0, 5.0, SMALL, max_cloud_pct=20), src)


def test_lowest_cloud_then_earliest(tmp_path):
    src = _catalog(tmp_path / "c", [(15.0, "2024-01-01"), (5.0, "2024-09-01"), (5.0, "2024-02-01")])
    tile = fetch_tile(TileRequest("p", 5.0, 5.0, SMALL), src)
    assert tile.meta["scene_id"] == "s2" and tile.shape == SMALL


def test_no_scene_is_unavailable(tmp_path):
    src = _catalog(tmp_path / "c", [(5.0, "2023-01-01")])
    with pytest.raises(AvailabilityError):
        fetch_tile(TileRequest("p", 5.0, 5.0, SMALL), src)


def test_precut_passthrough(tmp_path):
    tile = make_scene(0, 0, 48, 48, seed=3)
    assert tile.shape == (96, 96)
    (tmp_path / "s").mkdir()
    write_tile(tile, tmp_path / "s" / "pt-1.tif")
    got = fetch_tile(TileRequest("pt-1", 1.0, 1.0), LocalTileSource(tmp_path / "s"))
    assert np.array_equal(got.pixels, tile.pixels)


def test_crop_is_centered(tmp_path):
    src = _catalog(tmp_path / "c", [(1.0, "2024-01-01")])
    tile = fetch_tile(TileRequest("p", 5.2, 3.3, SMALL), src)
    x0, a, _, y0, _, e = tile.geotransform
    cx, cy = x0 + a * SMALL[1] / 2, y0 + e * SMALL[0] / 2
    assert abs(cx - 3.3) <= abs(a) and abs(cy - 5.2) <= abs(e)


class _Handler(http.server.BaseHTTPRequestHandler):
    scenes: list = []
    assets: dict = {}
    fail_first: dict = {}

    def log_message(self, *args):
        pass

    def _send(self, code, body=b"", ctype="application/json"):
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        key = self.path.split("?")[0]
        if self.fail_first.get(key, 0) > 0:
            self.fail_first[key] -= 1
            return self._send(503)
        if key == "/search":
            return self._send(200, json.dumps(self.scenes).encode())
        if key.startswith("/asset/"):
            sid = key.rsplit("/", 1)[1]
            if sid in self.assets:
                return self._send(200, self.assets[sid], "image/tiff")
        self._send(404)


@pytest.fixture()
def http_catalog():
    tile = make_scene(0, 0, 10, 10, seed=9)
    _Handler.scenes = [{"id": "remote-1", "cloud_pct": 4.0, "datetime": "2024-04-04", "assets": {}}]
    _Handler.assets = {"remote-1": tile_to_bytes(tile)}
    _Handler.fail_first = {"/search": 2}
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_http_source_retries_transient(http_catalog):
    src = HttpTileSource(http_catalog, timeout=5)
    tile = fetch_tile(TileRequest("p", 5.0, 5.0, SMALL), src, retries=3, backoff=0.01)
    assert tile.meta["scene_id"] == "remote-1" and tile.shape == SMALL


def test_dead_endpoint_counts_unavailable(tmp_path):
    alpha = AllocationVector.uniform(("g",))
    m = DatasetManifest("d", ("g",), alpha, tuple(GeoSample(f"p{i}", 1.0, 1.0, "g") for i in range(3)))
    report = ingest_manifest(m, HttpTileSource("http://127.0.0.1:9", timeout=1), None, tmp_path / "o",
                             retries=1, backoff=0.01)
    assert report.counts["unavailable"] == 3


def _manifest(world, n=24, seed=0):
    return sample_points(world["regions"], AllocationVector.uniform(tuple(CONTINENT_BOXES)), n, seed=seed)


def _dir_bytes(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_ingest_idempotent_and_parallel_invariant(world, tmp_path):
    m = _manifest(world)
    stats = BandStats({b: 1500.0 for b in BANDS}, {b: 400.0 for b in BANDS})
    src = LocalTileSource(world["store"])
    r1 = ingest_manifest(m, src, stats, tmp_path / "p1", parallelism=1, size_px=SMALL)
    r8 = ingest_manifest(m, src, stats, tmp_path / "p8", parallelism=8, size_px=SMALL)
    assert r1.counts["succeeded"] == len(m) and r1.counts == r8.counts
    assert _dir_bytes(tmp_path / "p1").keys() == _dir_bytes(tmp_path / "p8").keys()
    for name in _dir_bytes(tmp_path / "p1"):
        if name.endswith(".tif"):
            assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p8" / name).read_bytes()
    before = _dir_bytes(tmp_path / "p1")
    again = ingest_manifest(m, src, stats, tmp_path / "p1", parallelism=4, size_px=SMALL)
    assert again.counts["skipped"] == len(m)
    assert _dir_bytes(tmp_path / "p1") == before
    assert all(s.tile_uri and s.acquisition_date == "2024-06-01" for s in again.manifest.samples)
    assert read_tile(r1.manifest.samples[0].tile_uri).dtype == "float32"


def test_corrupted_output_is_redone(world, tmp_path):
    m = _manifest(world, n=6)
    src = LocalTileSource(world["store"])
    ingest_manifest(m, src, None, tmp_path / "o", size_px=SMALL)
    victim = Path(m.samples[0].id + ".tif")
    (tmp_path / "o" / victim).write_bytes(b"garbage")
    r = ingest_manifest(m, src, None, tmp_path / "o", size_px=SMALL)
    assert r.counts["succeeded"] == 1 and r.counts["skipped"] == 5


def test_mixed_outcomes_conserve(world, tmp_path):
    store = build_scene_store(tmp_path / "store", {"Europe": CONTINENT_BOXES["Europe"]}, cloud=30.0)
    src = LocalTileSource(store)
    m = _manifest(world, n=12)
    r = ingest_manifest(m, src, None, tmp_path / "o", size_px=SMALL)
    assert r.total == len(m) == sum(r.counts.values())
    assert r.counts["cloud_rejected"] == 2 and r.counts["unavailable"] == 10
    assert len(r.manifest) == 0


def test_empty_manifest(tmp_path):
    m = DatasetManifest("e", ("g",), AllocationVector.uniform(("g",)))
    r = ingest_manifest(m, LocalTileSource(tmp_path), None, tmp_path / "o")
    assert r.total == 0 and not any(p for p in (tmp_path / "o").iterdir())


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    m = DatasetManifest("e", ("g",), AllocationVector.uniform(("g",)))
    with pytest.raises(PersistenceError):
        ingest_manifest(m, LocalTileSource(tmp_path), None, blocker / "sub")
