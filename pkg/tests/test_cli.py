import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from geodiverse.cli import main
from geodiverse.diversity import DiversityReport
from geodiverse.ingest import RasterTile, write_tile
from geodiverse.manifest import read_manifest

from conftest import CONTINENT_BOXES


def write_config(world, path, **extra):
    keys = {
        "continents": world["continents_path"],
        "biomes": world["biomes_path"],
        "landcover": world["landcover_path"],
        "tile_source": world["store"],
        "size_px": "8,8",
        "retries": "0",
        "seed": "0",
        "output_dir": path.parent / "out",
    }
    keys.update(extra)
    path.write_text("[geodiverse]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items()))
    return path


@pytest.fixture()
def cfg(world, tmp_path):
    return write_config(world, tmp_path / "geodiverse.ini")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_and_unknown_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        main(["sample", "--bogus"])
    assert e.value.code == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "geodiverse.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sample" in proc.stdout


def test_sample_global(cfg, tmp_path, capsys):
    out_path = tmp_path / "g.jsonl"
    code, out, err = run(capsys, "--config", cfg, "sample", "--alpha", "global", "--n", 6000, "--out", out_path)
    assert code == 0
    assert json.loads(out)["counts"] == {g: 1000 for g in CONTINENT_BOXES}
    assert read_manifest(out_path).group_counts() == {g: 1000 for g in CONTINENT_BOXES}


def test_sample_one_hot_full_scale(cfg, tmp_path, capsys):
    code, out, _ = run(capsys, "--config", cfg, "sample", "--alpha", "one-hot:Europe", "--n", 700000,
                       "--out", tmp_path / "eu.jsonl")
    assert code == 0
    counts = json.loads(out)["counts"]
    assert counts["Europe"] == 700000 and sum(counts.values()) == 700000


def test_sample_simplex_violation_exit_2(cfg, capsys):
    code, out, err = run(capsys, "--config", cfg, "sample", "--alpha", "Asia=0.5,Africa=0.6", "--n", 10)
    assert code == 2 and out == "" and "level=ERROR" in err


def test_sample_saturation_exit_3(world, tmp_path, capsys):
    tiny = tmp_path / "tiny.geojson"
    tiny.write_text(json.dumps({"type": "FeatureCollection", "features": [{
        "type": "Feature", "properties": {"group": "dot"},
        "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [0.2, 0], [0.2, 0.2], [0, 0.2], [0, 0]]]}}]}))
    cfg = write_config(world, tmp_path / "c.ini", continents=tiny)
    code, _, err = run(capsys, "--config", cfg, "sample", "--alpha", "global", "--n", 40, "--min-sep", 20000,
                       "--out", tmp_path / "x.jsonl")
    assert code == 3 and "achieved" in err
    assert not (tmp_path / "x.jsonl").exists()


def test_env_config_fallback(cfg, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GEODIVERSE_CONFIG", str(cfg))
    code, out, _ = run(capsys, "sample", "--alpha", "global", "--n", 12, "--out", tmp_path / "e.jsonl")
    assert code == 0 and sum(json.loads(out)["counts"].values()) == 12


def test_missing_config_path_exit_2(world, tmp_path, capsys):
    cfg = write_config(world, tmp_path / "c.ini", biomes=tmp_path / "absent.geojson")
    code, _, err = run(capsys, "--config", cfg, "sample", "--alpha", "global", "--n", 6)
    assert code == 2 and "absent" in err


def test_bad_parallelism_exit_2(cfg, capsys, tmp_path):
    code, _, _ = run(capsys, "--config", cfg, "ingest", "--manifest", tmp_path / "m.jsonl", "--parallelism", 0)
    assert code == 2


def _sampled(cfg, tmp_path, capsys, n=12, alpha="global", name="m"):
    path = tmp_path / f"{name}.jsonl"
    assert run(capsys, "--config", cfg, "sample", "--alpha", alpha, "--n", n, "--name", name, "--out", path)[0] == 0
    return path


def test_ingest_local_store(cfg, tmp_path, capsys):
    m = _sampled(cfg, tmp_path, capsys)
    code, out, _ = run(capsys, "--config", cfg, "ingest", "--manifest", m, "--out-dir", tmp_path / "tiles")
    report = json.loads(out)
    assert code == 0 and report["counts"]["succeeded"] == 12
    updated = read_manifest(tmp_path / "tiles" / "manifest.jsonl")
    assert len(updated) == 12 and all(s.tile_uri for s in updated.samples)


def test_ingest_unreachable_remote(world, tmp_path, capsys):
    cfg = write_config(world, tmp_path / "c.ini", tile_source="http://127.0.0.1:9")
    m = _sampled(cfg, tmp_path, capsys, n=5)
    code, out, _ = run(capsys, "--config", cfg, "ingest", "--manifest", m, "--out-dir", tmp_path / "t")
    assert code == 0 and json.loads(out)["counts"]["unavailable"] == 5


def test_ingest_unwritable_out_dir(cfg, tmp_path, capsys):
    m = _sampled(cfg, tmp_path, capsys, n=3)
    (tmp_path / "blocker").write_text("")
    code, _, _ = run(capsys, "--config", cfg, "ingest", "--manifest", m, "--out-dir", tmp_path / "blocker" / "x")
    assert code == 2


def test_ingest_missing_manifest_exit_4(cfg, tmp_path, capsys):
    code, _, _ = run(capsys, "--config", cfg, "ingest", "--manifest", tmp_path / "none.jsonl")
    assert code == 4


def test_audit_constant_tile(cfg, tmp_path, capsys):
    d = tmp_path / "const"
    d.mkdir()
    write_tile(RasterTile(("B2", "B3"), np.full((2, 8, 8), 42, np.uint16), (0, 0.01, 0, 0, 0, -0.01)), d / "t.tif")
    code, out, _ = run(capsys, "--config", cfg, "audit", "--tile-dir", d, "--measures", "spectral",
                       "--out", tmp_path / "rep")
    assert code == 0 and json.loads(out)["spectral"] == 0.0
    assert (tmp_path / "rep" / "const.diversity.csv").exists()


def test_audit_continent_one_hot(cfg, tmp_path, capsys):
    m = _sampled(cfg, tmp_path, capsys, n=20, alpha="one-hot:Asia", name="asia")
    code, out, _ = run(capsys, "--config", cfg, "audit", "--manifest", m, "--measures", "continent",
                       "--continents-from-map", "--out", tmp_path / "rep")
    assert code == 0 and json.loads(out)["continent"] == 0.0


def test_audit_full_measure_set(cfg, tmp_path, capsys):
    m = _sampled(cfg, tmp_path, capsys, n=100, name="full")
    run(capsys, "--config", cfg, "ingest", "--manifest", m, "--out-dir", tmp_path / "tiles")
    code, out, _ = run(capsys, "--config", cfg, "audit", "--manifest", tmp_path / "tiles" / "manifest.jsonl",
                       "--out", tmp_path / "rep")
    rep = json.loads(out)
    assert code == 0
    bounds = {"continent": 6, "biome": 5, "landcover": 4, "spectral": 100, "sample_biome": 5, "sample_landcover": 4}
    for name, k in bounds.items():
        assert rep[name] is not None and 0 <= rep[name] <= math.log(k) + 1e-12
    assert set(rep["per_band"]) == {"B2", "B3", "B4", "B8"}
    assert rep["sample_count"] == 100


def test_audit_needs_tiles(cfg, tmp_path, capsys):
    m = _sampled(cfg, tmp_path, capsys, n=3)
    code, _, err = run(capsys, "--config", cfg, "audit", "--manifest", m, "--measures", "spectral")
    assert code == 2 and "tiles" in err


def test_analyze_table2_only(cfg, tmp_path, capsys):
    code, out, _ = run(capsys, "--config", cfg, "analyze", "--scores", "table2", "--out", tmp_path / "a")
    assert code == 0
    rows = list(csv.reader((tmp_path / "a" / "ranks.csv").open()))
    assert rows[1][0] == "One-hot-Europe" and rows[-1][0] == "Zero-pretraining"


def _toy_reports(tmp_path, names):
    rng = np.random.default_rng(0)
    paths = []
    for i, n in enumerate(names):
        rep = DiversityReport(n, continent=float(rng.uniform(0, 1.79)), biome=float(rng.uniform(0, 2)),
                              landcover=float(rng.uniform(0, 2)), spectral=1.5 + 0.1 * i,
                              per_band={"B2": 2.0 + 0.01 * i}, sample_count=10)
        p = tmp_path / f"{n}.json"
        p.write_text(rep.to_json())
        paths.append(p)
    return paths


def test_analyze_with_ten_reports(cfg, tmp_path, capsys):
    names = [f"ds{i}" for i in range(10)]
    scores = tmp_path / "scores.csv"
    with scores.open("w") as fh:
        fh.write("dataset,task,mean,ci,higher_is_better\n")
        for i, n in enumerate(names):
            for t in ("a", "b", "c", "d"):
                fh.write(f"{n},{t},{0.1 * i + 0.01 * ord(t)},,true\n")
    reports = _toy_reports(tmp_path, names)
    code, out, _ = run(capsys, "--config", cfg, "analyze", "--scores", scores, "--reports", *reports,
                       "--out", tmp_path / "a")
    assert code == 0
    rows = list(csv.reader((tmp_path / "a" / "correlations.csv").open()))
    assert len(rows) - 1 >= 4
    spectral = next(r for r in rows if r[0] == "spectral")
    assert float(spectral[1]) == pytest.approx(1.0)


def test_analyze_misaligned_exit_2(cfg, tmp_path, capsys):
    reports = _toy_reports(tmp_path, ["Atlantis", "Lemuria", "Mu"])
    code, _, err = run(capsys, "--config", cfg, "analyze", "--scores", "table2", "--reports", *reports,
                       "--out", tmp_path / "a")
    assert code == 2 and "Atlantis" in err


def test_sample_deterministic(cfg, tmp_path, capsys):
    a = _sampled(cfg, tmp_path, capsys, n=30, name="a")
    b = tmp_path / "b.jsonl"
    run(capsys, "--config", cfg, "sample", "--alpha", "global", "--n", 30, "--name", "a", "--out", b)
    assert a.read_bytes() == b.read_bytes()
