"""``geodiverse`` command line: sample, ingest, audit, analyze.

Exit codes: 0 success, 2 usage/configuration, 3 sampling saturation, 4 I/O.
Machine-readable output goes to stdout or files; logs go to stderr.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .errors import (
    AlignmentError,
    ConfigurationError,
    DegenerateInputError,
    GeodiverseError,
    ParseError,
    PersistenceError,
    SaturationError,
    ValidationError,
)

EXIT_OK, EXIT_USAGE, EXIT_SATURATION, EXIT_IO = 0, 2, 3, 4

CONFIG_ENV = "GEODIVERSE_CONFIG"
_SECTION = "geodiverse"
_PATH_KEYS = ("continents", "biomes", "landcover", "biomes_legend", "landcover_legend", "band_stats")

logger = logging.getLogger("geodiverse")


class Config(dict):
    """Flat key/value settings from an INI-style file, overridable by flags."""

    DEFAULTS = {
        "bins": "100",
        "range_mode": "sample",
        "log_base": "e",
        "output_dir": ".",
        "parallelism": "1",
        "seed": "0",
        "size_px": "96,96",
        "date_window": "2024-01-01/2024-12-31",
        "max_cloud_pct": "20",
        "retries": "3",
    }

    @classmethod
    def load(cls, path=None) -> "Config":
        cfg = cls(cls.DEFAULTS)
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cfg
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {p}: {exc}") from None
        if not text.lstrip().startswith("["):
            text = f"[{_SECTION}]\n" + text
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config {p}: {exc}") from None
        for section in parser.sections():
            cfg.update(parser[section])
        base = p.parent
        for key in _PATH_KEYS:
            if key in cfg and cfg[key]:
                resolved = Path(cfg[key])
                if not resolved.is_absolute():
                    resolved = base / resolved
                if not resolved.exists():
                    raise ConfigurationError(f"config key {key!r} points to missing {resolved}")
                cfg[key] = str(resolved)
        source = cfg.get("tile_source", "")
        if source and not source.startswith(("http://", "https://")):
            resolved = Path(source) if Path(source).is_absolute() else base / source
            cfg["tile_source"] = str(resolved)
        return cfg

    def override(self, **values):
        for k, v in values.items():
            if v is not None:
                self[k] = str(v)
        return self

    def int(self, key) -> int:
        try:
            return int(self[key])
        except (KeyError, ValueError):
            raise ConfigurationError(f"config key {key!r} must be an integer") from None

    def float(self, key) -> float:
        try:
            return float(self[key])
        except (KeyError, ValueError):
            raise ConfigurationError(f"config key {key!r} must be a number") from None

    def validate(self):
        if self.int("parallelism") < 1:
            raise ConfigurationError("parallelism must be >= 1")
        return self


# -- loaders -------------------------------------------------------------------


def _load_region_map(path, legend=None, prop="class"):
    from .overlay import RasterRegionMap, VectorRegionMap

    if str(path).lower().endswith((".tif", ".tiff")):
        return RasterRegionMap.from_geotiff(path, legend)
    return VectorRegionMap.from_geojson(path, prop=prop)


def _histogram_spec(cfg):
    from .diversity import HistogramSpec

    value_range = None
    if cfg.get("value_range"):
        lo, hi = (float(v) for v in cfg["value_range"].split(","))
        value_range = (lo, hi)
    try:
        return HistogramSpec(cfg.int("bins"), cfg["range_mode"], value_range)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from None


def _tile_source(cfg):
    from .ingest import HttpTileSource, LocalTileSource

    src = cfg.get("tile_source")
    if not src:
        raise ConfigurationError("no tile_source configured")
    if src.startswith(("http://", "https://")):
        return HttpTileSource(src)
    return LocalTileSource(src)


class _TileFiles(Sequence):
    """Lazily loaded tiles, so audits stream from disk instead of holding everything."""

    def __init__(self, paths):
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        from .ingest import read_tile

        if isinstance(i, slice):
            return _TileFiles(self.paths[i])
        return read_tile(self.paths[i])


def _print_json(obj):
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    sys.stdout.flush()


# -- subcommands -----------------------------------------------------------------


def cmd_sample(args, cfg) -> int:
    from .manifest import write_manifest
    from .sampler import RegionSet, parse_alpha, sample_points

    regions_path = args.regions or cfg.get("continents")
    if not regions_path:
        raise ConfigurationError("sample needs --regions or a 'continents' config entry")
    regions = RegionSet.from_geojson(regions_path)
    alpha = parse_alpha(args.alpha, regions.groups)
    seed = args.seed if args.seed is not None else cfg.int("seed")
    out = Path(args.out or Path(cfg["output_dir"]) / f"{args.name}.jsonl")
    manifest = sample_points(regions, alpha, args.n, seed, min_separation_m=args.min_sep,
                             name=args.name, strict=args.strict)
    write_manifest(manifest, out)
    logger.info("wrote %d samples to %s", len(manifest), out)
    _print_json({"manifest": str(out), "counts": manifest.group_counts()})
    return EXIT_OK


def cmd_ingest(args, cfg) -> int:
    from .ingest import BandStats, ingest_manifest
    from .manifest import read_manifest, write_manifest

    manifest = read_manifest(args.manifest)
    source = _tile_source(cfg)
    stats = BandStats.from_json(cfg["band_stats"]) if cfg.get("band_stats") else None
    out_dir = Path(args.out_dir or Path(cfg["output_dir"]) / "tiles")
    size = tuple(int(v) for v in cfg["size_px"].split(","))
    window = tuple(cfg["date_window"].split("/"))
    try:
        report = ingest_manifest(
            manifest, source, stats, out_dir,
            parallelism=cfg.int("parallelism"),
            size_px=size, date_window=window,
            max_cloud_pct=cfg.float("max_cloud_pct"),
            retries=cfg.int("retries"),
            backoff=float(cfg.get("backoff", 0.5)),
        )
    except PersistenceError as exc:
        raise ConfigurationError(f"output directory unusable: {exc}") from None
    manifest_out = Path(args.manifest_out or out_dir / "manifest.jsonl")
    write_manifest(report.manifest, manifest_out)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_audit(args, cfg) -> int:
    from ._io import atomic_write_text
    from .diversity import MEASURES, build_report
    from .manifest import read_manifest

    measures = [m.strip().replace("-", "_") for m in args.measures.split(",") if m.strip()]
    unknown = set(measures) - set(MEASURES)
    if unknown:
        raise ConfigurationError(f"unknown measures {sorted(unknown)}; choose from {list(MEASURES)}")
    manifest = read_manifest(args.manifest) if args.manifest else None
    if manifest is not None:
        paths = [s.tile_uri for s in manifest.samples if s.tile_uri]
    else:
        paths = sorted(str(p) for p in Path(args.tile_dir).glob("*.tif"))
    tiles = _TileFiles(paths) if paths else None
    needs_tiles = set(measures) - {"continent"}
    if needs_tiles and not paths:
        raise ConfigurationError(f"measures {sorted(needs_tiles)} need tiles but none were found")
    if "continent" in measures and manifest is None:
        raise ConfigurationError("continent diversity needs --manifest")

    continents = _load_region_map(cfg["continents"]) if cfg.get("continents") and args.continents_from_map else None
    biomes = _load_region_map(cfg["biomes"], cfg.get("biomes_legend")) if cfg.get("biomes") else None
    landcover = _load_region_map(cfg["landcover"], cfg.get("landcover_legend")) if cfg.get("landcover") else None
    for kind, rmap in (("biome", biomes), ("landcover", landcover)):
        if {kind, f"sample_{kind}"} & set(measures) and rmap is None:
            raise ConfigurationError(f"{kind} measures need a '{'biomes' if kind == 'biome' else 'landcover'}' map")

    name = args.name or (manifest.name if manifest is not None else Path(args.tile_dir).name)
    report = build_report(name, manifest=manifest, tiles=tiles, continents=continents, biomes=biomes,
                          landcover=landcover, spec=_histogram_spec(cfg), log_base=cfg["log_base"],
                          measures=measures)
    out = Path(args.out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"{name}.diversity.json", report.to_json())
    atomic_write_text(out / f"{name}.diversity.csv", report.to_csv())
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    from .analysis import ScoreTable, correlate_diversity, emit_report, load_table2, rank_datasets
    from .diversity import DiversityReport

    table = load_table2() if args.scores in (None, "table2") else ScoreTable.from_csv(args.scores)
    ranks = rank_datasets(table, method=args.rank_method)
    correlations = {}
    reports = [DiversityReport.from_json(p) for p in args.reports or []]
    if reports:
        measures = args.measures.split(",") if args.measures else None
        correlations = correlate_diversity(reports, table, measures, normalization=args.normalization,
                                           method=args.p_method, seed=cfg.int("seed"))
    out = Path(args.out or cfg["output_dir"])
    written = emit_report(ranks, correlations, out, metadata={
        "normalization": args.normalization,
        "rank_method": args.rank_method,
        "p_method": args.p_method,
    })
    _print_json({"order": ranks.order, "written": [str(p) for p in written]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodiverse", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"INI-style config file (fallback: ${CONFIG_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw a coordinate manifest under an allocation vector")
    p.add_argument("--alpha", required=True, help="'global', 'one-hot:<group>' or 'name=w,...'")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-sep", type=float, dest="min_sep", help="minimum separation in meters")
    p.add_argument("--regions", help="GeoJSON with a 'group' property (default: config 'continents')")
    p.add_argument("--name", default="sampled")
    p.add_argument("--strict", action="store_true", help="reject overlapping groups")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ingest", help="fetch, normalize and store tiles for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--manifest-out", dest="manifest_out")
    p.add_argument("--source", dest="tile_source")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--retries", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("audit", help="compute diversity measures")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--tile-dir", dest="tile_dir")
    p.add_argument("--measures", default="continent,biome,landcover,spectral,per-band,sample-biome,sample-landcover")
    p.add_argument("--continents-from-map", action="store_true",
                   help="place samples with the continents map instead of their group labels")
    p.add_argument("--name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("analyze", help="rank pretraining datasets and correlate with diversity")
    p.add_argument("--scores", help="score CSV, or 'table2' for the shipped fixture")
    p.add_argument("--reports", nargs="*", help="diversity report JSON files")
    p.add_argument("--measures")
    p.add_argument("--normalization", choices=("minmax", "raw"), default="minmax")
    p.add_argument("--rank-method", dest="rank_method", choices=("average", "dense", "min", "max"),
                   default="average")
    p.add_argument("--p-method", dest="p_method", choices=("t", "permutation"), default="t")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging(verbose: bool) -> None:
    if not any(isinstance(h, _StderrHandler) for h in logger.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s msg=%(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = Config.load(args.config)
        cfg.override(parallelism=getattr(args, "parallelism", None),
                     retries=getattr(args, "retries", None),
                     tile_source=getattr(args, "tile_source", None))
        cfg.validate()
        return args.func(args, cfg)
    except SaturationError as exc:
        logger.error("%s", exc)
        return EXIT_SATURATION
    except (ConfigurationError, ValidationError, ParseError, AlignmentError, DegenerateInputError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (PersistenceError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except GeodiverseError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.error("interrupted; partial outputs keep their .partial suffix")
        return 130


if __name__ == "__main__":
    sys.exit(main())
