"""Geographic sampling, ingestion and diversity auditing for remote-sensing pretraining datasets."""
from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (
    RankAggregator,
    ScoreTable,
    correlate_diversity,
    emit_report,
    load_table2,
    load_table3,
    rank_datasets,
    spearman,
)
from .diversity import (
    DiversityReport,
    HistogramSpec,
    SpectralEntropy,
    build_report,
    shannon_entropy,
    spectral_entropy_dataset,
    spectral_entropy_sample,
)
from .ingest import BandNormalizer, BandStats, RasterTile, ingest_manifest, read_tile, write_tile
from .manifest import AllocationVector, DatasetManifest, GeoSample, read_manifest, write_manifest
from .overlay import AreaVector, RasterRegionMap, VectorRegionMap, area_vector, footprint
from .sampler import RegionSampler, RegionSet, allocate_counts, sample_points

__all__ = [
    "AllocationVector",
    "AreaVector",
    "BandNormalizer",
    "BandStats",
    "DatasetManifest",
    "DiversityReport",
    "GeoSample",
    "HistogramSpec",
    "RankAggregator",
    "RasterRegionMap",
    "RasterTile",
    "RegionSampler",
    "RegionSet",
    "ScoreTable",
    "SpectralEntropy",
    "VectorRegionMap",
    "allocate_counts",
    "area_vector",
    "build_report",
    "correlate_diversity",
    "emit_report",
    "footprint",
    "ingest_manifest",
    "load_table2",
    "load_table3",
    "rank_datasets",
    "read_manifest",
    "read_tile",
    "sample_points",
    "shannon_entropy",
    "spearman",
    "spectral_entropy_dataset",
    "spectral_entropy_sample",
    "write_manifest",
    "write_tile",
]
