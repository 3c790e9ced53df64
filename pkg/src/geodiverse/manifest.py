"""Dataset data model, JSONL persistence and downstream subset construction.

A manifest file is UTF-8 JSONL. The first line is a header object::

    {"schema_version":1,"name":...,"groups":[...],"allocation":[...],"seed":...}

and every following line is one sample with the :class:`GeoSample` fields in
declaration order. Raster payloads stay outside the manifest (``tile_uri``).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from ._io import atomic_write_text
from ._rng import stream
from ._validation import check_latlon, check_positive_int, check_simplex, check_unique
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    EmptyGroupError,
    InsufficiencyError,
    ParseError,
    PersistenceError,
    ValidationError,
)

SCHEMA_VERSION = 1
ZERO_PRETRAINING = "Zero-pretraining"


@dataclass(frozen=True)
class AllocationVector:
    """Target proportions over mutually exclusive groups (a point on the simplex)."""

    groups: tuple
    weights: tuple

    def __post_init__(self):
        groups = tuple(check_unique(self.groups, "groups"))
        weights = tuple(check_simplex(self.weights))
        if len(groups) != len(weights):
            raise ValidationError(
                f"allocation has {len(groups)} groups but {len(weights)} weights"
            )
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def one_hot(cls, groups: Sequence[str], group: str) -> "AllocationVector":
        if group not in groups:
            raise ConfigurationError(f"unknown group {group!r}; expected one of {list(groups)}")
        return cls(tuple(groups), tuple(1.0 if g == group else 0.0 for g in groups))

    @classmethod
    def uniform(cls, groups: Sequence[str]) -> "AllocationVector":
        groups = tuple(groups)
        return cls(groups, tuple(1.0 / len(groups) for _ in groups))

    @classmethod
    def from_weights(cls, groups: Sequence[str], weights: Sequence[float]) -> "AllocationVector":
        """Rescale non-negative weights (e.g. rounded published shares) onto the simplex."""
        w = [float(x) for x in weights]
        if any(not (x >= 0) for x in w) or math.fsum(w) <= 0:
            raise ValidationError("weights must be non-negative with a positive sum")
        total = math.fsum(w)
        return cls(tuple(groups), tuple(x / total for x in w))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "AllocationVector":
        return cls(tuple(mapping), tuple(mapping.values()))

    def as_dict(self) -> dict:
        return dict(zip(self.groups, self.weights))


@dataclass(frozen=True)
class GeoSample:
    id: str
    lat: float
    lon: float
    group_label: str
    acquisition_date: Optional[str] = None
    cloud_cover_pct: Optional[float] = None
    tile_uri: Optional[str] = None
    class_label: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError(f"sample id must be a nonempty string, got {self.id!r}")
        try:
            object.__setattr__(self, "lat", float(self.lat))
            object.__setattr__(self, "lon", float(self.lon))
            check_latlon(self.lat, self.lon)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"sample {self.id!r}: {exc}") from None
        if self.cloud_cover_pct is not None:
            cc = float(self.cloud_cover_pct)
            if not (0.0 <= cc <= 100.0):
                raise ValidationError(f"sample {self.id!r}: cloud_cover_pct {cc!r} not in [0, 100]")
        if self.acquisition_date is not None:
            from datetime import date

            try:
                date.fromisoformat(str(self.acquisition_date)[:10])
            except ValueError:
                raise ValidationError(
                    f"sample {self.id!r}: acquisition_date {self.acquisition_date!r} is not ISO-8601"
                ) from None

    def to_json(self) -> str:
        record = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


_SAMPLE_FIELDS = tuple(f.name for f in fields(GeoSample))


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    groups: tuple
    allocation: AllocationVector
    samples: tuple = ()
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(check_unique(self.groups, "groups")))
        object.__setattr__(self, "samples", tuple(self.samples))
        if tuple(self.allocation.groups) != self.groups:
            raise ValidationError("allocation groups must match manifest groups in order")
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {self.schema_version!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        declared = set(self.groups)
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.group_label not in declared:
                raise ValidationError(
                    f"sample {s.id!r}: group_label {s.group_label!r} not in declared groups"
                )

    def __len__(self):
        return len(self.samples)

    def group_counts(self) -> dict:
        counts = Counter(s.group_label for s in self.samples)
        return {g: counts.get(g, 0) for g in self.groups}

    def realized_allocation(self) -> dict:
        """Exact per-group share of samples, ``count / n`` as :class:`~fractions.Fraction`."""
        n = len(self.samples)
        if n == 0:
            raise DegenerateInputError("realized allocation is undefined for an empty manifest")
        return {g: Fraction(c, n) for g, c in self.group_counts().items()}

    def header(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "groups": list(self.groups),
            "allocation": list(self.allocation.weights),
            "seed": self.seed,
        }

    def with_samples(self, samples, **changes) -> "DatasetManifest":
        return replace(self, samples=tuple(samples), **changes)


def zero_pretraining_manifest(groups: Sequence[str]) -> DatasetManifest:
    """Placeholder for the no-pretraining baseline: a reserved name and no samples."""
    return DatasetManifest(ZERO_PRETRAINING, tuple(groups), AllocationVector.uniform(groups))


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [json.dumps(manifest.header(), separators=(",", ":"), ensure_ascii=False)]
    lines.extend(s.to_json() for s in manifest.samples)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, destination) -> None:
    """Serialize ``manifest`` to ``destination``; output is byte-stable for equal manifests."""
    atomic_write_text(destination, dumps_manifest(manifest))


def loads_manifest(text: str) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc.msg}", line=1) from None
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object", line=1)
    missing = {"schema_version", "name", "groups", "allocation", "seed"} - set(header)
    if missing:
        raise ParseError(f"header lacks {sorted(missing)}", line=1)
    if header["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {header['schema_version']!r}")

    samples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed sample: {exc.msg}", line=lineno) from None
        if not isinstance(record, dict) or "id" not in record:
            raise ParseError("sample must be an object with an 'id'", line=lineno)
        unknown = set(record) - set(_SAMPLE_FIELDS)
        if unknown:
            raise ParseError(f"unknown sample fields {sorted(unknown)}", line=lineno)
        try:
            samples.append(GeoSample(**record))
        except TypeError as exc:
            raise ParseError(str(exc), line=lineno) from None

    groups = tuple(header["groups"])
    return DatasetManifest(
        name=header["name"],
        groups=groups,
        allocation=AllocationVector(groups, tuple(header["allocation"])),
        samples=tuple(samples),
        seed=header["seed"],
        schema_version=header["schema_version"],
    )


def read_manifest(source) -> DatasetManifest:
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(str(exc), path=path) from exc
    return loads_manifest(text)


# -- downstream subsets -------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.70, 0.15, 0.15)
    top_k_classes: int = 20
    per_class_cap: int = 251
    total_cap: int = 5020

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3:
            raise ValidationError("ratios must be (train, val, test)")
        if any(not (r > 0) for r in ratios) or abs(math.fsum(ratios) - 1.0) > 1e-9:
            raise ValidationError(f"ratios must be positive and sum to 1, got {ratios}")
        object.__setattr__(self, "ratios", ratios)
        check_positive_int(self.top_k_classes, "top_k_classes")
        check_positive_int(self.per_class_cap, "per_class_cap")
        check_positive_int(self.total_cap, "total_cap")


def apportion(total: int, ratios: Sequence[float]) -> list:
    """Split ``total`` items into integer parts proportional to ``ratios``.

    Uses the Sainte-Lague highest-averages rule (each unit goes to the part
    maximising ``ratio / (2 * seats + 1)``), evaluated in exact rational
    arithmetic on the decimal form of the ratios. Ties go to the earlier part,
    i.e. train before val before test.

    >>> apportion(251, (0.70, 0.15, 0.15))
    [175, 38, 38]
    >>> apportion(10, (0.70, 0.15, 0.15))
    [7, 2, 1]
    """
    if total < 0:
        raise ValidationError("total must be >= 0")
    weights = [Fraction(str(r)) for r in ratios]
    seats = [0] * len(weights)
    for _ in range(total):
        best = max(range(len(weights)), key=lambda j: (weights[j] / (2 * seats[j] + 1), -j))
        seats[best] += 1
    return seats


def _subset_manifest(parent: DatasetManifest, name: str, samples, seed: int) -> DatasetManifest:
    counts = Counter(s.group_label for s in samples)
    if samples:
        weights = tuple(counts.get(g, 0) / len(samples) for g in parent.groups)
        alloc = AllocationVector(parent.groups, weights)
    else:
        alloc = parent.allocation
    return DatasetManifest(name, parent.groups, alloc, tuple(samples), seed=seed)


def build_downstream_subsets(
    labeled: DatasetManifest,
    group_filter: Optional[str],
    spec: SplitSpec,
    seed: int,
):
    """Cut a labeled manifest into capped, class-balanced train/val/test manifests.

    Keeps the ``spec.top_k_classes`` most frequent classes among the samples of
    ``group_filter`` (all groups when ``None``; frequency ties broken by class
    name), draws at most ``per_class_cap`` samples per class uniformly under
    ``seed`` and splits each class by :func:`apportion`. The effective
    per-class cap is lowered to ``total_cap // top_k_classes`` when needed so
    the three splits never exceed ``total_cap`` together.
    """
    if group_filter is not None and group_filter not in labeled.groups:
        raise ConfigurationError(f"group {group_filter!r} is not declared in {labeled.name!r}")
    pool = [s for s in labeled.samples if group_filter is None or s.group_label == group_filter]
    if not pool:
        raise EmptyGroupError(f"no samples in group {group_filter!r}")
    for s in pool:
        if s.class_label is None:
            raise ValidationError(f"sample {s.id!r} has no class_label")

    freq = Counter(s.class_label for s in pool)
    ranked = sorted(freq, key=lambda c: (-freq[c], c))
    k = spec.top_k_classes
    if len(ranked) < k:
        raise DegenerateInputError(
            f"need {k} classes but only {len(ranked)} available: {sorted(ranked)}"
        )
    cap = min(spec.per_class_cap, spec.total_cap // k)

    by_class: dict = {}
    for s in pool:
        by_class.setdefault(s.class_label, []).append(s)

    splits: tuple = ([], [], [])
    for cls in sorted(ranked[:k]):
        members = sorted(by_class[cls], key=lambda s: s.id)
        order = stream(seed, "downstream", group_filter, cls).permutation(len(members))
        chosen = [members[i] for i in order[: min(cap, len(members))]]
        start = 0
        for split, size in zip(splits, apportion(len(chosen), spec.ratios)):
            split.extend(chosen[start : start + size])
            start += size

    tag = group_filter if group_filter is not None else "all"
    return tuple(
        _subset_manifest(labeled, f"{labeled.name}-{tag}-{part}", samples, seed)
        for part, samples in zip(("train", "val", "test"), splits)
    )


def _single_group(manifest: DatasetManifest) -> str:
    labels = {s.group_label for s in manifest.samples}
    if len(labels) != 1:
        raise ConfigurationError(
            f"per-group subset {manifest.name!r} must hold exactly one group, found {sorted(labels)}"
        )
    return labels.pop()


def build_global_subset(
    per_group_subsets: Sequence[DatasetManifest],
    per_class_quota: Sequence[int],
    seed: int,
    classes: Optional[Sequence[str]] = None,
    name: str = "global",
):
    """Draw an equal (train, val, test) quota per class from every group subset.

    ``classes`` defaults to the union of class labels over all subsets, so a
    class missing from one group is reported as an insufficient cell rather
    than silently dropped.
    """
    quota = tuple(int(q) for q in per_class_quota)
    if len(quota) != 3 or any(q < 0 for q in quota) or sum(quota) == 0:
        raise ValidationError(f"per_class_quota must be three non-negative counts, got {quota}")
    if not per_group_subsets:
        raise DegenerateInputError("no group subsets given")

    group_ids = [_single_group(m) for m in per_group_subsets]
    check_unique(group_ids, "group subsets")
    if classes is None:
        classes = sorted({s.class_label for m in per_group_subsets for s in m.samples} - {None})
    if not classes:
        raise DegenerateInputError("no shared class vocabulary")

    need = sum(quota)
    splits: tuple = ([], [], [])
    for group, subset in zip(group_ids, per_group_subsets):
        by_class: dict = {}
        for s in subset.samples:
            by_class.setdefault(s.class_label, []).append(s)
        for cls in classes:
            members = sorted(by_class.get(cls, []), key=lambda s: s.id)
            if len(members) < need:
                raise InsufficiencyError(
                    f"cell ({group!r}, {cls!r}) has {len(members)} samples, quota needs {need}",
                    cell=(group, cls),
                )
            order = stream(seed, "global", group, cls).permutation(len(members))[:need]
            start = 0
            for split, size in zip(splits, quota):
                split.extend(members[i] for i in order[start : start + size])
                start += size

    groups = tuple(group_ids)
    parent = DatasetManifest(name, groups, AllocationVector.uniform(groups), seed=seed)
    return tuple(
        _subset_manifest(parent, f"{name}-{part}", samples, seed)
        for part, samples in zip(("train", "val", "test"), splits)
    )
