"""Feature-vector datasets: synthetic generation, file I/O, fleet partitioning.

Training data is abstracted to labeled feature vectors (features are assumed
to be precomputed upstream). The partitioner assigns disjoint per-(user, app)
subsets under one of four distributions:

  IID        every cell draws uniformly from all classes
  NonIIDPU   3 classes per user, identical across that user's apps
  NonIIDPAO  3 classes per (user, app) cell, chosen independently
  NonIIDPAP  fixed disjoint class split across apps (3/3/4), same for all users
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidInput, ParseError

DEFAULT_APPS = ("Red", "Green", "Blue")
CLASSES_PER_CELL = 3  # NonIIDPU / NonIIDPAO draw size


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1:
            raise InvalidInput("features must be a 1-d vector")
        if not np.all(np.isfinite(f)):
            raise InvalidInput("features contain NaN or Inf")
        if f.flags.writeable:
            f = f.copy()
            f.setflags(write=False)
        object.__setattr__(self, "features", f)
        if self.label < 0:
            raise InvalidInput("label must be >= 0")


class Distribution(str, Enum):
    IID = "IID"
    NONIID_PER_USER = "NonIIDPU"
    NONIID_PER_APP_OVERLAPPING = "NonIIDPAO"
    NONIID_PER_APP_PERSISTENT = "NonIIDPAP"


@dataclass
class Dataset:
    d: int
    num_classes: int
    train: list[LabeledSample]
    test: list[LabeledSample]

    def __post_init__(self):
        for part in (self.train, self.test):
            for s in part:
                if s.features.shape != (self.d,):
                    raise InvalidInput("sample dimension differs from dataset d")
                if s.label >= self.num_classes:
                    raise InvalidInput(
                        f"label {s.label} out of range for {self.num_classes} classes"
                    )


@dataclass(frozen=True)
class PartitionSpec:
    distribution: Distribution
    num_users: int
    apps: tuple[str, ...] = DEFAULT_APPS
    samples_per_app: int = 150
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        object.__setattr__(self, "apps", tuple(self.apps))
        if self.num_users < 1 or self.samples_per_app < 1 or not self.apps:
            raise InvalidInput("num_users, samples_per_app and apps must be nonempty/positive")


@dataclass
class Assignment:
    """Disjoint per-(user, app) training subsets plus each cell's class set."""

    spec: PartitionSpec
    cells: dict[tuple[int, str], list[LabeledSample]]
    cell_indices: dict[tuple[int, str], list[int]]
    cell_classes: dict[tuple[int, str], tuple[int, ...]]


def _balanced_counts(n: int, c: int) -> list[int]:
    base, extra = divmod(n, c)
    return [base + (1 if i < extra else 0) for i in range(c)]


def generate_synthetic(
    d: int,
    num_classes: int,
    n_train: int,
    n_test: int,
    class_sep: float,
    seed: int,
) -> Dataset:
    """Gaussian mixture with unit covariance and class means on a sphere.

    Each class mean is drawn once on the sphere of radius class_sep; classes
    are balanced to within one sample. Train and test are generated from
    independent draws, so they are disjoint by construction.
    """
    if d < 1 or n_train < 1 or n_test < 1:
        raise InvalidInput("sizes must be >= 1")
    if num_classes < 2:
        raise InvalidInput("need at least 2 classes")
    if class_sep < 0:
        raise InvalidInput("class_sep must be >= 0")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_sep * directions

    def make(n: int) -> list[LabeledSample]:
        counts = _balanced_counts(n, num_classes)
        feats = np.empty((n, d))
        labels = np.empty(n, dtype=np.intp)
        pos = 0
        for cls, cnt in enumerate(counts):
            feats[pos : pos + cnt] = means[cls] + rng.normal(size=(cnt, d))
            labels[pos : pos + cnt] = cls
            pos += cnt
        order = rng.permutation(n)
        feats = feats[order]
        labels = labels[order]
        feats.setflags(write=False)
        return [LabeledSample(feats[i], int(labels[i])) for i in range(n)]

    return Dataset(d, num_classes, make(n_train), make(n_test))


_HEADER_RE = re.compile(r"^d=(\d+) C=(\d+) train=(\d+) test=(\d+)$")


def save_features(ds: Dataset, path) -> None:
    """Write the documented text format: header line, then one sample per line."""
    lines = [f"d={ds.d} C={ds.num_classes} train={len(ds.train)} test={len(ds.test)}"]
    for s in [*ds.train, *ds.test]:
        vals = ",".join("%.9g" % np.float32(v) for v in s.features)
        lines.append(f"{s.label},{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path) -> Dataset:
    """Parse a dataset file; errors name the offending 1-based line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ParseError(f"{path}: line 1: malformed header {lines[0]!r}")
    d, num_classes, n_train, n_test = (int(g) for g in m.groups())
    if n_train == 0:
        raise ParseError(f"{path}: no training samples")
    expected = n_train + n_test
    if len(lines) - 1 != expected:
        raise ParseError(
            f"{path}: header promises {expected} rows, file has {len(lines) - 1}"
        )

    def parse_row(lineno: int, line: str) -> LabeledSample:
        parts = line.split(",")
        if len(parts) != d + 1:
            raise ParseError(
                f"{path}: line {lineno}: expected {d + 1} fields, got {len(parts)}"
            )
        try:
            label = int(parts[0])
            feats = np.array([np.float32(p) for p in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        if not 0 <= label < num_classes:
            raise ParseError(
                f"{path}: line {lineno}: label {label} out of range [0, {num_classes})"
            )
        if not np.all(np.isfinite(feats)):
            raise ParseError(f"{path}: line {lineno}: non-finite feature value")
        return LabeledSample(feats, label)

    samples = [parse_row(i + 2, line) for i, line in enumerate(lines[1:])]
    return Dataset(d, num_classes, samples[:n_train], samples[n_train:])


def _pap_class_split(num_classes: int, num_apps: int) -> list[tuple[int, ...]]:
    if num_apps != 3 or num_classes != 10:
        raise InvalidInput(
            "the persistent per-app split is defined for 3 apps over 10 classes"
        )
    return [(0, 1, 2), (3, 4, 5), (6, 7, 8, 9)]


def partition(ds: Dataset, spec: PartitionSpec) -> Assignment:
    """Assign disjoint training subsets to every (user, app) cell.

    Sampling is without replacement across the whole assignment; if a NonIID
    cell cannot be filled from its class pool the partition fails rather than
    silently reusing samples.
    """
    need = spec.samples_per_app * spec.num_users * len(spec.apps)
    if need > len(ds.train):
        raise CapacityError(
            f"assignment needs {need} samples, training set has {len(ds.train)}"
        )
    rng = np.random.default_rng(spec.seed)
    pools: dict[int, list[int]] = {}
    for cls in range(ds.num_classes):
        idx = [i for i, s in enumerate(ds.train) if s.label == cls]
        pools[cls] = [int(i) for i in rng.permutation(idx)] if idx else []

    def draw_cell(user: int, app: str, classes) -> list[int]:
        classes = list(classes)
        sizes = [len(pools[c]) for c in classes]
        if sum(sizes) < spec.samples_per_app:
            starving = classes[int(np.argmin(sizes))]
            raise CapacityError(
                f"cell (user {user}, app {app}) needs {spec.samples_per_app} samples "
                f"from classes {classes} but only {sum(sizes)} remain; "
                f"class {starving} is exhausted first ({min(sizes)} left)"
            )
        take = rng.multivariate_hypergeometric(sizes, spec.samples_per_app)
        chosen: list[int] = []
        for c, t in zip(classes, take):
            pool = pools[c]
            for _ in range(int(t)):
                chosen.append(pool.pop())
        return chosen

    dist = spec.distribution
    all_classes = tuple(range(ds.num_classes))
    if dist is Distribution.NONIID_PER_APP_PERSISTENT:
        app_split = _pap_class_split(ds.num_classes, len(spec.apps))

    cells: dict[tuple[int, str], list[LabeledSample]] = {}
    cell_indices: dict[tuple[int, str], list[int]] = {}
    cell_classes: dict[tuple[int, str], tuple[int, ...]] = {}
    for user in range(spec.num_users):
        if dist is Distribution.NONIID_PER_USER:
            user_classes = tuple(
                sorted(int(c) for c in rng.choice(ds.num_classes, CLASSES_PER_CELL, replace=False))
            )
        for ai, app in enumerate(spec.apps):
            if dist is Distribution.IID:
                classes = all_classes
            elif dist is Distribution.NONIID_PER_USER:
                classes = user_classes
            elif dist is Distribution.NONIID_PER_APP_OVERLAPPING:
                classes = tuple(
                    sorted(int(c) for c in rng.choice(ds.num_classes, CLASSES_PER_CELL, replace=False))
                )
            else:
                classes = app_split[ai]
            idxs = draw_cell(user, app, classes)
            key = (user, app)
            cell_indices[key] = idxs
            cells[key] = [ds.train[i] for i in idxs]
            cell_classes[key] = classes
    return Assignment(spec, cells, cell_indices, cell_classes)
