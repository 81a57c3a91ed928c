"""Point-feature datasets: CSV ingestion, synthetic point processes, splits and k-NN context."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

BBox = tuple[float, float, float, float]

CSV_HEADER = ["id", "x", "y", "types"]
TYPE_SEP = "|"

# Below this size k-NN queries skip the grid index.
BRUTE_FORCE_LIMIT = 256


@dataclass(frozen=True)
class PointFeature:
    id: int
    loc: tuple[float, float]
    type_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.type_ids:
            raise DataError(f"point {self.id}: empty type set")
        if len(set(self.type_ids)) != len(self.type_ids):
            raise DataError(f"point {self.id}: duplicate type ids {self.type_ids}")
        if not all(math.isfinite(c) for c in self.loc):
            raise DataError(f"point {self.id}: non-finite location {self.loc}")


class TypeVocabulary:
    """Bijective mapping between type names and dense integer ids."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if name not in self._ids:
            self._ids[name] = len(self._names)
            self._names.append(name)
        return self._ids[name]

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, type_id: int) -> str:
        return self._names[type_id]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._ids

    def __eq__(self, other):
        return isinstance(other, TypeVocabulary) and self._names == other._names

    def __repr__(self):
        return f"TypeVocabulary({self._names!r})"


def tight_bbox(locs: np.ndarray) -> BBox:
    lo = locs.min(axis=0)
    hi = locs.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True, eq=False)
class Dataset:
    points: tuple[PointFeature, ...]
    vocab: TypeVocabulary
    bbox: BBox

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise DataError("dataset has no points")
        seen = set()
        V = len(self.vocab)
        x0, y0, x1, y1 = self.bbox
        for p in self.points:
            if p.id in seen:
                raise DataError(f"duplicate point id {p.id}")
            seen.add(p.id)
            if any(t < 0 or t >= V for t in p.type_ids):
                raise DataError(f"point {p.id}: type id outside vocabulary of size {V}")
            if not (x0 <= p.loc[0] <= x1 and y0 <= p.loc[1] <= y1):
                raise DataError(f"point {p.id}: location {p.loc} outside bbox {self.bbox}")

    def __len__(self):
        return len(self.points)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([p.id for p in self.points], dtype=np.int64)

    @cached_property
    def locs(self) -> np.ndarray:
        arr = np.array([p.loc for p in self.points], dtype=np.float64).reshape(-1, 2)
        arr.setflags(write=False)
        return arr

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {p.id: i for i, p in enumerate(self.points)}

    @cached_property
    def type_sets(self) -> list[tuple[int, ...]]:
        return [p.type_ids for p in self.points]

    @cached_property
    def spatial_index(self) -> "GridIndex":
        return GridIndex(self.locs, self.ids, self.bbox)

    def point(self, point_id: int) -> PointFeature:
        return self.points[self.index_of[point_id]]

    def indices(self, point_ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.index_of[int(i)] for i in point_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown point id {exc.args[0]}") from None

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    def points_of_type(self, type_id: int) -> np.ndarray:
        """Row indices of points carrying ``type_id``."""
        return np.array([i for i, ts in enumerate(self.type_sets) if type_id in ts], dtype=np.int64)


# --------------------------------------------------------------------------
# CSV


def load_poi_csv(path: str | Path) -> Dataset:
    """Read a ``id,x,y,types`` file; vocabulary ids follow first occurrence."""
    path = Path(path)
    vocab = TypeVocabulary()
    points = []
    seen: set[int] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {line}: expected 4 fields, got {len(row)}")
            try:
                pid = int(row[0])
            except ValueError:
                raise DataError(f"{path}: line {line}: invalid id {row[0]!r}") from None
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise DataError(f"{path}: line {line}: non-numeric coordinate") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}: line {line}: non-finite coordinate")
            names = row[3].split(TYPE_SEP)
            if not row[3] or any(not n for n in names):
                raise DataError(f"{path}: line {line}: empty type name")
            if pid in seen:
                raise DataError(f"{path}: line {line}: duplicate id {pid}")
            seen.add(pid)
            type_ids = []
            for n in names:
                t = vocab.add(n)
                if t not in type_ids:
                    type_ids.append(t)
            points.append(PointFeature(pid, (x, y), tuple(type_ids)))
    if not points:
        raise DataError(f"{path}: no data rows")
    locs = np.array([p.loc for p in points])
    return Dataset(tuple(points), vocab, tight_bbox(locs))


def write_poi_csv(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in ds.points:
            names = TYPE_SEP.join(ds.vocab.name(t) for t in p.type_ids)
            w.writerow([p.id, repr(float(p.loc[0])), repr(float(p.loc[1])), names])


# --------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_dataset(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Uniform random split. Val and test get floor(ratio * |P|); train takes the rest."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(ds)
    if n < 3:
        raise DataError(f"cannot split a dataset of {n} points (need at least 3)")
    n_va = int(math.floor(ratios[1] * n + 1e-9))
    n_te = int(math.floor(ratios[2] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    ids = ds.ids[order].tolist()
    n_tr = n - n_va - n_te
    return SplitAssignment(
        train=tuple(ids[:n_tr]),
        val=tuple(ids[n_tr:n_tr + n_va]),
        test=tuple(ids[n_tr + n_va:]),
    )


# --------------------------------------------------------------------------
# k-NN


@dataclass(frozen=True)
class ContextNeighborhood:
    center_id: int
    neighbor_ids: tuple[int, ...]
    displacements: np.ndarray  # [n, 2], center minus neighbor


class GridIndex:
    """Uniform bucket grid over a point set answering exact k-NN queries.

    Ordering is by squared Euclidean distance, then by ascending id.
    """

    def __init__(self, locs: np.ndarray, ids: np.ndarray, bbox: BBox | None = None):
        self.locs = np.asarray(locs, dtype=np.float64)
        self.ids = np.asarray(ids, dtype=np.int64)
        n = len(self.locs)
        if bbox is None:
            bbox = tight_bbox(self.locs)
        self.x0, self.y0 = bbox[0], bbox[1]
        w = max(bbox[2] - bbox[0], 0.0)
        h = max(bbox[3] - bbox[1], 0.0)
        diag = math.hypot(w, h)
        self.brute = n < BRUTE_FORCE_LIMIT or diag == 0.0
        if self.brute:
            return
        self.cell = diag / math.sqrt(n)
        self.nx = max(1, int(math.ceil(w / self.cell)) or 1)
        self.ny = max(1, int(math.ceil(h / self.cell)) or 1)
        cx, cy = self._cell_of(self.locs)
        flat = cx * self.ny + cy
        order = np.argsort(flat, kind="stable")
        self._order = order
        counts = np.bincount(flat, minlength=self.nx * self.ny)
        self._start = np.concatenate([[0], np.cumsum(counts)])

    def _cell_of(self, pts):
        cx = np.clip(((pts[..., 0] - self.x0) // self.cell).astype(np.int64), 0, self.nx - 1)
        cy = np.clip(((pts[..., 1] - self.y0) // self.cell).astype(np.int64), 0, self.ny - 1)
        return cx, cy

    def _bucket(self, i, j):
        c = i * self.ny + j
        return self._order[self._start[c]:self._start[c + 1]]

    def _rank(self, cand: np.ndarray, q: np.ndarray, k: int, exclude: int | None):
        if exclude is not None:
            cand = cand[cand != exclude]
        d = self.locs[cand] - q
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        order = np.lexsort((self.ids[cand], d2))[:k]
        return cand[order], d2[order]

    def query(self, q, k: int, exclude: int | None = None) -> np.ndarray:
        """Row indices of the k nearest points to ``q`` (excluding row ``exclude``)."""
        q = np.asarray(q, dtype=np.float64)
        avail = len(self.locs) - (exclude is not None)
        if k > avail:
            raise DataError(f"requested {k} neighbors but only {avail} points are available")
        if self.brute:
            return self._rank(np.arange(len(self.locs)), q, k, exclude)[0]
        cx, cy = (int(v) for v in self._cell_of(q))
        # Distance from q to the outside of its own cell; any point in ring r+1
        # or beyond is at least r*cell + margin away.
        margin = min(
            q[0] - (self.x0 + cx * self.cell), self.x0 + (cx + 1) * self.cell - q[0],
            q[1] - (self.y0 + cy * self.cell), self.y0 + (cy + 1) * self.cell - q[1],
        )
        margin = max(margin, 0.0)
        max_ring = max(cx, self.nx - 1 - cx, cy, self.ny - 1 - cy)
        parts = []
        got = 0
        r = 0
        while True:
            for i in range(cx - r, cx + r + 1):
                if i < 0 or i >= self.nx:
                    continue
                if abs(i - cx) == r:
                    js = range(cy - r, cy + r + 1)
                else:
                    js = (cy - r, cy + r)
                for j in js:
                    if 0 <= j < self.ny:
                        b = self._bucket(i, j)
                        if len(b):
                            parts.append(b)
                            got += len(b)
            if r >= max_ring:
                break
            if got - (exclude is not None) >= k:
                cand = np.concatenate(parts)
                _, d2 = self._rank(cand, q, k, exclude)
                bound = r * self.cell + margin
                if d2[-1] < bound * bound * (1.0 - 1e-12):
                    break
            r += 1
        return self._rank(np.concatenate(parts), q, k, exclude)[0]


def brute_force_knn(locs: np.ndarray, ids: np.ndarray, center: int, k: int) -> np.ndarray:
    d = locs - locs[center]
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    order = np.lexsort((ids, d2))
    order = order[order != center]
    return order[:k]


def knn_context(ds: Dataset, center_id: int, n: int) -> ContextNeighborhood:
    if n >= len(ds):
        raise DataError(f"context size {n} must be smaller than the dataset ({len(ds)} points)")
    if center_id not in ds.index_of:
        raise DataError(f"unknown point id {center_id}")
    c = ds.index_of[center_id]
    rows = ds.spatial_index.query(ds.locs[c], n, exclude=c)
    return ContextNeighborhood(
        center_id=center_id,
        neighbor_ids=tuple(int(i) for i in ds.ids[rows]),
        displacements=ds.locs[c] - ds.locs[rows],
    )


def knn_table(ds: Dataset, n: int) -> np.ndarray:
    """[|P|, n] row indices of every point's n nearest neighbors."""
    if n >= len(ds):
        raise DataError(f"context size {n} must be smaller than the dataset ({len(ds)} points)")
    index = ds.spatial_index
    return np.stack([index.query(ds.locs[i], n, exclude=i) for i in range(len(ds))])


# --------------------------------------------------------------------------
# Synthetic point processes


@dataclass(frozen=True)
class Poisson:
    intensity: float
    type: str

    def __post_init__(self):
        _positive(intensity=self.intensity)


@dataclass(frozen=True)
class MaternCluster:
    parent_intensity: float
    radius: float
    mean_offspring: float
    type: str

    def __post_init__(self):
        _positive(parent_intensity=self.parent_intensity, radius=self.radius,
                  mean_offspring=self.mean_offspring)


@dataclass(frozen=True)
class HardCore:
    intensity: float
    min_distance: float
    type: str

    def __post_init__(self):
        _positive(intensity=self.intensity, min_distance=self.min_distance)


ProcessSpec = Poisson | MaternCluster | HardCore

_PROCESS_KINDS = {"poisson": Poisson, "matern_cluster": MaternCluster, "hardcore": HardCore}


def _positive(**values):
    for k, v in values.items():
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{k} must be positive, got {v!r}")


def process_from_dict(d: dict) -> ProcessSpec:
    d = dict(d)
    kind = d.pop("process", None)
    if kind not in _PROCESS_KINDS:
        raise ConfigError(f"unknown process {kind!r}; expected one of {sorted(_PROCESS_KINDS)}")
    cls = _PROCESS_KINDS[kind]
    allowed = set(cls.__dataclass_fields__)
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{kind}: unknown keys {sorted(extra)}")
    missing = allowed - set(d)
    if missing:
        raise ConfigError(f"{kind}: missing keys {sorted(missing)}")
    return cls(**d)


def process_to_dict(spec: ProcessSpec) -> dict:
    kind = {v: k for k, v in _PROCESS_KINDS.items()}[type(spec)]
    return {"process": kind, **spec.__dict__}


def _uniform_in_box(rng, n, bbox):
    x0, y0, x1, y1 = bbox
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])


def _inside(pts, bbox):
    x0, y0, x1, y1 = bbox
    return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def _greedy_thin(pts: np.ndarray, h: float) -> np.ndarray:
    """Keep points in order, dropping any within ``h`` of an already-kept point."""
    if len(pts) == 0:
        return pts
    buckets: dict[tuple[int, int], list[int]] = {}
    kept = []
    h2 = h * h
    for i, (x, y) in enumerate(pts):
        cx, cy = int(math.floor(x / h)), int(math.floor(y / h))
        ok = True
        for a in (cx - 1, cx, cx + 1):
            for b in (cy - 1, cy, cy + 1):
                for j in buckets.get((a, b), ()):
                    dx, dy = x - pts[j, 0], y - pts[j, 1]
                    if dx * dx + dy * dy < h2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            buckets.setdefault((cx, cy), []).append(i)
    return pts[kept]


def sample_process(spec: ProcessSpec, bbox: BBox, rng: np.random.Generator) -> np.ndarray:
    """Locations drawn from one process inside ``bbox``."""
    area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
    if isinstance(spec, Poisson):
        return _uniform_in_box(rng, rng.poisson(spec.intensity * area), bbox)
    if isinstance(spec, MaternCluster):
        parents = _uniform_in_box(rng, rng.poisson(spec.parent_intensity * area), bbox)
        counts = rng.poisson(spec.mean_offspring, len(parents))
        total = int(counts.sum())
        centers = np.repeat(parents, counts, axis=0)
        r = spec.radius * np.sqrt(rng.uniform(0.0, 1.0, total))
        a = rng.uniform(0.0, 2 * np.pi, total)
        kids = centers + np.column_stack([r * np.cos(a), r * np.sin(a)])
        # Offspring outside the window are not observed.
        return kids[_inside(kids, bbox)]
    if isinstance(spec, HardCore):
        base = _uniform_in_box(rng, rng.poisson(spec.intensity * area), bbox)
        return _greedy_thin(base, spec.min_distance)
    raise ConfigError(f"unsupported process spec {spec!r}")


def generate_synthetic(specs: ProcessSpec | Sequence[ProcessSpec], bbox: BBox,
                       seed: int = 0) -> Dataset:
    """Superpose independent processes (one type each) over ``bbox``.

    Ids are assigned 0.. in generation order.
    """
    if not isinstance(specs, (list, tuple)):
        specs = [specs]
    if not specs:
        raise ConfigError("synthetic spec needs at least one component")
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise ConfigError(f"degenerate bbox {bbox}")
    bbox = (x0, y0, x1, y1)
    rng = np.random.default_rng(seed)
    vocab = TypeVocabulary()
    points = []
    for spec in specs:
        t = vocab.add(spec.type)
        for loc in sample_process(spec, bbox, rng):
            points.append(PointFeature(len(points), (float(loc[0]), float(loc[1])), (t,)))
    if not points:
        raise DataError("synthetic generation produced no points")
    return Dataset(tuple(points), vocab, bbox)
