"""Point-pattern statistics and encoder introspection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .poi_data import Dataset

REFERENCE_AREA = 1e6  # m^2; one square kilometre
DEFAULT_RADII = np.arange(1.0, 3001.0, 1.0)


@dataclass(frozen=True)
class RipleyCurve:
    radii: np.ndarray
    values: np.ndarray
    type_id: int
    density: float

    def to_csv(self, header: str = "r,value") -> str:
        rows = [header] + [f"{r:.17g},{v:.17g}" for r, v in zip(self.radii, self.values)]
        return "\n".join(rows) + "\n"


def ripley_k_points(pts: np.ndarray, radii, area: float) -> np.ndarray:
    """K(r) = A / (m (m - 1)) * #{ordered pairs i != j with d_ij <= r}; no edge correction."""
    pts = np.asarray(pts, dtype=np.float64)
    m = len(pts)
    if m < 2:
        raise DataError(f"Ripley's K needs at least 2 points, got {m}")
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(np.diff(radii) < 0):
        raise ValueError("radii must be ascending")
    tree = cKDTree(pts)
    counts = tree.count_neighbors(tree, radii).astype(np.float64) - m  # drop self pairs
    return area * counts / (m * (m - 1))


def ripley_k(ds: Dataset, type_id: int, radii=DEFAULT_RADII, area: float | None = None) -> RipleyCurve:
    area = ds.area if area is None else area
    if not area > 0:
        raise DataError("study area must be positive")
    rows = ds.points_of_type(type_id)
    if len(rows) < 2:
        raise DataError(f"type {type_id} has {len(rows)} points; Ripley's K needs at least 2")
    radii = np.asarray(radii, dtype=np.float64)
    k = ripley_k_points(ds.locs[rows], radii, area)
    return RipleyCurve(radii, k, type_id, len(rows) / area)


def renormalized_curve(curve: RipleyCurve, reference_area: float = REFERENCE_AREA) -> RipleyCurve:
    """Expected same-type count within r relative to the CSR count in ``reference_area``.

    lambda * K(r) / (lambda * reference_area) reduces to K(r) / reference_area.
    """
    if not curve.density > 0:
        raise DataError("renormalization needs a positive density")
    c0 = curve.density * reference_area
    return RipleyCurve(curve.radii, curve.density * curve.values / c0, curve.type_id, curve.density)


def radius_at_threshold(curve: RipleyCurve, y: float) -> float | None:
    """Smallest r where the curve reaches ``y``, interpolated between tabulated radii."""
    if not y > 0:
        raise ValueError("threshold must be positive")
    v = np.asarray(curve.values)
    hit = np.flatnonzero(v >= y)
    if hit.size == 0:
        return None
    i = int(hit[0])
    if i == 0:
        return float(curve.radii[0])
    r0, r1 = curve.radii[i - 1], curve.radii[i]
    v0, v1 = v[i - 1], v[i]
    return float(r0 + (y - v0) * (r1 - r0) / (v1 - v0))


class DistributionGroup(enum.Enum):
    CLUSTERED = "clustered"
    MIDDLE = "middle"
    EVEN = "even"


def group_for_radius(r: float | None, r1: float = 100.0, r2: float = 200.0) -> DistributionGroup:
    if r is None or r >= r2:
        return DistributionGroup.EVEN
    if r <= r1:
        return DistributionGroup.CLUSTERED
    return DistributionGroup.MIDDLE


@dataclass(frozen=True)
class GroupAssignment:
    type_id: int
    radius: float | None
    group: DistributionGroup


def classify_groups(ds: Dataset, thresholds=(100.0, 200.0), y: float = 3.0, radii=DEFAULT_RADII,
                    reference_area: float = REFERENCE_AREA,
                    skip_sparse: bool = False) -> dict[int, GroupAssignment]:
    """Group each type by where its renormalized K curve first reaches ``y``.

    Types never reaching ``y`` are Even. With ``skip_sparse`` types having
    fewer than two points are left out instead of raising.
    """
    r1, r2 = thresholds
    out = {}
    for t in range(len(ds.vocab)):
        if skip_sparse and len(ds.points_of_type(t)) < 2:
            continue
        curve = renormalized_curve(ripley_k(ds, t, radii), reference_area)
        r = radius_at_threshold(curve, y)
        out[t] = GroupAssignment(t, r, group_for_radius(r, r1, r2))
    return out


# --------------------------------------------------------------------------
# Response maps


@dataclass(frozen=True)
class ResponseGrid:
    """``maps[i]`` is an [H, W] grid for ``neurons[i]``; row 0 lies on the max-y edge."""

    width: int
    height: int
    extent: tuple[float, float, float, float]
    neurons: tuple[int, ...]
    maps: np.ndarray


def lattice(bbox, resolution) -> np.ndarray:
    """[H, W, 2] coordinates; row 0 at max y, column 0 at min x."""
    W, H = (resolution, resolution) if np.isscalar(resolution) else resolution
    W, H = int(W), int(H)
    if W < 2 or H < 2:
        raise ValueError(f"resolution must be at least 2 in each axis, got {(W, H)}")
    x0, y0, x1, y1 = bbox
    xs = np.linspace(x0, x1, W)
    ys = np.linspace(y1, y0, H)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _embed(encoder, coords: np.ndarray) -> np.ndarray:
    if hasattr(encoder, "eval"):
        encoder.eval()
    flat = coords.reshape(-1, 2)
    out = [np.asarray(encoder(flat[i:i + 4096])) for i in range(0, len(flat), 4096)]
    return np.concatenate(out)


def response_map(encoder: Callable, neurons: Sequence[int], bbox, resolution) -> ResponseGrid:
    """Evaluate ``encoder`` (coords [B, 2] -> [B, D]) on a lattice and keep selected outputs."""
    grid = lattice(bbox, resolution)
    H, W = grid.shape[:2]
    emb = _embed(encoder, grid)
    D = emb.shape[1]
    neurons = tuple(int(n) for n in neurons)
    bad = [n for n in neurons if not 0 <= n < D]
    if bad:
        raise ValueError(f"neuron indices {bad} out of range for {D} outputs")
    maps = emb[:, list(neurons)].T.reshape(len(neurons), H, W)
    if not np.all(np.isfinite(maps)):
        raise DataError("encoder produced non-finite activations")
    return ResponseGrid(W, H, tuple(float(v) for v in bbox), neurons, maps)


# --------------------------------------------------------------------------
# Agglomerative clustering, average linkage on cosine distance


def cosine_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    U = X / np.maximum(n, 1e-12)
    D = 1.0 - U @ U.T
    return (D + D.T) / 2.0


def _partition_labels(rep: np.ndarray) -> np.ndarray:
    """Relabel representatives 0.. in order of first appearance."""
    _, first, inv = np.unique(rep, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv]


def average_linkage(X: np.ndarray, k: int) -> np.ndarray:
    """Cut an average-linkage dendrogram at ``k`` clusters.

    Clusters are named by their lowest member index; on equal distances the
    lexicographically smallest (i, j) pair merges first.
    """
    N = len(X)
    if not 1 <= k <= N:
        raise ValueError(f"need 1 <= k <= {N}, got {k}")
    D = cosine_distances(X)
    np.fill_diagonal(D, np.inf)
    size = np.ones(N)
    rep = np.arange(N)
    rowmin = np.full(N, np.inf)
    rowarg = np.full(N, -1)

    def refresh(r):
        if r + 1 < N:
            seg = D[r, r + 1:]
            a = int(np.argmin(seg))
            rowmin[r], rowarg[r] = seg[a], r + 1 + a
        else:
            rowmin[r], rowarg[r] = np.inf, -1

    for r in range(N):
        refresh(r)
    clusters = N
    while clusters > k:
        i = int(np.argmin(rowmin))
        j = int(rowarg[i])
        new = (size[i] * D[i] + size[j] * D[j]) / (size[i] + size[j])
        D[i, :] = new
        D[:, i] = new
        D[i, i] = np.inf
        D[j, :] = np.inf
        D[:, j] = np.inf
        size[i] += size[j]
        rep[rep == j] = i
        rowmin[j], rowarg[j] = np.inf, -1
        clusters -= 1
        refresh(i)
        # Rows above i see column i change and column j vanish.
        upper = np.arange(i)
        stale = upper[(rowarg[upper] == i) | (rowarg[upper] == j)]
        better = upper[(new[upper] < rowmin[upper])
                       | ((new[upper] == rowmin[upper]) & (i < rowarg[upper]))]
        rowmin[better], rowarg[better] = new[better], i
        for r in np.setdiff1d(stale, better):
            refresh(int(r))
        mid = np.arange(i + 1, j)
        for r in mid[rowarg[mid] == j]:
            refresh(int(r))
    return _partition_labels(rep)


def embedding_cluster_map(encoder: Callable, bbox, resolution, k: int) -> np.ndarray:
    """[H, W] cluster labels of lattice embeddings."""
    grid = lattice(bbox, resolution)
    H, W = grid.shape[:2]
    if H * W > 65536:
        raise ValueError(f"lattice of {H * W} points exceeds the 65536 limit")
    if k < 2:
        raise ValueError("need at least 2 clusters")
    emb = _embed(encoder, grid)
    return average_linkage(emb, k).reshape(H, W)


# --------------------------------------------------------------------------
# Exports


def grid_to_csv(grid: np.ndarray) -> str:
    grid = np.asarray(grid)
    return "".join(",".join(format(v, ".17g") for v in row) + "\n" for row in grid)


def grid_to_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary PGM, min-max scaled; a constant grid maps to 128."""
    g = np.asarray(grid, dtype=np.float64)
    H, W = g.shape
    lo, hi = g.min(), g.max()
    if hi > lo:
        px = np.rint((g - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        px = np.full(g.shape, 128, dtype=np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + px.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)


def export_grid(grid: np.ndarray, path: str | Path, fmt: str = "csv"):
    path = Path(path)
    if fmt == "csv":
        path.write_text(grid_to_csv(grid), encoding="utf-8")
    elif fmt == "pgm":
        path.write_bytes(grid_to_pgm(grid))
    else:
        raise ValueError(f"unknown grid format {fmt!r}; expected csv or pgm")
