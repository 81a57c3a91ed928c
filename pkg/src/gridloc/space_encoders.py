"""Raw, parameter-free location featurizers.

Every function accepts a single point of shape ``(2,)`` or a batch of shape
``(..., 2)`` and maps the trailing axis to its feature vector.

Multi-scale layouts are scale-major. Within a scale, ``pe_theory`` lists the
three hexagonal directions with ``[cos, sin]`` per direction, ``pe_grid`` lists
the two coordinate axes with ``[cos, sin]`` per axis, and ``pe_hexa`` lists the
two axes with three phase-shifted sines per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SQRT3_2 = math.sqrt(3.0) / 2.0

# Unit vectors 120 degrees apart; rows sum to zero.
HEX_DIRECTIONS = np.array([
    [1.0, 0.0],
    [-0.5, SQRT3_2],
    [-0.5, -SQRT3_2],
])


@dataclass(frozen=True)
class ScaleSpec:
    lambda_min: float
    lambda_max: float
    num_scales: int

    def __post_init__(self):
        if not (0 < self.lambda_min <= self.lambda_max):
            raise ConfigError(
                f"need 0 < lambda_min <= lambda_max, got {self.lambda_min}, {self.lambda_max}")
        if int(self.num_scales) != self.num_scales or self.num_scales < 1:
            raise ConfigError(f"num_scales must be a positive integer, got {self.num_scales}")

    @property
    def ratio(self) -> float:
        return self.lambda_max / self.lambda_min

    def divisors(self) -> np.ndarray:
        """lambda_min * g**(s/(S-1)); a single scale uses lambda_min."""
        S = int(self.num_scales)
        if S == 1:
            return np.array([float(self.lambda_min)])
        s = np.arange(S, dtype=np.float64)
        return self.lambda_min * self.ratio ** (s / (S - 1))


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ValueError(f"expected trailing dimension 2, got shape {x.shape}")
    return x


def pe_theory(x, spec: ScaleSpec) -> np.ndarray:
    x = _as_points(x)
    proj = x @ HEX_DIRECTIONS.T                                 # (..., 3)
    phase = proj[..., None, :] / spec.divisors()[:, None]      # (..., S, 3)
    out = np.stack([np.cos(phase), np.sin(phase)], axis=-1)    # (..., S, 3, 2)
    return out.reshape(*x.shape[:-1], 6 * spec.num_scales)


def pe_grid(x, spec: ScaleSpec) -> np.ndarray:
    x = _as_points(x)
    phase = x[..., None, :] / spec.divisors()[:, None]         # (..., S, 2)
    out = np.stack([np.cos(phase), np.sin(phase)], axis=-1)
    return out.reshape(*x.shape[:-1], 4 * spec.num_scales)


_HEXA_SHIFTS = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])


def pe_hexa(x, spec: ScaleSpec) -> np.ndarray:
    x = _as_points(x)
    phase = x[..., None, :] / spec.divisors()[:, None]         # (..., S, 2)
    out = np.sin(phase[..., None] + _HEXA_SHIFTS)              # (..., S, 2, 3)
    return out.reshape(*x.shape[:-1], 6 * spec.num_scales)


def _check_box(box):
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ConfigError(f"degenerate box {box}: every axis needs positive extent")
    return x0, y0, x1, y1


def normalize_box(x, box) -> np.ndarray:
    """Affine map of ``box`` onto [-1, 1]^2. Points outside extrapolate linearly."""
    x = _as_points(x)
    x0, y0, x1, y1 = _check_box(box)
    lo = np.array([x0, y0])
    ext = np.array([x1 - x0, y1 - y0])
    return 2.0 * (x - lo) / ext - 1.0


def wrap_features(x, box) -> np.ndarray:
    """``[sin(pi u1), cos(pi u1), sin(pi u2), cos(pi u2)]`` of the normalized point."""
    u = normalize_box(x, box) * np.pi
    out = np.stack([np.sin(u), np.cos(u)], axis=-1)
    return out.reshape(*u.shape[:-1], 4)


def tile_dims(box, c: float) -> tuple[int, int]:
    if not c > 0:
        raise ConfigError(f"tile cell size must be positive, got {c}")
    x0, y0, x1, y1 = (float(v) for v in box)
    nx = max(1, int(math.ceil((x1 - x0) / c)))
    ny = max(1, int(math.ceil((y1 - y0) / c)))
    return nx, ny


def tile_index(x, box, c: float):
    """Row-major cell id ``iy * nx + ix``; inputs are clamped into the box first."""
    x = _as_points(x)
    nx, ny = tile_dims(box, c)
    x0, y0, x1, y1 = (float(v) for v in box)
    px = np.clip(x[..., 0], x0, x1)
    py = np.clip(x[..., 1], y0, y1)
    ix = np.clip(np.floor((px - x0) / c).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((py - y0) / c).astype(np.int64), 0, ny - 1)
    out = iy * nx + ix
    return int(out) if out.ndim == 0 else out


def _gaussian_kernels(p, anchors, widths) -> np.ndarray:
    p = _as_points(p)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    d = p[..., None, :] - anchors
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]
    return np.exp(-d2 / (2.0 * widths * widths))


def rbf_features(p, anchors, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ConfigError(f"rbf sigma must be positive, got {sigma}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(anchors) < 1:
        raise ConfigError("rbf needs at least one anchor")
    return _gaussian_kernels(p, anchors, np.full(len(anchors), float(sigma)))


def scaled_rbf_features(dx, anchors, sigma: float, beta: float) -> np.ndarray:
    """Gaussian kernels whose width grows with the anchor's distance from the origin."""
    if not sigma > 0:
        raise ConfigError(f"scaled_rbf sigma must be positive, got {sigma}")
    if not beta >= 0:
        raise ConfigError(f"scaled_rbf beta must be non-negative, got {beta}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(anchors) < 1:
        raise ConfigError("scaled_rbf needs at least one anchor")
    widths = float(sigma) + float(beta) * np.hypot(anchors[:, 0], anchors[:, 1])
    return _gaussian_kernels(dx, anchors, widths)


def polar_transform(dx) -> np.ndarray:
    """``[log(|dx| + 1), atan2(dy, dx)]`` with the angle in (-pi, pi] and 0 at the origin."""
    dx = _as_points(dx)
    r = np.log1p(np.hypot(dx[..., 0], dx[..., 1]))
    theta = np.arctan2(dx[..., 1], dx[..., 0])
    theta = np.where(theta <= -np.pi, np.pi, theta)
    theta = np.where((dx[..., 0] == 0) & (dx[..., 1] == 0), 0.0, theta)
    return np.stack([r, theta], axis=-1)


def polar_tile_index(dx, r_max: float, F: int):
    """Cell id ``theta_bin * F + r_bin`` on an F x F grid over (theta, log radius)."""
    if int(F) != F or F < 1:
        raise ConfigError(f"polar_tile F must be a positive integer, got {F}")
    if not r_max > 0:
        raise ConfigError(f"polar_tile r_max must be positive, got {r_max}")
    F = int(F)
    pol = polar_transform(dx)
    r, theta = pol[..., 0], pol[..., 1]
    tb = np.clip(np.floor((theta + np.pi) / (2 * np.pi) * F).astype(np.int64), 0, F - 1)
    rb = np.clip(np.floor(r / math.log1p(r_max) * F).astype(np.int64), 0, F - 1)
    out = tb * F + rb
    return int(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Single-scale grid-cell model used to validate the translation identities.


def random_unitary(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    """Haar-distributed unitary from QR of a complex Gaussian matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def check_unitary(C, tol: float = 1e-8) -> np.ndarray:
    C = np.asarray(C, dtype=np.complex128)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"C must be square, got shape {C.shape}")
    err = np.abs(C.conj().T @ C - np.eye(C.shape[0])).max()
    if err > tol:
        raise ValueError(f"C is not unitary (max |C*C - I| = {err:.3e})")
    return C


@dataclass(frozen=True)
class GridCellModel:
    """phi(x) = C Psi(x), Psi_j(x) = exp(i <a_j, x>), |a_j| = 2 sqrt(alpha)."""

    alpha: float
    C: np.ndarray

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "C", check_unitary(self.C))

    @property
    def directions(self) -> np.ndarray:
        return 2.0 * math.sqrt(self.alpha) * HEX_DIRECTIONS

    def psi(self, x) -> np.ndarray:
        return np.exp(1j * (_as_points(x) @ self.directions.T))

    def phi(self, x) -> np.ndarray:
        return self.psi(x) @ self.C.T

    def transition(self, dx) -> np.ndarray:
        """M(dx) = C diag(Psi(dx)) C*."""
        return (self.C * self.psi(dx)) @ self.C.conj().T

    def translate(self, phi, dx) -> np.ndarray:
        return self.transition(dx) @ np.asarray(phi)


def grid_cell_phi(x, alpha: float, C) -> np.ndarray:
    return GridCellModel(alpha, C).phi(x)


def grid_cell_translate(phi, dx, alpha: float, C) -> np.ndarray:
    return GridCellModel(alpha, C).translate(phi, dx)
