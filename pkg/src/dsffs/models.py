"""Statistical weights, the q-GGMRF prior and the MAP cost."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .projector import SparseBlock, VoxelGrid

MU_WATER = 0.02  # mm^-1


def hu_to_mu(hu, mu_water: float = MU_WATER):
    return mu_water * (1.0 + np.asarray(hu, dtype=float) / 1000.0)


def mu_to_hu(mu, mu_water: float = MU_WATER):
    return 1000.0 * (np.asarray(mu, dtype=float) / mu_water - 1.0)


@dataclass
class Volume:
    grid: VoxelGrid
    values: np.ndarray
    unit: str = "HU"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume contains non-finite values")
        if self.unit not in ("HU", "mm^-1"):
            raise ValueError(f"unknown volume unit {self.unit!r}")

    def to_hu(self, mu_water: float = MU_WATER) -> "Volume":
        if self.unit == "HU":
            return self
        return Volume(self.grid, mu_to_hu(self.values, mu_water), "HU")

    def to_mu(self, mu_water: float = MU_WATER) -> "Volume":
        if self.unit == "mm^-1":
            return self
        return Volume(self.grid, hu_to_mu(self.values, mu_water), "mm^-1")


@dataclass
class WeightDiag:
    values: np.ndarray
    n_clamped: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("weights must be finite and nonnegative")


def statistical_weights(
    counts=None,
    sinogram=None,
    sigma_e2: float = 0.0,
    I0: float = 1.0,
    count_floor: float = 1.0,
    normalize: bool = True,
) -> WeightDiag:
    """Inverse-variance weights of post-log data.

    With pre-log ``counts`` the weight is ``lam**2 / (lam + sigma_e2)``;
    with only a ``sinogram`` it is ``I0 * exp(-y)`` (no electronic noise).
    """
    n_clamped = 0
    if counts is not None:
        lam = np.array(counts, dtype=float)
        low = ~(lam >= count_floor)
        n_clamped = int(np.count_nonzero(low))
        lam[low] = count_floor
        d = lam * lam / (lam + sigma_e2)
    elif sinogram is not None:
        y = np.asarray(sinogram, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("sinogram contains non-finite values")
        d = I0 * np.exp(-y)
    else:
        raise ValueError("need counts or a sinogram")
    if normalize:
        top = d.max() if d.size else 0.0
        if top > 0:
            d = d / top
    return WeightDiag(d, n_clamped)


def _half_offsets() -> list[tuple[int, int, int]]:
    """13 neighbor offsets (dz, dy, dx), one per unordered neighbor pair direction."""
    out = []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off > (0, 0, 0):
            out.append(off)
    return out


HALF_OFFSETS = _half_offsets()


def inverse_distance_weights() -> np.ndarray:
    """Weights of the 13 half-neighborhood offsets; the full 26 sum to 1."""
    w = np.array([1.0 / math.sqrt(sum(o * o for o in off)) for off in HALF_OFFSETS])
    return w / (2.0 * w.sum())


@dataclass
class PriorParams:
    """q-GGMRF prior. ``c`` is in the units of the volume it is applied to."""

    strength: float = 1.0
    p: float = 2.0
    q: float = 1.2
    c: float = 10.0
    weights: np.ndarray = field(default_factory=inverse_distance_weights)

    def __post_init__(self):
        if not (1.0 <= self.q <= self.p <= 2.0):
            raise ValueError(f"need 1 <= q <= p <= 2 for convexity, got p={self.p}, q={self.q}")
        if self.c <= 0 or self.strength < 0:
            raise ValueError("need c > 0 and strength >= 0")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (13,) or np.any(self.weights < 0):
            raise ValueError("weights: 13 nonnegative half-neighborhood values")
        if not math.isclose(2.0 * self.weights.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("neighborhood weights must sum to 1 over all 26 neighbors")

    @property
    def is_quadratic(self) -> bool:
        return self.p == 2.0 and self.q == 2.0

    def scaled(self, factor: float) -> "PriorParams":
        """Same prior for a volume whose values are multiplied by ``factor``."""
        return PriorParams(self.strength, self.p, self.q, self.c * factor, self.weights.copy())


def potential(delta, p: float, q: float, c: float):
    t = np.abs(np.asarray(delta, dtype=float)) / c
    return t**p / (1.0 + t ** (p - q))


def potential_derivative(delta, p: float, q: float, c: float):
    delta = np.asarray(delta, dtype=float)
    t = np.abs(delta) / c
    tpq = t ** (p - q)
    with np.errstate(invalid="ignore", divide="ignore"):
        mag = t ** (p - 1.0) * (p + q * tpq) / (1.0 + tpq) ** 2 / c
    return np.where(delta == 0.0, 0.0, np.sign(delta) * mag)


def _pairs(shape, off):
    """Slices (a, b) selecting every voxel pair separated by ``off``."""
    sa, sb = [], []
    for n, o in zip(shape, off):
        if o >= 0:
            sa.append(slice(o, n))
            sb.append(slice(0, n - o))
        else:
            sa.append(slice(0, n + o))
            sb.append(slice(-o, n))
    return tuple(sa), tuple(sb)


def prior_cost(volume, params: PriorParams) -> float:
    x = np.asarray(volume, dtype=float)
    if x.ndim != 3:
        raise ValueError("prior needs a 3-D volume")
    total = 0.0
    for w, off in zip(params.weights, HALF_OFFSETS):
        a, b = _pairs(x.shape, off)
        total += w * potential(x[a] - x[b], params.p, params.q, params.c).sum()
    # each unordered pair appears twice in the neighborhood sum
    return float(2.0 * params.strength * total)


def prior_gradient(volume, params: PriorParams) -> np.ndarray:
    x = np.asarray(volume, dtype=float)
    g = np.zeros_like(x)
    for w, off in zip(params.weights, HALF_OFFSETS):
        a, b = _pairs(x.shape, off)
        d = 2.0 * params.strength * w * potential_derivative(x[a] - x[b], params.p, params.q, params.c)
        g[a] += d
        g[b] -= d
    return g


def quadratic_prior_hessian(shape, params: PriorParams) -> sp.csr_matrix:
    """Hessian of the prior when p = q = 2 (a weighted graph Laplacian)."""
    if not params.is_quadratic:
        raise ValueError("Hessian is constant only for p = q = 2")
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    rows, cols, vals = [], [], []
    for w, off in zip(params.weights, HALF_OFFSETS):
        a, b = _pairs(shape, off)
        ia, ib = idx[a].ravel(), idx[b].ravel()
        k = 2.0 * params.strength * w / params.c**2
        rows += [ia, ib, ia, ib]
        cols += [ia, ib, ib, ia]
        vals += [np.full(ia.size, k), np.full(ia.size, k), np.full(ia.size, -k), np.full(ia.size, -k)]
    n = idx.size
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@dataclass
class DataBlock:
    """A system block with its measured sinogram and weights."""

    block: SparseBlock
    sinogram: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.sinogram = np.asarray(self.sinogram, dtype=float).ravel()
        w = self.weights.values if isinstance(self.weights, WeightDiag) else self.weights
        self.weights = np.asarray(w, dtype=float).ravel()
        m = self.block.shape[0]
        if self.sinogram.size != m or self.weights.size != m:
            raise ValueError(
                f"block {self.block.block_index}: sinogram/weights size "
                f"{self.sinogram.size}/{self.weights.size} != {m} rows"
            )


def as_data_blocks(blocks: Iterable) -> list[DataBlock]:
    return [b if isinstance(b, DataBlock) else DataBlock(*b) for b in blocks]


def data_cost(volume, blocks: Sequence) -> float:
    x = np.asarray(volume, dtype=float).ravel()
    total = 0.0
    for db in as_data_blocks(blocks):
        if x.size != db.block.shape[1]:
            raise ValueError(f"volume has {x.size} voxels, block expects {db.block.shape[1]}")
        r = db.sinogram - db.block.matrix @ x
        total += 0.5 * float(np.dot(db.weights * r, r))
    return total


def negative_log_posterior(volume, blocks: Sequence, params: PriorParams | None) -> float:
    x = np.asarray(volume, dtype=float)
    cost = data_cost(x, blocks)
    if params is not None and params.strength > 0:
        cost += prior_cost(x, params)
    return cost


def cost_gradient(volume, blocks: Sequence, params: PriorParams | None) -> np.ndarray:
    x = np.asarray(volume, dtype=float)
    g = np.zeros(x.size)
    for db in as_data_blocks(blocks):
        r = db.sinogram - db.block.matrix @ x.ravel()
        g -= db.block.matrix.T @ (db.weights * r)
    g = g.reshape(x.shape)
    if params is not None and params.strength > 0:
        g += prior_gradient(x, params)
    return g
