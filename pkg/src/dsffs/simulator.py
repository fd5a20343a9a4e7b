"""Digital phantoms, analytic projection oracles and noisy scan synthesis."""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .geometry import ViewSchedule
from .models import MU_WATER, Volume, hu_to_mu
from .projector import SparseBlock, VoxelGrid, build_system_block, forward_project


@dataclass(frozen=True)
class Cylinder:
    """Cylinder with its axis along z."""

    center: tuple[float, float, float]
    radius: float
    height: float
    value: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder radius and height must be positive")

    def bounds(self):
        cx, cy, cz = self.center
        r, h = self.radius, self.height / 2.0
        return (cx - r, cx + r), (cy - r, cy + r), (cz - h, cz + h)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    value: float

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("box dimensions must be positive")

    def bounds(self):
        return tuple((c - s / 2.0, c + s / 2.0) for c, s in zip(self.center, self.size))


@dataclass(frozen=True)
class BarPattern:
    """``n_bars`` bars at spatial frequency ``frequency`` (line pairs per mm).

    Each bar is half a period wide; bars repeat along x (``orientation="x"``)
    or y and extend ``bar_length`` in the other in-plane direction.
    """

    center: tuple[float, float, float]
    frequency: float
    n_bars: int
    bar_length: float
    height: float
    value: float
    orientation: str = "x"

    def __post_init__(self):
        if self.frequency <= 0 or self.n_bars < 1 or self.bar_length <= 0 or self.height <= 0:
            raise ValueError("bar pattern needs positive frequency, length, height and >= 1 bar")
        if self.orientation not in ("x", "y"):
            raise ValueError("orientation is 'x' or 'y'")

    @property
    def period(self) -> float:
        return 1.0 / self.frequency

    def boxes(self) -> list[Box]:
        w = self.period / 2.0
        first = -(self.n_bars - 1) / 2.0 * self.period
        out = []
        cx, cy, cz = self.center
        for i in range(self.n_bars):
            off = first + i * self.period
            if self.orientation == "x":
                out.append(Box((cx + off, cy, cz), (w, self.bar_length, self.height), self.value))
            else:
                out.append(Box((cx, cy + off, cz), (self.bar_length, w, self.height), self.value))
        return out

    def bounds(self):
        return _union_bounds([b.bounds() for b in self.boxes()])


@dataclass(frozen=True)
class WireRamp:
    """Thin square wires along x, each stepped in y by ``spacing`` and in z by ``z_step``.

    A stand-in for cross-plane resolution wires; the layout is configurable
    rather than a copy of any commercial phantom.
    """

    center: tuple[float, float, float]
    n_wires: int
    spacing: float
    z_step: float
    wire_width: float
    length: float
    value: float

    def __post_init__(self):
        if self.n_wires < 1 or self.wire_width <= 0 or self.length <= 0:
            raise ValueError("wire ramp needs >= 1 wire and positive wire size")

    def boxes(self) -> list[Box]:
        cx, cy, cz = self.center
        mid = (self.n_wires - 1) / 2.0
        return [
            Box(
                (cx, cy + (i - mid) * self.spacing, cz + (i - mid) * self.z_step),
                (self.length, self.wire_width, self.wire_width),
                self.value,
            )
            for i in range(self.n_wires)
        ]

    def bounds(self):
        return _union_bounds([b.bounds() for b in self.boxes()])


Primitive = Union[Cylinder, Box, BarPattern, WireRamp]


def _union_bounds(bounds):
    return tuple((min(b[a][0] for b in bounds), max(b[a][1] for b in bounds)) for a in range(3))


@dataclass
class PhantomSpec:
    primitives: list = field(default_factory=list)
    background: float = -1000.0


def _overlap_fraction(centers, pitch, lo, hi):
    """Fraction of each voxel interval [c - pitch/2, c + pitch/2] inside [lo, hi]."""
    a = np.maximum(centers - pitch / 2.0, lo)
    b = np.minimum(centers + pitch / 2.0, hi)
    return np.clip(b - a, 0.0, None) / pitch


def _grid_extent(grid: VoxelGrid):
    x, y, z = grid.axes()
    h = grid.delta_xy / 2.0
    return (x[0] - h, x[-1] + h), (y[0] - h, y[-1] + h), (z[0] - grid.delta_z / 2.0, z[-1] + grid.delta_z / 2.0)


def _disc_fraction(xc, yc, cx, cy, r, pitch):
    """Exact area fraction of each voxel square covered by a disc (shape (ny, nx)).

    Over x the covered y-length is piecewise one of a constant, +-h(x) plus
    a constant, or 2 h(x), with h = sqrt(r^2 - x^2). Splitting each voxel at
    the x values where h meets the voxel's y edges leaves pieces with a
    closed-form integral.
    """
    x0 = (xc - cx - pitch / 2.0)[None, :]
    x1 = x0 + pitch
    y0 = (yc - cy - pitch / 2.0)[:, None]
    y1 = y0 + pitch
    shape = (yc.size, xc.size)
    x0, x1 = np.broadcast_to(x0, shape), np.broadcast_to(x1, shape)
    y0, y1 = np.broadcast_to(y0, shape), np.broadcast_to(y1, shape)

    def cut(y):
        return np.sqrt(np.clip(r * r - y * y, 0.0, None))

    k0, k1 = cut(y0), cut(y1)
    pts = np.stack([x0, x1, -k0, k0, -k1, k1, np.full(shape, -r), np.full(shape, r)], axis=-1)
    pts = np.sort(np.clip(pts, x0[..., None], x1[..., None]), axis=-1)

    def G(x):
        x = np.clip(x, -r, r)
        return 0.5 * (x * np.sqrt(r * r - x * x) + r * r * np.arcsin(x / r))

    area = np.zeros(shape)
    for a, b in zip(np.moveaxis(pts[..., :-1], -1, 0), np.moveaxis(pts[..., 1:], -1, 0)):
        width = b - a
        mid = 0.5 * (a + b)
        h = np.sqrt(np.clip(r * r - mid * mid, 0.0, None))
        top_is_h = h < y1
        bot_is_h = -h > y0
        live = (width > 0) & (np.minimum(h, y1) > np.maximum(-h, y0))
        int_h = G(b) - G(a)
        top = np.where(top_is_h, int_h, y1 * width)
        bot = np.where(bot_is_h, -int_h, y0 * width)
        area += np.where(live, top - bot, 0.0)
    return np.clip(area / (pitch * pitch), 0.0, 1.0)


def _coverage(prim, grid: VoxelGrid) -> np.ndarray:
    x, y, z = grid.axes()
    if isinstance(prim, Box):
        (x0, x1), (y0, y1), (z0, z1) = prim.bounds()
        fx = _overlap_fraction(x, grid.delta_xy, x0, x1)
        fy = _overlap_fraction(y, grid.delta_xy, y0, y1)
        fz = _overlap_fraction(z, grid.delta_z, z0, z1)
        return fz[:, None, None] * fy[None, :, None] * fx[None, None, :]
    if isinstance(prim, Cylinder):
        (_, _), (_, _), (z0, z1) = prim.bounds()
        fz = _overlap_fraction(z, grid.delta_z, z0, z1)
        fxy = _disc_fraction(x, y, prim.center[0], prim.center[1], prim.radius, grid.delta_xy)
        return fz[:, None, None] * fxy[None, :, :]
    raise TypeError(f"cannot voxelize {type(prim).__name__}")


def _flatten(primitives) -> list:
    out = []
    for p in primitives:
        if isinstance(p, (BarPattern, WireRamp)):
            out.extend(p.boxes())
        else:
            out.append(p)
    return out


def build_phantom(spec: PhantomSpec, grid: VoxelGrid) -> Volume:
    """Voxelize a phantom in HU; later primitives override earlier ones.

    Every voxel holds its exact partial-volume mix: boxes are separable and
    cylinder cross-sections use the closed-form disc/square overlap.
    """
    vol = np.full(grid.shape, float(spec.background))
    ext = _grid_extent(grid)
    for prim in spec.primitives:
        b = prim.bounds()
        if any(b[a][0] < ext[a][0] - 1e-9 or b[a][1] > ext[a][1] + 1e-9 for a in range(3)):
            warnings.warn(f"{type(prim).__name__} extends outside the grid; it is clipped", stacklevel=2)
        for part in _flatten([prim]):
            frac = _coverage(part, grid)
            vol = vol + frac * (part.value - vol)
    return Volume(grid, vol, "HU")


def analytic_cylinder_projection(cylinder: Cylinder, source, unit_center, attenuation: float = 1.0) -> float:
    """Exact length of the segment source -> unit_center inside the cylinder, times ``attenuation``."""
    s = np.asarray(source, dtype=float)
    u = np.asarray(unit_center, dtype=float)
    d = u - s
    seg = float(np.linalg.norm(d))
    if seg == 0.0:
        return 0.0
    cx, cy, cz = cylinder.center
    fx, fy = s[0] - cx, s[1] - cy
    a = d[0] ** 2 + d[1] ** 2
    if a == 0.0:
        # ray parallel to the axis
        if fx * fx + fy * fy >= cylinder.radius**2:
            return 0.0
        t_lo, t_hi = 0.0, 1.0
    else:
        b = 2.0 * (fx * d[0] + fy * d[1])
        c = fx * fx + fy * fy - cylinder.radius**2
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            return 0.0
        sq = math.sqrt(disc)
        t_lo, t_hi = (-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)
    z0, z1 = cz - cylinder.height / 2.0, cz + cylinder.height / 2.0
    if d[2] != 0.0:
        ta, tb = (z0 - s[2]) / d[2], (z1 - s[2]) / d[2]
        t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
    elif not z0 <= s[2] <= z1:
        return 0.0
    t_lo, t_hi = max(t_lo, 0.0), min(t_hi, 1.0)
    if t_hi <= t_lo:
        return 0.0
    return (t_hi - t_lo) * seg * attenuation


@dataclass
class Dose:
    I0: float = 1e5
    sigma_e2: float = 0.0
    noise: bool = True
    count_floor: float = 1.0

    def __post_init__(self):
        if self.I0 <= 0:
            raise ValueError("I0 must be positive")
        if self.sigma_e2 < 0:
            raise ValueError("sigma_e2 must be nonnegative")


@dataclass
class ScanBlock:
    """Measured data of one (pair, focal spot) block."""

    block_index: int
    pair_index: int
    spot_index: int
    betas: np.ndarray
    time_indices: np.ndarray
    sinogram: np.ndarray
    counts: np.ndarray
    n_floored: int = 0
    system: SparseBlock | None = None


@dataclass
class ScanRealization:
    blocks: list[ScanBlock]
    seed: int
    dose: Dose
    config_hash: str = ""

    @property
    def n_floored(self) -> int:
        return sum(b.n_floored for b in self.blocks)


def _view_rng(seed: int, pair_index: int, time_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(pair_index), int(time_index)]))


def noisy_counts(ybar: np.ndarray, dose: Dose, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Poisson photon counts plus Gaussian electronic noise, floored."""
    lam = rng.poisson(dose.I0 * np.exp(-ybar)).astype(float)
    if dose.sigma_e2 > 0:
        lam += rng.normal(0.0, math.sqrt(dose.sigma_e2), size=lam.shape)
    low = lam < dose.count_floor
    lam[low] = dose.count_floor
    return lam, int(np.count_nonzero(low))


def simulate_scan(
    phantom: Volume,
    schedule: ViewSchedule,
    dose: Dose,
    seed: int = 0,
    mu_water: float = MU_WATER,
    method: str = "midplane",
    config_hash: str = "",
    threads: int = 1,
) -> ScanRealization:
    """Project ``phantom`` through every block of ``schedule`` and add noise.

    Each view draws from its own random stream keyed by (seed, pair, view
    time index), so the result does not depend on evaluation order or
    ``threads`` (blocks are built concurrently).
    """
    grid = phantom.grid
    mu = phantom.to_mu(mu_water).values
    layout = schedule.layout
    keys = [(k, p, s) for k, (p, s) in enumerate(schedule.block_keys()) if schedule.block(p, s)]

    def one(key):
        k, p, s = key
        views = schedule.block(p, s)
        system = build_system_block(layout.pair_geometry(p), layout.pairs[p][1][s], views, grid, block_index=k, method=method)
        ybar = forward_project(system, mu)
        if dose.noise:
            counts = np.empty_like(ybar)
            n_floor = 0
            for v, view in enumerate(views):
                counts[v], n = noisy_counts(ybar[v], dose, _view_rng(seed, p, view.time_index))
                n_floor += n
            y = np.log(dose.I0 / counts)
        else:
            counts = dose.I0 * np.exp(-ybar)
            y = ybar.copy()
            n_floor = 0
        betas = np.array([v.beta for v in views])
        times = np.array([v.time_index for v in views], dtype=np.int64)
        return ScanBlock(k, p, s, betas, times, y, counts, n_floor, system)

    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(keys))) as pool:
            out = list(pool.map(one, keys))
    else:
        out = [one(key) for key in keys]
    return ScanRealization(out, int(seed), dose, config_hash)


def realization_digest(scan: ScanRealization) -> str:
    """SHA-256 over all sinograms and counts (used for reproducibility checks)."""
    h = hashlib.sha256()
    for b in scan.blocks:
        h.update(np.ascontiguousarray(b.sinogram).tobytes())
        h.update(np.ascontiguousarray(b.counts).tobytes())
    return h.hexdigest()


def acr_like_phantom(
    radius: float = 100.0,
    height: float = 40.0,
    bar_frequencies: Sequence[float] = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.2),
    bar_value: float = 1000.0,
    n_bars: int = 4,
) -> PhantomSpec:
    """Water cylinder with high-contrast bar groups arranged on a ring."""
    prims: list = [Cylinder((0.0, 0.0, 0.0), radius, height, 0.0)]
    n = len(bar_frequencies)
    ring = 0.55 * radius
    for i, f in enumerate(bar_frequencies):
        ang = 2.0 * math.pi * i / n
        prims.append(
            BarPattern(
                (ring * math.cos(ang), ring * math.sin(ang), 0.0), f, n_bars, 0.15 * radius, height, bar_value,
                "x" if i % 2 == 0 else "y",
            )
        )
    return PhantomSpec(prims, -1000.0)
