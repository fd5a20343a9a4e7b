"""Closed-form cone-beam system matrix for flying-focal-spot helical scans.

Every entry couples one voxel to one detector unit at one view through the
intersection length of the central ray, scaled by the overlap of the voxel's
rectangular footprint with the unit. Blocks are stored as CSR matrices with
rows ordered (view, row, channel) and columns ordered (z, y, x).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import (
    FocalSpotSpec,
    GeometryError,
    ScannerGeometry,
    ViewSample,
    detector_center,
    detector_radius,
    focal_spot_position,
    focal_spot_positions,
)

QUARTER_PI = math.pi / 4.0
HALF_PI = math.pi / 2.0


class MemoryBudgetError(MemoryError):
    def __init__(self, required_bytes: int, budget_bytes: int):
        super().__init__(
            f"system block needs about {required_bytes / 2**20:.1f} MiB, budget is {budget_bytes / 2**20:.1f} MiB"
        )
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


@dataclass(frozen=True)
class VoxelGrid:
    n_x: int
    n_y: int
    n_z: int
    delta_xy: float
    delta_z: float
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.delta_xy <= 0 or self.delta_z <= 0:
            raise ValueError("voxel pitches must be positive")
        if min(self.n_x, self.n_y, self.n_z) < 1:
            raise ValueError("grid needs at least one voxel per axis")
        if self.origin is None:
            # centered on the isocenter
            origin = (
                -(self.n_x - 1) / 2.0 * self.delta_xy,
                -(self.n_y - 1) / 2.0 * self.delta_xy,
                -(self.n_z - 1) / 2.0 * self.delta_z,
            )
            object.__setattr__(self, "origin", origin)
        else:
            object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_z, self.n_y, self.n_x)

    @property
    def size(self) -> int:
        return self.n_x * self.n_y * self.n_z

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel center coordinates along x, y, z."""
        x = self.origin[0] + self.delta_xy * np.arange(self.n_x)
        y = self.origin[1] + self.delta_xy * np.arange(self.n_y)
        z = self.origin[2] + self.delta_z * np.arange(self.n_z)
        return x, y, z

    def centers(self) -> np.ndarray:
        """All voxel centers in column order, shape (size, 3)."""
        x, y, z = self.axes()
        zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def center(self, j: int) -> np.ndarray:
        iz, rem = divmod(int(j), self.n_x * self.n_y)
        iy, ix = divmod(rem, self.n_x)
        return np.array(
            [
                self.origin[0] + ix * self.delta_xy,
                self.origin[1] + iy * self.delta_xy,
                self.origin[2] + iz * self.delta_z,
            ]
        )


@dataclass(frozen=True)
class RayAngles:
    theta: float
    phi: float
    theta_fold: float
    phi_fold: float


@dataclass(frozen=True)
class Footprint:
    L_c: float
    L_r: float
    c_lo: int
    c_hi: int
    r_lo: int
    r_hi: int
    delta_c: np.ndarray
    delta_r: np.ndarray
    gamma: float
    alpha: float

    @property
    def empty(self) -> bool:
        return self.c_hi < self.c_lo or self.r_hi < self.r_lo


def fold_angle(a):
    """Rotate by 45 degrees, wrap to a quarter turn: result in [-pi/4, pi/4)."""
    return np.mod(np.asarray(a) + QUARTER_PI, HALF_PI) - QUARTER_PI


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(a) + math.pi, 2.0 * math.pi) - math.pi


def clip(a, b, c):
    return np.minimum(np.maximum(a, b), c)


def ray_angles(source, voxel_center) -> RayAngles:
    s = np.asarray(source, dtype=float)
    v = np.asarray(voxel_center, dtype=float)
    dx, dy = s[0] - v[0], s[1] - v[1]
    rho = math.hypot(dx, dy)
    if rho == 0.0:
        raise GeometryError("degenerate ray: source has zero x-y distance to the voxel center")
    theta = math.atan2(dy, dx)
    phi = math.atan2(s[2] - v[2], rho)
    return RayAngles(theta, phi, float(fold_angle(theta)), float(fold_angle(phi)))


def chord_length(delta_xy: float, angles: RayAngles):
    return delta_xy / (np.cos(angles.theta_fold) * np.cos(angles.phi_fold))


def gamma_alpha(geom: ScannerGeometry, spot: FocalSpotSpec, beta: float) -> tuple[float, float]:
    """Polar angle of the deflected spot and the detector channel offset angle."""
    gamma = beta - math.atan2(spot.du, geom.r_so + spot.dv)
    alpha = math.atan2(geom.r_sd + spot.dv, spot.du) - math.atan2(geom.r_so + spot.dv, spot.du)
    return gamma, alpha


def channel_displacement(geom: ScannerGeometry, spot: FocalSpotSpec, beta: float, angles, i_c):
    """Arc-length offset between a voxel's projection center and channel ``i_c``.

    ``angles`` may be a :class:`RayAngles` or a bare x-y ray angle theta.
    """
    i_c = np.asarray(i_c)
    if np.any((i_c < 0) | (i_c >= geom.M_c)):
        raise IndexError("channel index out of range")
    theta = angles.theta if isinstance(angles, RayAngles) else angles
    gamma, alpha = gamma_alpha(geom, spot, beta)
    R = detector_radius(geom, spot)
    a = theta - gamma - alpha + (geom.M_c - 1) * geom.D_c / (2.0 * R) - i_c * geom.D_c / R
    return wrap_angle(a) * R


def row_displacement(geom: ScannerGeometry, spot: FocalSpotSpec, beta: float, voxel_center, i_r):
    i_r = np.asarray(i_r)
    if np.any((i_r < 0) | (i_r >= geom.M_r)):
        raise IndexError("row index out of range")
    s = focal_spot_position(geom, spot, beta)
    v = np.asarray(voxel_center, dtype=float)
    rho = math.hypot(s[0] - v[0], s[1] - v[1])
    if rho == 0.0:
        raise GeometryError("degenerate ray: source has zero x-y distance to the voxel center")
    R = detector_radius(geom, spot)
    return R / rho * (v[2] - s[2]) + (geom.M_r - 1) / 2.0 * geom.D_r + spot.dw - i_r * geom.D_r


def _arc_coordinate(geom, spot, beta, src, points_xy):
    """Signed arc position on the detector of the rays from ``src`` through points."""
    gamma, alpha = gamma_alpha(geom, spot, beta)
    R = detector_radius(geom, spot)
    th = np.arctan2(src[1] - points_xy[..., 1], src[0] - points_xy[..., 0])
    return wrap_angle(th - gamma - alpha) * R


def footprint_extents(
    geom: ScannerGeometry,
    spot: FocalSpotSpec,
    beta: float,
    voxel_center,
    delta_xy: float,
    delta_z: float,
    method: str = "midplane",
) -> Footprint:
    """Projected size of a voxel on the detector and the units it reaches.

    ``method="midplane"`` projects the voxel's central cross-section that the
    ray crosses most squarely (the face-parallel segment used for the chord);
    ``method="corners"`` takes the full extent of the four x-y corners. Only
    the midplane width keeps the summed footprint equal to the voxel volume.
    """
    s = focal_spot_position(geom, spot, beta)
    v = np.asarray(voxel_center, dtype=float)
    angles = ray_angles(s, v)
    h = delta_xy / 2.0
    if method == "corners":
        pts = v[:2] + np.array([[-h, -h], [-h, h], [h, -h], [h, h]])
    elif method == "midplane":
        pts = _midplane_segment(v[:2], angles.theta, h)
    else:
        raise ValueError(f"unknown footprint method {method!r}")
    arc = _arc_coordinate(geom, spot, beta, s, pts)
    L_c = float(arc.max() - arc.min())
    rho = math.hypot(s[0] - v[0], s[1] - v[1])
    R = detector_radius(geom, spot)
    L_r = R * delta_z / rho
    gamma, alpha = gamma_alpha(geom, spot, beta)
    channels = np.arange(geom.M_c)
    rows = np.arange(geom.M_r)
    dc = channel_displacement(geom, spot, beta, angles, channels)
    dr = row_displacement(geom, spot, beta, v, rows)
    hit_c = np.nonzero(np.abs(dc) < (geom.D_c + L_c) / 2.0)[0]
    hit_r = np.nonzero(np.abs(dr) < (geom.D_r + L_r) / 2.0)[0]
    if hit_c.size == 0 or hit_r.size == 0:
        c_lo, c_hi, r_lo, r_hi = 0, -1, 0, -1
    else:
        c_lo, c_hi, r_lo, r_hi = int(hit_c[0]), int(hit_c[-1]), int(hit_r[0]), int(hit_r[-1])
    return Footprint(L_c, L_r, c_lo, c_hi, r_lo, r_hi, dc, dr, gamma, alpha)


def _midplane_segment(center_xy, theta, half):
    """Endpoints of the voxel's central segment perpendicular to the dominant ray axis."""
    theta = np.asarray(theta)
    along_y = np.abs(np.sin(theta)) > np.abs(np.cos(theta))
    # ray mostly along y: segment runs along x, and vice versa
    ex = np.where(along_y, half, 0.0)
    ey = np.where(along_y, 0.0, half)
    c = np.asarray(center_xy)
    p0 = np.stack([c[..., 0] - ex, c[..., 1] - ey], axis=-1)
    p1 = np.stack([c[..., 0] + ex, c[..., 1] + ey], axis=-1)
    return np.stack([p0, p1], axis=-2)


def overlap_weight(delta, L, D):
    """Rect(L) * Rect(D)/D overlap evaluated at offset ``delta``."""
    return clip(0.0, (D + L) / 2.0 - np.abs(delta), np.minimum(L, D))


def system_entry(
    geom: ScannerGeometry,
    spot: FocalSpotSpec,
    beta: float,
    voxel_center,
    i_c: int,
    i_r: int,
    delta_xy: float,
    delta_z: float,
    method: str = "midplane",
) -> float:
    s = focal_spot_position(geom, spot, beta)
    angles = ray_angles(s, voxel_center)
    fp = footprint_extents(geom, spot, beta, voxel_center, delta_xy, delta_z, method)
    return float(
        entry_from_parts(
            delta_xy, angles, fp.L_c, fp.L_r, fp.delta_c[i_c], fp.delta_r[i_r], geom.D_c, geom.D_r
        )
    )


def entry_from_parts(delta_xy, angles: RayAngles, L_c, L_r, delta_c, delta_r, D_c, D_r):
    """Closed-form entry given footprint lengths and displacements."""
    scale = delta_xy / (D_c * D_r * np.cos(angles.theta_fold) * np.cos(angles.phi_fold))
    return scale * overlap_weight(delta_c, L_c, D_c) * overlap_weight(delta_r, L_r, D_r)


@dataclass
class SparseBlock:
    """One system matrix block: a single pair and focal spot over a set of views."""

    block_index: int
    matrix: sp.csr_matrix
    n_views: int
    M_r: int
    M_c: int
    grid: VoxelGrid | None = None
    betas: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sort_indices()
        if self.matrix.shape[0] != self.n_views * self.M_r * self.M_c:
            raise ValueError("row count must equal n_views * M_r * M_c")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def sino_shape(self) -> tuple[int, int, int]:
        return (self.n_views, self.M_r, self.M_c)

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]


def _view_entries(geom, spot, beta, grid: VoxelGrid, centers, method):
    """COO triplets (local row, column, value) of one view."""
    s = focal_spot_position(geom, spot, beta)
    R = detector_radius(geom, spot)
    dx = s[0] - centers[:, 0]
    dy = s[1] - centers[:, 1]
    rho = np.hypot(dx, dy)
    if np.any(rho == 0.0):
        raise GeometryError("degenerate ray: a voxel center lies under the focal spot")
    theta = np.arctan2(dy, dx)
    phi = np.arctan2(s[2] - centers[:, 2], rho)
    cos_fold = np.cos(fold_angle(theta)) * np.cos(fold_angle(phi))
    scale = grid.delta_xy / (geom.D_c * geom.D_r * cos_fold)

    gamma, alpha = gamma_alpha(geom, spot, beta)
    # channel position where the central ray lands, in channel units
    u = wrap_angle(theta - gamma - alpha) * R
    c_star = u / geom.D_c + (geom.M_c - 1) / 2.0
    half = grid.delta_xy / 2.0
    if method == "midplane":
        seg = _midplane_segment(centers[:, :2], theta, half)
        ends = _arc_coordinate(geom, spot, beta, s, seg)
        L_c = np.abs(ends[:, 1] - ends[:, 0])
    elif method == "corners":
        arcs = []
        for ox, oy in ((-half, -half), (-half, half), (half, -half), (half, half)):
            arcs.append(_arc_coordinate(geom, spot, beta, s, centers[:, :2] + np.array([ox, oy])))
        arcs = np.stack(arcs)
        L_c = arcs.max(axis=0) - arcs.min(axis=0)
    else:
        raise ValueError(f"unknown footprint method {method!r}")

    z_hit = R / rho * (centers[:, 2] - s[2]) + spot.dw
    r_star = z_hit / geom.D_r + (geom.M_r - 1) / 2.0
    L_r = R * grid.delta_z / rho

    n_c = int(math.ceil(float(np.max((geom.D_c + L_c) / (2.0 * geom.D_c))))) + 1
    n_r = int(math.ceil(float(np.max((geom.D_r + L_r) / (2.0 * geom.D_r))))) + 1
    base_c = np.floor(c_star).astype(np.int64)
    base_r = np.floor(r_star).astype(np.int64)
    cols = np.arange(centers.shape[0], dtype=np.int64)

    rows_out, cols_out, vals_out = [], [], []
    for kr in range(-n_r, n_r + 2):
        ir = base_r + kr
        ok_r = (ir >= 0) & (ir < geom.M_r)
        if not ok_r.any():
            continue
        dr = (r_star - ir) * geom.D_r
        wr = overlap_weight(dr, L_r, geom.D_r)
        ok_r &= wr > 0.0
        if not ok_r.any():
            continue
        for kc in range(-n_c, n_c + 2):
            ic = base_c + kc
            ok = ok_r & (ic >= 0) & (ic < geom.M_c)
            if not ok.any():
                continue
            dc = (c_star[ok] - ic[ok]) * geom.D_c
            w = scale[ok] * overlap_weight(dc, L_c[ok], geom.D_c) * wr[ok]
            keep = w > 0.0
            if not keep.any():
                continue
            rows_out.append(ir[ok][keep] * geom.M_c + ic[ok][keep])
            cols_out.append(cols[ok][keep])
            vals_out.append(w[keep])
    if not rows_out:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    return np.concatenate(rows_out), np.concatenate(cols_out), np.concatenate(vals_out)


def estimate_block_bytes(geom: ScannerGeometry, grid: VoxelGrid, n_views: int) -> int:
    """Upper-bound-ish estimate of CSR storage for a block."""
    mag = geom.r_sd / max(geom.r_so - math.hypot(grid.n_x, grid.n_y) * grid.delta_xy / 2.0, 1e-6)
    per_c = math.ceil(grid.delta_xy * math.sqrt(2.0) * mag / geom.D_c) + 1
    per_r = math.ceil(grid.delta_z * mag / geom.D_r) + 1
    nnz = n_views * grid.size * per_c * per_r
    return nnz * 12 + (n_views * geom.M_c * geom.M_r + 1) * 8


def build_system_block(
    geom: ScannerGeometry,
    spot: FocalSpotSpec,
    views: Sequence[ViewSample] | Sequence[float],
    grid: VoxelGrid,
    block_index: int = 0,
    method: str = "midplane",
    memory_budget: int | None = 4 * 2**30,
) -> SparseBlock:
    """Assemble the sparse block for one focal spot over ``views``.

    ``views`` holds :class:`ViewSample` objects or bare view angles.
    """
    betas = np.array([v.beta if isinstance(v, ViewSample) else float(v) for v in views])
    if betas.size == 0:
        raise ValueError("empty view subset")
    if memory_budget is not None:
        need = estimate_block_bytes(geom, grid, betas.size)
        if need > memory_budget:
            raise MemoryBudgetError(need, memory_budget)
    centers = grid.centers()
    n_det = geom.M_c * geom.M_r
    rows, cols, vals = [], [], []
    for k, beta in enumerate(betas):
        r, c, v = _view_entries(geom, spot, float(beta), grid, centers, method)
        rows.append(r + k * n_det)
        cols.append(c)
        vals.append(v)
    shape = (betas.size * n_det, grid.size)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )
    return SparseBlock(block_index, mat, int(betas.size), geom.M_r, geom.M_c, grid, betas)


def forward_project(block: SparseBlock, volume) -> np.ndarray:
    """Noise-free sinogram of ``volume``; shape (n_views, M_r, M_c)."""
    x = np.asarray(volume, dtype=float)
    if x.size != block.shape[1]:
        raise ValueError(f"volume has {x.size} voxels, block expects {block.shape[1]}")
    return (block.matrix @ x.ravel()).reshape(block.sino_shape)


def back_project(block: SparseBlock, sinogram) -> np.ndarray:
    """Adjoint of :func:`forward_project`; returns a flat volume vector."""
    y = np.asarray(sinogram, dtype=float)
    if y.size != block.shape[0]:
        raise ValueError(f"sinogram has {y.size} entries, block expects {block.shape[0]}")
    out = block.matrix.T @ y.ravel()
    if block.grid is not None:
        return out.reshape(block.grid.shape)
    return out


def exact_channel_displacement(geom, spot, beta, voxel_center, i_c) -> float:
    """Arc offset of channel ``i_c`` from the voxel's projection, by explicit construction.

    Builds the landing point of the ray through the voxel and the unit center
    as 3-D points and measures the angle between them at the focal spot.
    """
    from .geometry import detector_unit_center

    s = focal_spot_position(geom, spot, beta)
    v = np.asarray(voxel_center, dtype=float)
    R = detector_radius(geom, spot)
    d = v - s
    C = s + R * d / math.hypot(d[0], d[1])
    W = detector_unit_center(geom, spot, beta, int(i_c), 0)
    a, b = W[:2] - s[:2], C[:2] - s[:2]
    ang = math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])
    return ang * R


def exact_row_displacement(geom, spot, beta, voxel_center, i_r) -> float:
    from .geometry import detector_unit_center

    s = focal_spot_position(geom, spot, beta)
    v = np.asarray(voxel_center, dtype=float)
    R = detector_radius(geom, spot)
    d = v - s
    C = s + R * d / math.hypot(d[0], d[1])
    W = detector_unit_center(geom, spot, beta, 0, int(i_r))
    return float(C[2] - W[2])


def physical_arc_discrepancy(geom, spot, beta, voxel_center, i_c) -> float:
    """Difference between the modeled channel offset and a detector concentric
    with the undeflected source (radius r_sd), in mm of arc."""
    s = focal_spot_position(geom, spot, beta)
    s0 = focal_spot_position(geom, FocalSpotSpec(), beta)
    v = np.asarray(voxel_center, dtype=float)
    # landing point on the circle of radius r_sd around the undeflected source
    d = (v - s)[:2]
    d /= np.linalg.norm(d)
    f = s[:2] - s0[:2]
    bq = float(f @ d)
    t = -bq + math.sqrt(bq * bq - (f @ f - geom.r_sd**2))
    hit = s[:2] + t * d
    center = detector_center(geom, beta)
    a, b = center - s0[:2], hit - s0[:2]
    ang_hit = math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])
    unit_ang = (i_c - (geom.M_c - 1) / 2.0) * geom.D_c / geom.r_sd
    physical = (ang_hit - unit_ang) * geom.r_sd
    modeled = float(channel_displacement(geom, spot, beta, ray_angles(s, v), i_c))
    return modeled - physical


# -- binary container ---------------------------------------------------------

BLOCK_MAGIC = b"DSFFSBLK"
BLOCK_VERSION = 1
_BLOCK_HEADER = struct.Struct("<8sIIqqqIIIq")


def save_block(block: SparseBlock, path) -> None:
    """Little-endian container: header, row offsets (int64), columns (int32), values (float64)."""
    m = block.matrix
    header = _BLOCK_HEADER.pack(
        BLOCK_MAGIC, BLOCK_VERSION, block.block_index, m.shape[0], m.shape[1], m.nnz,
        block.n_views, block.M_r, block.M_c, 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i4").tobytes())
        fh.write(m.data.astype("<f8").tobytes())
        betas = block.betas if block.betas is not None else np.zeros(block.n_views)
        fh.write(np.asarray(betas, dtype="<f8").tobytes())


def load_block(path, grid: VoxelGrid | None = None) -> SparseBlock:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, k, n_rows, n_cols, nnz, n_views, M_r, M_c, _ = _BLOCK_HEADER.unpack_from(raw)
    if magic != BLOCK_MAGIC:
        raise ValueError(f"{path}: not a system block file")
    if version != BLOCK_VERSION:
        raise ValueError(f"{path}: unsupported block version {version}")
    off = _BLOCK_HEADER.size
    indptr = np.frombuffer(raw, "<i8", n_rows + 1, off)
    off += 8 * (n_rows + 1)
    indices = np.frombuffer(raw, "<i4", nnz, off)
    off += 4 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off)
    off += 8 * nnz
    betas = np.frombuffer(raw, "<f8", n_views, off).copy()
    mat = sp.csr_matrix((data.copy(), indices.astype(np.int32), indptr.copy()), shape=(n_rows, n_cols))
    return SparseBlock(k, mat, n_views, M_r, M_c, grid, betas)
