"""Source trajectories, flying focal spots and dual-source scheduling.

Coordinates are in mm with the isocenter at the origin; the gantry rotates
in the x-y plane and the table advances along z. Angles are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for invalid or degenerate scanner geometry."""


@dataclass(frozen=True)
class ScannerGeometry:
    """Static geometry of one source-detector pair.

    ``z0`` is an extra constant z offset of the source (0 for the first
    pair); it carries the z displacement of a second source.
    """

    r_so: float
    r_sd: float
    D_c: float
    D_r: float
    M_c: int
    M_r: int
    tau: float = 0.12
    H_r: float = 0.0
    beta_0: float = 0.0
    z0: float = 0.0

    def __post_init__(self):
        if not (self.r_sd > self.r_so > 0):
            raise GeometryError(f"need r_sd > r_so > 0, got r_so={self.r_so}, r_sd={self.r_sd}")
        if self.D_c <= 0 or self.D_r <= 0:
            raise GeometryError("detector pitches D_c, D_r must be positive")
        if int(self.M_c) < 1 or int(self.M_r) < 1:
            raise GeometryError("detector needs at least one channel and one row")
        if self.H_r < 0:
            raise GeometryError("table advance H_r must be nonnegative")
        object.__setattr__(self, "M_c", int(self.M_c))
        object.__setattr__(self, "M_r", int(self.M_r))

    @property
    def magnification(self) -> float:
        return self.r_sd / self.r_so

    @property
    def collimation(self) -> float:
        """Collimated z extent of the detector measured at the isocenter (mm)."""
        return self.M_r * self.D_r * self.r_so / self.r_sd

    def with_pitch(self, pitch: float) -> "ScannerGeometry":
        """Copy with the table advance set from a helical pitch."""
        return replace(self, H_r=pitch_to_table_advance(self, pitch))


@dataclass(frozen=True)
class FocalSpotSpec:
    """Deflection (du, dv, dw) of one focal spot, measured at the 90 degree view.

    By default the spot lies on the anode target plane, so ``dw`` is derived
    from ``dv`` and the anode tilt. Pass ``on_target=False`` to set ``dw``
    freely (used to probe the row model in isolation).
    """

    du: float = 0.0
    dv: float = 0.0
    dw: float | None = None
    tau: float | None = None
    on_target: bool = True

    def __post_init__(self):
        if self.on_target:
            if self.tau is None:
                if self.dw is None and self.dv == 0.0:
                    object.__setattr__(self, "dw", 0.0)
                    return
                raise GeometryError("anode tilt tau is required to place a spot on the target plane")
            expected = math.tan(self.tau) * self.dv
            if self.dw is not None and not math.isclose(self.dw, expected, rel_tol=1e-9, abs_tol=1e-12):
                raise GeometryError(
                    f"dw={self.dw} violates dw = tan(tau)*dv = {expected}; pass on_target=False to override"
                )
            object.__setattr__(self, "dw", expected)
        elif self.dw is None:
            object.__setattr__(self, "dw", 0.0)

    @classmethod
    def on_anode(cls, geom: ScannerGeometry, du: float = 0.0, dv: float = 0.0) -> "FocalSpotSpec":
        return cls(du=du, dv=dv, tau=geom.tau)

    @classmethod
    def from_z_deflection(cls, geom: ScannerGeometry, du: float, dw: float) -> "FocalSpotSpec":
        """Spot with in-plane offset ``du`` and z offset ``dw`` on the target plane."""
        if dw == 0.0:
            return cls(du=du, dv=0.0, tau=geom.tau)
        if math.tan(geom.tau) == 0.0:
            raise GeometryError("a z deflection needs a nonzero anode tilt")
        return cls(du=du, dv=dw / math.tan(geom.tau), tau=geom.tau)


NO_DEFLECTION = FocalSpotSpec()


def default_spots(geom: ScannerGeometry, n_spots: int = 2) -> tuple[FocalSpotSpec, ...]:
    """Quarter-pitch interleaving spots: du = +-D_c/4 and dw = +-D_r/4."""
    if n_spots == 1:
        return (FocalSpotSpec(tau=geom.tau),)
    if n_spots != 2:
        raise GeometryError("default spot sets exist for 1 or 2 spots; configure others explicitly")
    q_c, q_r = geom.D_c / 4.0, geom.D_r / 4.0
    return (
        FocalSpotSpec.from_z_deflection(geom, -q_c, -q_r),
        FocalSpotSpec.from_z_deflection(geom, q_c, q_r),
    )


@dataclass(frozen=True)
class DualSourceLayout:
    pairs: tuple[tuple[ScannerGeometry, tuple[FocalSpotSpec, ...]], ...]
    dbeta_12: float = 0.0
    dz_12: float = 0.0

    def __post_init__(self):
        pairs = tuple((g, tuple(spots)) for g, spots in self.pairs)
        if not 1 <= len(pairs) <= 2:
            raise GeometryError("a layout has one or two source-detector pairs")
        for g, spots in pairs:
            if len(spots) < 1:
                raise GeometryError("each pair needs at least one focal spot")
        object.__setattr__(self, "pairs", pairs)

    @property
    def n_blocks(self) -> int:
        return sum(len(spots) for _, spots in self.pairs)

    def pair_geometry(self, pair_index: int) -> ScannerGeometry:
        """Geometry of a pair with the angular and z offsets of pair 2 applied."""
        g = self.pairs[pair_index][0]
        if pair_index == 0:
            return g
        return replace(g, beta_0=g.beta_0 + self.dbeta_12, z0=g.z0 + self.dz_12)

    def with_table_advance(self, H_r: float) -> "DualSourceLayout":
        pairs = tuple((replace(g, H_r=H_r), spots) for g, spots in self.pairs)
        return replace(self, pairs=pairs)


@dataclass(frozen=True)
class ViewSample:
    pair_index: int
    spot_index: int
    beta: float
    source_pos: tuple[float, float, float]
    time_index: int


@dataclass(frozen=True)
class ViewSchedule(Sequence[ViewSample]):
    """Time-ordered view samples plus the layout (with H_r) they were made for."""

    samples: tuple[ViewSample, ...]
    layout: DualSourceLayout
    n_views_per_rotation: int
    n_rotations: float
    pitch: float
    beta_start: float = 0.0

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, item):
        return self.samples[item]

    def __iter__(self) -> Iterator[ViewSample]:
        return iter(self.samples)

    def block(self, pair_index: int, spot_index: int) -> list[ViewSample]:
        return [s for s in self.samples if s.pair_index == pair_index and s.spot_index == spot_index]

    def block_keys(self) -> list[tuple[int, int]]:
        return [(p, s) for p, (_, spots) in enumerate(self.layout.pairs) for s in range(len(spots))]


def pitch_to_table_advance(geom: ScannerGeometry, pitch: float) -> float:
    return pitch * geom.collimation


def default_source_position(geom: ScannerGeometry, beta: float) -> np.ndarray:
    return np.array(
        [
            geom.r_so * math.cos(beta),
            geom.r_so * math.sin(beta),
            geom.H_r * (beta - geom.beta_0) / TWO_PI + geom.z0,
        ]
    )


def focal_spot_position(geom: ScannerGeometry, spot: FocalSpotSpec, beta: float) -> np.ndarray:
    c, s = math.cos(beta), math.sin(beta)
    return np.array(
        [
            geom.r_so * c + s * spot.du + c * spot.dv,
            geom.r_so * s - c * spot.du + s * spot.dv,
            geom.H_r * (beta - geom.beta_0) / TWO_PI + geom.z0 + math.tan(geom.tau) * spot.dv,
        ]
    )


def focal_spot_positions(geom: ScannerGeometry, spot: FocalSpotSpec, betas) -> np.ndarray:
    """Vectorized :func:`focal_spot_position`; returns shape (n, 3)."""
    betas = np.asarray(betas, dtype=float)
    c, s = np.cos(betas), np.sin(betas)
    out = np.empty(betas.shape + (3,))
    out[..., 0] = geom.r_so * c + s * spot.du + c * spot.dv
    out[..., 1] = geom.r_so * s - c * spot.du + s * spot.dv
    out[..., 2] = geom.H_r * (betas - geom.beta_0) / TWO_PI + geom.z0 + math.tan(geom.tau) * spot.dv
    return out


def detector_radius(geom: ScannerGeometry, spot: FocalSpotSpec) -> float:
    """Arc radius of the detector seen from a deflected spot."""
    return geom.r_sd + spot.dv


def detector_center(geom: ScannerGeometry, beta: float) -> np.ndarray:
    """Center of the detector array in the x-y plane (fixed to the gantry)."""
    return (geom.r_so - geom.r_sd) * np.array([math.cos(beta), math.sin(beta)])


def detector_unit_center(
    geom: ScannerGeometry, spot: FocalSpotSpec, beta: float, i_c: int, i_r: int
) -> np.ndarray:
    """Center of detector unit (i_c, i_r) at view ``beta``.

    Channels lie on an arc of radius ``r_sd + dv`` around the deflected spot;
    the channel midway through the array sits on the line from the spot to
    the detector center. Rows are flat in z and fixed to the undeflected
    source height.
    """
    if not (0 <= i_c < geom.M_c) or not (0 <= i_r < geom.M_r):
        raise IndexError(f"detector unit ({i_c}, {i_r}) outside {geom.M_c}x{geom.M_r}")
    src = focal_spot_position(geom, spot, beta)
    R = detector_radius(geom, spot)
    to_center = detector_center(geom, beta) - src[:2]
    base = math.atan2(to_center[1], to_center[0])
    ang = base + (i_c - (geom.M_c - 1) / 2.0) * geom.D_c / R
    z = src[2] - spot.dw + (i_r - (geom.M_r - 1) / 2.0) * geom.D_r
    return np.array([src[0] + R * math.cos(ang), src[1] + R * math.sin(ang), z])


def dual_source_view_schedule(
    layout: DualSourceLayout,
    n_views_per_rotation: int,
    n_rotations: float,
    pitch: float,
    beta_start: float = 0.0,
) -> ViewSchedule:
    """Interleaved view schedule for all pairs and focal spots.

    The table advance is set from ``pitch`` against the first pair's
    collimation. Focal spots of a pair fire round-robin by view index.
    """
    if layout is None or not layout.pairs:
        raise GeometryError("empty layout")
    if n_views_per_rotation < 1:
        raise GeometryError("n_views_per_rotation must be >= 1")
    if pitch <= 0:
        raise GeometryError("pitch must be positive")
    H_r = pitch_to_table_advance(layout.pairs[0][0], pitch)
    helical = layout.with_table_advance(H_r)
    n_views = int(round(n_views_per_rotation * n_rotations))
    dbeta = TWO_PI / n_views_per_rotation
    samples = []
    for t in range(n_views):
        beta1 = beta_start + t * dbeta
        for p, (_, spots) in enumerate(helical.pairs):
            geom = helical.pair_geometry(p)
            s = t % len(spots)
            beta = beta1 + (helical.dbeta_12 if p == 1 else 0.0)
            pos = focal_spot_position(geom, spots[s], beta)
            samples.append(ViewSample(p, s, beta, tuple(float(v) for v in pos), t))
    return ViewSchedule(tuple(samples), helical, n_views_per_rotation, n_rotations, pitch, beta_start)


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[tuple[float, float]] = []
    for lo, hi in sorted(intervals):
        if hi <= lo:
            continue
        # abutting intervals computed from different rotations differ by round-off
        if merged and lo <= merged[-1][1] + 1e-9 * max(1.0, abs(lo)):
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _clip(intervals, lo, hi):
    return _merge([(max(a, lo), min(b, hi)) for a, b in intervals])


def _length(intervals) -> float:
    return float(sum(b - a for a, b in intervals))


@dataclass
class CoverageReport:
    z_range: tuple[float, float]
    per_pair: list[list[tuple[float, float]]]
    per_pair_union: list[float]
    union: list[tuple[float, float]]
    gaps: list[tuple[float, float]] = field(default_factory=list)

    @property
    def scan_length(self) -> float:
        return self.z_range[1] - self.z_range[0]

    @property
    def union_length(self) -> float:
        return _length(self.union)

    @property
    def gap_length(self) -> float:
        return _length(self.gaps)

    @property
    def gap_fraction(self) -> float:
        return self.gap_length / self.scan_length if self.scan_length > 0 else 0.0

    def as_dict(self) -> dict:
        return {
            "z_range_mm": list(self.z_range),
            "per_pair_union_mm": self.per_pair_union,
            "union_mm": self.union_length,
            "gap_mm": self.gap_length,
            "gap_fraction": self.gap_fraction,
        }


def z_coverage_intervals(
    layout: DualSourceLayout, schedule: ViewSchedule, beta_query: float
) -> CoverageReport:
    """z intervals illuminated at isocenter whenever a source passes ``beta_query``.

    Each interval is the collimated beam width at the isocenter centered on
    the source z at that instant. The scan range runs from the first to the
    last interval of the first pair; other pairs are clipped to it.
    """
    if len(schedule) == 0:
        raise GeometryError("empty schedule")
    layout = schedule.layout if layout is None else layout
    per_pair = []
    for p, (geom0, spots) in enumerate(layout.pairs):
        geom = layout.pair_geometry(p)
        betas = np.array([s.beta for s in schedule if s.pair_index == p])
        if betas.size == 0:
            per_pair.append([])
            continue
        b_lo, b_hi = betas.min(), betas.max()
        m_lo = math.ceil((b_lo - beta_query) / TWO_PI - 1e-12)
        m_hi = math.floor((b_hi - beta_query) / TWO_PI + 1e-12)
        half = geom.collimation / 2.0
        ivs = []
        for m in range(m_lo, m_hi + 1):
            z = default_source_position(geom, beta_query + m * TWO_PI)[2]
            ivs.append((z - half, z + half))
        per_pair.append(ivs)
    if not per_pair[0]:
        raise GeometryError("the first pair never reaches beta_query within the schedule")
    # scan range: hull of the first pair's intervals at this view angle
    z_range = (per_pair[0][0][0], per_pair[0][-1][1])
    per_pair = [_clip(ivs, *z_range) for ivs in per_pair]
    union = _merge([iv for ivs in per_pair for iv in ivs])
    gaps = []
    cursor = z_range[0]
    for lo, hi in union:
        if lo > cursor:
            gaps.append((cursor, lo))
        cursor = max(cursor, hi)
    if cursor < z_range[1]:
        gaps.append((cursor, z_range[1]))
    return CoverageReport(z_range, per_pair, [_length(ivs) for ivs in per_pair], union, gaps)
