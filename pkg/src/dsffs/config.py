"""Scan/reconstruction config files (YAML) with field and line diagnostics.

Every length carries its unit in the key (``r_so_mm``), every angle
``_deg``; values are converted to radians on load. Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import (
    DualSourceLayout,
    FocalSpotSpec,
    GeometryError,
    ScannerGeometry,
    ViewSchedule,
    default_spots,
    dual_source_view_schedule,
)
from .models import MU_WATER, PriorParams
from .projector import VoxelGrid
from .simulator import BarPattern, Box, Cylinder, Dose, PhantomSpec, WireRamp, acr_like_phantom


class ConfigError(ValueError):
    def __init__(self, message: str, field: str = "", line: int | None = None, source: str = ""):
        self.field = field
        self.line = line
        self.source = source
        where = ":".join(str(s) for s in (source, line) if s not in ("", None))
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}{field + ': ' if field else ''}{message}")


def _compose(text: str, source: str):
    """Parse YAML into plain objects plus a map from dotted field path to line."""
    try:
        loader = yaml.SafeLoader(text)
        try:
            root = loader.get_single_node()
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML ({getattr(exc, 'problem', exc)})", "", mark.line + 1 if mark else None, source)
    lines: dict[str, int] = {}
    constructor = yaml.SafeLoader("")

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for knode, vnode in node.value:
                key = str(constructor.construct_object(knode))
                sub = f"{path}.{key}" if path else key
                if key in out:
                    raise ConfigError("duplicate key", sub, knode.start_mark.line + 1, source)
                out[key] = walk(vnode, sub)
                lines[sub] = knode.start_mark.line + 1
            return out
        if isinstance(node, yaml.SequenceNode):
            return [walk(v, f"{path}[{i}]") for i, v in enumerate(node.value)]
        return constructor.construct_object(node)

    if root is None:
        return {}, lines
    return walk(root, ""), lines


class _Section:
    """Typed access to one mapping of the config, tracking consumed keys."""

    def __init__(self, data, path: str, lines: dict, source: str):
        self.path = path
        self.lines = lines
        self.source = source
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise self.error("expected a mapping")
        self.data = data
        self.used: set[str] = set()

    def _field(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def error(self, message: str, key: str | None = None) -> ConfigError:
        f = self._field(key) if key else self.path
        return ConfigError(message, f, self.lines.get(f, self.lines.get(self.path)), self.source)

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key, kind=float, default=..., check=None, why: str = ""):
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if default is ...:
                raise self.error("required field is missing", key)
            return default
        raw = self.data[key]
        try:
            if kind is bool:
                if not isinstance(raw, bool):
                    raise TypeError
                value = raw
            elif kind is int:
                if isinstance(raw, bool) or not float(raw).is_integer():
                    raise TypeError
                value = int(raw)
            elif kind is float:
                if isinstance(raw, bool):
                    raise TypeError
                value = float(raw)
                if not math.isfinite(value):
                    raise TypeError
            elif kind == "vec3":
                if not isinstance(raw, list) or len(raw) != 3:
                    raise TypeError
                value = tuple(float(v) for v in raw)
            else:
                value = kind(raw)
        except (TypeError, ValueError):
            name = kind if isinstance(kind, str) else kind.__name__
            raise self.error(f"expected {name}, got {raw!r}", key) from None
        if check is not None and not check(value):
            raise self.error(f"value {raw!r} out of range{': ' + why if why else ''}", key)
        return value

    def section(self, key: str, required: bool = False) -> "_Section":
        self.used.add(key)
        if required and key not in self.data:
            raise self.error("required section is missing", key)
        return _Section(self.data.get(key), self._field(key), self.lines, self.source)

    def items(self, key: str) -> list["_Section"]:
        self.used.add(key)
        raw = self.data.get(key) or []
        if not isinstance(raw, list):
            raise self.error("expected a list", key)
        return [_Section(v, f"{self._field(key)}[{i}]", self.lines, self.source) for i, v in enumerate(raw)]

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise self.error("unknown field", extra[0])


_POS = (lambda v: v > 0, "must be positive")
_NONNEG = (lambda v: v >= 0, "must be nonnegative")


def _angle(sec: _Section, stem: str, default: float = 0.0) -> float:
    """Angle given as ``<stem>_deg`` or ``<stem>_rad``; returned in radians."""
    if sec.has(f"{stem}_deg") and sec.has(f"{stem}_rad"):
        raise sec.error("give either degrees or radians, not both", f"{stem}_rad")
    if sec.has(f"{stem}_rad"):
        return sec.get(f"{stem}_rad")
    return math.radians(sec.get(f"{stem}_deg", default=math.degrees(default)))


@dataclass
class ReconConfig:
    prior_strength: float = 1e-4
    prior_p: float = 2.0
    prior_q: float = 1.2
    prior_c_hu: float = 10.0
    sigma: float | None = None
    rho: float = 0.8
    tol_hu: float = 0.1
    max_iters: int = 100
    inner_iters: int = 20
    threads: int | None = None

    def prior(self) -> PriorParams:
        return PriorParams(self.prior_strength, self.prior_p, self.prior_q, self.prior_c_hu)


@dataclass
class ScanConfig:
    layout: DualSourceLayout
    views_per_rotation: int
    rotations: float
    pitch: float
    start_angle: float
    grid: VoxelGrid
    phantom: PhantomSpec
    dose: Dose
    mu_water: float = MU_WATER
    seed: int = 0
    recon: ReconConfig = field(default_factory=ReconConfig)
    text: str = ""
    hash: str = ""

    def schedule(self) -> ViewSchedule:
        return dual_source_view_schedule(
            self.layout, self.views_per_rotation, self.rotations, self.pitch, self.start_angle
        )


def _pair(sec: _Section) -> tuple[ScannerGeometry, tuple[FocalSpotSpec, ...]]:
    try:
        geom = ScannerGeometry(
            r_so=sec.get("r_so_mm", check=_POS[0], why=_POS[1]),
            r_sd=sec.get("r_sd_mm", check=_POS[0], why=_POS[1]),
            D_c=sec.get("channel_pitch_mm", check=_POS[0], why=_POS[1]),
            D_r=sec.get("row_pitch_mm", check=_POS[0], why=_POS[1]),
            M_c=sec.get("n_channels", int, check=lambda v: v >= 1, why=">= 1"),
            M_r=sec.get("n_rows", int, check=lambda v: v >= 1, why=">= 1"),
            tau=_angle(sec, "anode_tilt", 0.12),
        )
    except GeometryError as exc:
        raise sec.error(str(exc)) from None
    if sec.has("focal_spots"):
        spots = []
        for s in sec.items("focal_spots"):
            du = s.get("du_mm", default=0.0)
            if s.has("dv_mm") and s.has("dw_mm"):
                raise s.error("dw follows from dv and the anode tilt; give one of them", "dw_mm")
            if s.has("dw_mm"):
                try:
                    spots.append(FocalSpotSpec.from_z_deflection(geom, du, s.get("dw_mm")))
                except GeometryError as exc:
                    raise s.error(str(exc), "dw_mm") from None
            else:
                spots.append(FocalSpotSpec.on_anode(geom, du, s.get("dv_mm", default=0.0)))
            s.finish()
        if not spots:
            raise sec.error("at least one focal spot is required", "focal_spots")
        if sec.has("n_focal_spots"):
            raise sec.error("give either focal_spots or n_focal_spots", "n_focal_spots")
    else:
        n = sec.get("n_focal_spots", int, default=2, check=lambda v: v in (1, 2), why="1 or 2 (list others explicitly)")
        spots = list(default_spots(geom, n))
    sec.finish()
    return geom, tuple(spots)


def _primitive(sec: _Section):
    kind = sec.get("type", str)
    value = sec.get("value_hu")
    pos = _POS
    try:
        if kind == "cylinder":
            prim = Cylinder(
                sec.get("center_mm", "vec3", default=(0.0, 0.0, 0.0)),
                sec.get("radius_mm", check=pos[0], why=pos[1]),
                sec.get("height_mm", check=pos[0], why=pos[1]),
                value,
            )
        elif kind == "box":
            size = sec.get("size_mm", "vec3", check=lambda v: min(v) > 0, why="all dimensions positive")
            prim = Box(sec.get("center_mm", "vec3", default=(0.0, 0.0, 0.0)), size, value)
        elif kind == "bar_pattern":
            prim = BarPattern(
                sec.get("center_mm", "vec3", default=(0.0, 0.0, 0.0)),
                sec.get("frequency_per_mm", check=pos[0], why=pos[1]),
                sec.get("n_bars", int, check=lambda v: v >= 1, why=">= 1"),
                sec.get("bar_length_mm", check=pos[0], why=pos[1]),
                sec.get("height_mm", check=pos[0], why=pos[1]),
                value,
                sec.get("orientation", str, default="x", check=lambda v: v in ("x", "y"), why="'x' or 'y'"),
            )
        elif kind == "wire_ramp":
            prim = WireRamp(
                sec.get("center_mm", "vec3", default=(0.0, 0.0, 0.0)),
                sec.get("n_wires", int, check=lambda v: v >= 1, why=">= 1"),
                sec.get("spacing_mm"),
                sec.get("z_step_mm"),
                sec.get("wire_width_mm", check=pos[0], why=pos[1]),
                sec.get("length_mm", check=pos[0], why=pos[1]),
                value,
            )
        else:
            raise sec.error(f"unknown primitive type {kind!r}", "type")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise sec.error(str(exc)) from None
    sec.finish()
    return prim


def _phantom(sec: _Section) -> PhantomSpec:
    background = sec.get("background_hu", default=-1000.0)
    prims: list = []
    preset = sec.get("preset", str, default=None)
    if preset is not None:
        if preset != "acr_like":
            raise sec.error(f"unknown preset {preset!r}", "preset")
        prims.extend(acr_like_phantom(radius=sec.get("preset_radius_mm", default=100.0, check=_POS[0])).primitives)
    prims.extend(_primitive(s) for s in sec.items("objects"))
    sec.finish()
    return PhantomSpec(prims, background)


def _recon(sec: _Section) -> ReconConfig:
    rc = ReconConfig(
        prior_strength=sec.get("prior_strength", default=1e-4, check=_NONNEG[0], why=_NONNEG[1]),
        prior_p=sec.get("prior_p", default=2.0),
        prior_q=sec.get("prior_q", default=1.2),
        prior_c_hu=sec.get("prior_c_hu", default=10.0, check=_POS[0], why=_POS[1]),
        sigma=sec.get("sigma", default=None, check=_POS[0], why=_POS[1]),
        rho=sec.get("rho", default=0.8, check=lambda v: 0 < v <= 1, why="must lie in (0, 1]"),
        tol_hu=sec.get("tol_hu", default=0.1, check=_POS[0], why=_POS[1]),
        max_iters=sec.get("max_iters", int, default=100, check=lambda v: v >= 0, why=">= 0"),
        inner_iters=sec.get("inner_iters", int, default=20, check=lambda v: v >= 1, why=">= 1"),
        threads=sec.get("threads", int, default=None, check=lambda v: v >= 1, why=">= 1"),
    )
    if not 1.0 <= rc.prior_q <= rc.prior_p <= 2.0:
        raise sec.error(f"need 1 <= prior_q <= prior_p <= 2, got p={rc.prior_p}, q={rc.prior_q}", "prior_q")
    sec.finish()
    return rc


def config_hash(data) -> str:
    """SHA-256 of the parsed config in canonical JSON (comments and layout do not count)."""
    return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def parse_config(text: str, source: str = "") -> ScanConfig:
    data, lines = _compose(text, source)
    root = _Section(data, "", lines, source)

    scanner = root.section("scanner", required=True)
    pair_secs = scanner.items("pairs")
    if not 1 <= len(pair_secs) <= 2:
        raise scanner.error("need one or two source-detector pairs", "pairs")
    pairs = tuple(_pair(s) for s in pair_secs)
    layout = DualSourceLayout(pairs, _angle(scanner, "dbeta_12", 0.0), scanner.get("dz_12_mm", default=0.0))
    scanner.finish()

    scan = root.section("scan", required=True)
    views = scan.get("views_per_rotation", int, check=lambda v: v >= 1, why=">= 1")
    rotations = scan.get("rotations", check=_POS[0], why=_POS[1])
    pitch = scan.get("pitch", check=_POS[0], why=_POS[1])
    start = _angle(scan, "start_angle", 0.0)
    scan.finish()

    g = root.section("grid", required=True)
    grid = VoxelGrid(
        g.get("nx", int, check=lambda v: v >= 1, why=">= 1"),
        g.get("ny", int, check=lambda v: v >= 1, why=">= 1"),
        g.get("nz", int, check=lambda v: v >= 1, why=">= 1"),
        g.get("voxel_xy_mm", check=_POS[0], why=_POS[1]),
        g.get("voxel_z_mm", check=_POS[0], why=_POS[1]),
    )
    g.finish()

    phantom = _phantom(root.section("phantom"))

    d = root.section("dose")
    dose = Dose(
        I0=d.get("i0", default=1e5, check=_POS[0], why=_POS[1]),
        sigma_e2=d.get("sigma_e2", default=0.0, check=_NONNEG[0], why=_NONNEG[1]),
        noise=d.get("noise", bool, default=True),
        count_floor=d.get("count_floor", default=1.0, check=_POS[0], why=_POS[1]),
    )
    d.finish()

    recon = _recon(root.section("recon"))
    mu_water = root.get("mu_water_per_mm", default=MU_WATER, check=_POS[0], why=_POS[1])
    seed = root.get("seed", int, default=0, check=lambda v: v >= 0, why=">= 0")
    root.finish()
    return ScanConfig(
        layout, views, rotations, pitch, start, grid, phantom, dose, mu_water, seed, recon,
        text, config_hash(data),
    )


def load_config(path) -> ScanConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", "", None, str(path)) from None
    return parse_config(text, str(path))
