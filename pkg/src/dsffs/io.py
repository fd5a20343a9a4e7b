"""File formats: volume and scan containers, 16-bit PGM slices, CSV, run manifests.

All binary containers are little-endian with an 8-byte magic string and a
format version, followed by fixed headers and raw arrays.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import Volume
from .projector import VoxelGrid, load_block, save_block
from .simulator import Dose, ScanBlock, ScanRealization

VOLUME_MAGIC = b"DSFFSVOL"
SCAN_MAGIC = b"DSFFSSNO"
FORMAT_VERSION = 1

_VOL_HEADER = struct.Struct("<8sIIIIddddd8s")
_SCAN_HEADER = struct.Struct("<8sIIIIIIIdddqqB64s")


class FormatError(ValueError):
    pass


def save_volume(volume: Volume, path) -> None:
    """Header (dims, voxel pitch, origin, unit tag) followed by float64 values in (z, y, x) order."""
    g = volume.grid
    header = _VOL_HEADER.pack(
        VOLUME_MAGIC, FORMAT_VERSION, g.n_x, g.n_y, g.n_z, g.delta_xy, g.delta_z, *g.origin,
        volume.unit.encode("ascii").ljust(8, b"\0"),
    )
    _atomic_write(path, header + np.ascontiguousarray(volume.values, dtype="<f8").tobytes())


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _VOL_HEADER.size:
        raise FormatError(f"{path}: truncated volume file")
    magic, version, nx, ny, nz, dxy, dz, ox, oy, oz, unit = _VOL_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    n = nx * ny * nz
    if len(raw) != _VOL_HEADER.size + 8 * n:
        raise FormatError(f"{path}: expected {n} voxels")
    grid = VoxelGrid(nx, ny, nz, dxy, dz, (ox, oy, oz))
    values = np.frombuffer(raw, "<f8", n, _VOL_HEADER.size).reshape(grid.shape).copy()
    return Volume(grid, values, unit.rstrip(b"\0").decode("ascii"))


def _scan_block_bytes(b: ScanBlock, scan: ScanRealization) -> bytes:
    n_views, M_r, M_c = b.sinogram.shape
    header = _SCAN_HEADER.pack(
        SCAN_MAGIC, FORMAT_VERSION, b.block_index, b.pair_index, b.spot_index, n_views, M_r, M_c,
        scan.dose.I0, scan.dose.sigma_e2, scan.dose.count_floor, scan.seed, b.n_floored, int(scan.dose.noise),
        scan.config_hash.encode("ascii").ljust(64, b"\0"),
    )
    parts = [
        header,
        np.asarray(b.betas, dtype="<f8").tobytes(),
        np.asarray(b.time_indices, dtype="<i8").tobytes(),
        np.ascontiguousarray(b.sinogram, dtype="<f8").tobytes(),
        np.ascontiguousarray(b.counts, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def save_scan(scan: ScanRealization, out_dir, config_text: str | None = None) -> list[Path]:
    """Write one ``block_KK.sino`` (data) and ``block_KK.sysm`` (system matrix) per block."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for b in scan.blocks:
        p = out / f"block_{b.block_index:02d}.sino"
        _atomic_write(p, _scan_block_bytes(b, scan))
        written.append(p)
        if b.system is not None:
            q = out / f"block_{b.block_index:02d}.sysm"
            tmp = q.with_suffix(".sysm.tmp")
            save_block(b.system, tmp)
            os.replace(tmp, q)
            written.append(q)
    if config_text is not None:
        p = out / "config.yaml"
        _atomic_write(p, config_text.encode())
        written.append(p)
    return written


def load_scan_block(path) -> tuple[ScanBlock, Dose, int, str]:
    raw = Path(path).read_bytes()
    if len(raw) < _SCAN_HEADER.size:
        raise FormatError(f"{path}: truncated scan file")
    (magic, version, k, pair, spot, n_views, M_r, M_c, I0, sigma_e2, floor, seed, n_floored, noise,
     chash) = _SCAN_HEADER.unpack_from(raw)
    if magic != SCAN_MAGIC:
        raise FormatError(f"{path}: not a scan block file")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported scan version {version}")
    n = n_views * M_r * M_c
    expected = _SCAN_HEADER.size + 16 * n_views + 16 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} does not match header ({expected})")
    off = _SCAN_HEADER.size
    betas = np.frombuffer(raw, "<f8", n_views, off).copy()
    off += 8 * n_views
    times = np.frombuffer(raw, "<i8", n_views, off).copy()
    off += 8 * n_views
    sino = np.frombuffer(raw, "<f8", n, off).reshape(n_views, M_r, M_c).copy()
    off += 8 * n
    counts = np.frombuffer(raw, "<f8", n, off).reshape(n_views, M_r, M_c).copy()
    block = ScanBlock(k, pair, spot, betas, times, sino, counts, n_floored)
    return block, Dose(I0, sigma_e2, bool(noise), floor), seed, chash.rstrip(b"\0").decode("ascii")


def load_scan(in_dir, grid: VoxelGrid | None = None) -> ScanRealization:
    """Read every block of a scan directory; all blocks must share one config hash and seed."""
    d = Path(in_dir)
    files = sorted(d.glob("block_*.sino"))
    if not files:
        raise FormatError(f"{d}: no block_*.sino files")
    blocks, dose, seed, chash = [], None, None, None
    for f in files:
        b, dz, s, h = load_scan_block(f)
        if chash is None:
            dose, seed, chash = dz, s, h
        elif h != chash or s != seed:
            raise FormatError(f"{f}: config hash or seed differs from {files[0].name}")
        sysm = f.with_suffix(".sysm")
        if sysm.exists():
            b.system = load_block(sysm, grid)
            if b.system.sino_shape != b.sinogram.shape:
                raise FormatError(f"{sysm}: system shape {b.system.sino_shape} != sinogram {b.sinogram.shape}")
        blocks.append(b)
    return ScanRealization(blocks, seed, dose, chash)


def write_pgm16(path, image, window: float, level: float, meta: dict | None = None) -> Path:
    """Binary 16-bit PGM of ``image`` mapped through ``window``/``level``, plus a JSON sidecar."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D slice")
    if window <= 0:
        raise ValueError("window must be positive")
    lo = level - window / 2.0
    scaled = np.clip((img - lo) / window, 0.0, 1.0)
    data = np.rint(scaled * 65535.0).astype(">u2")
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())
    side = {"window": float(window), "level": float(level), "maxval": 65535, "mapping": "v = round(65535*clip((x-(level-window/2))/window,0,1))"}
    side.update(meta or {})
    sidecar = Path(str(path) + ".json")
    _atomic_write(sidecar, (json.dumps(side, indent=2, sort_keys=True) + "\n").encode())
    return sidecar


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, ">u2", w * h, pos + 1).reshape(h, w).astype(np.uint16)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with tempfile.NamedTemporaryFile("w", newline="", dir=path.parent, delete=False, suffix=".tmp") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        tmp = fh.name
    os.replace(tmp, path)
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, manifest: dict) -> None:
    """JSON manifest, written to a temp file and renamed so readers never see a partial file."""
    _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
