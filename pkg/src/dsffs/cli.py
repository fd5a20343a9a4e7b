"""Command-line pipeline: simulate | reconstruct | metrics | coverage.

Exit codes: 0 ok, 2 config/usage/input error, 3 numeric failure,
4 reconstruction did not converge. Every failure also writes one line
``dsffs-error {json}`` to stderr with a ``category`` field.

``DSFFS_THREADS`` sets the default ``--threads``; ``DSFFS_DETERMINISTIC=1``
(or ``--deterministic``) zeroes wall-clock fields so reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScanConfig, load_config, parse_config
from .geometry import GeometryError, z_coverage_intervals
from .io import FormatError, load_scan, load_volume, save_scan, save_volume, write_csv, write_manifest, write_pgm16
from .metrics import AnnulusROI, BoxROI, EdgeNotFound, ROIError, mtf_task, noise_variance, nps, rmse, streak_energy
from .models import DataBlock, PriorParams, statistical_weights
from .projector import MemoryBudgetError, build_system_block
from .simulator import build_phantom, realization_digest, simulate_scan
from .solver import AgentError, reconstruct

log = logging.getLogger("dsffs")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, category: str, message: str, code: int = EXIT_CONFIG, **extra):
        super().__init__(message)
        self.category = category
        self.code = code
        self.extra = extra


def _report(category: str, message: str, code: int, **extra) -> int:
    payload = {"category": category, "exit_code": code, "message": message}
    payload.update({k: v for k, v in extra.items() if v not in (None, "")})
    print("dsffs-error " + json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(_report("usage", message, EXIT_CONFIG))


def _box(text: str) -> BoxROI:
    """``r0:r1,c0:c1`` in pixels (half-open)."""
    try:
        rows, cols = text.split(",")
        r0, r1 = (int(v) for v in rows.split(":"))
        c0, c1 = (int(v) for v in cols.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r0:r1,c0:c1, got {text!r}") from None
    if r1 <= r0 or c1 <= c0:
        raise argparse.ArgumentTypeError(f"empty ROI {text!r}")
    return BoxROI(r0, r1, c0, c1)


def _annulus(text: str) -> AnnulusROI:
    """``row,col,r_in,r_out`` in pixels."""
    try:
        row, col, r_in, r_out = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected row,col,r_in,r_out, got {text!r}") from None
    if not 0 <= r_in < r_out:
        raise argparse.ArgumentTypeError(f"empty annulus {text!r}")
    return AnnulusROI(row, col, r_in, r_out)


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _default_threads() -> int:
    raw = os.environ.get("DSFFS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError("config", f"DSFFS_THREADS must be an integer, got {raw!r}", field="DSFFS_THREADS") from None
    if n < 1:
        raise CLIError("config", "DSFFS_THREADS must be >= 1", field="DSFFS_THREADS")
    return n


class _Run:
    """Collects manifest fields and times the subcommand."""

    def __init__(self, args, out: Path):
        self.args = args
        self.out = out
        self.deterministic = args.deterministic or os.environ.get("DSFFS_DETERMINISTIC", "") == "1"
        self.t0 = time.perf_counter()
        self.manifest: dict = {
            "tool": "dsffs",
            "version": __version__,
            "subcommand": args.command,
            "deterministic": self.deterministic,
            "threads": args.threads,
            "output_dir": str(out),
            "outputs": [],
        }

    def wall(self, t: float) -> float:
        return 0.0 if self.deterministic else t

    def add(self, *paths) -> None:
        for p in paths:
            self.manifest["outputs"].append(Path(p).name)

    def finish(self) -> None:
        self.manifest["outputs"] = sorted(set(self.manifest["outputs"]))
        self.manifest["wall_time_s"] = self.wall(time.perf_counter() - self.t0)
        write_manifest(self.out / "manifest.json", self.manifest)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError("io", f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.pitch is not None:
        cfg.pitch = args.pitch
    if args.no_noise:
        cfg.dose.noise = False
    seed = cfg.seed if args.seed is None else args.seed
    out = _out_dir(args.out)
    run = _Run(args, out)
    schedule = cfg.schedule()
    phantom = build_phantom(cfg.phantom, cfg.grid)
    # flags are part of what was simulated, so they enter the stored config
    text = _effective_config_text(cfg, seed)
    chash = parse_config(text).hash
    scan = simulate_scan(phantom, schedule, cfg.dose, seed, cfg.mu_water, config_hash=chash, threads=args.threads)
    run.add(*save_scan(scan, out, text))
    save_volume(phantom, out / "phantom.vol")
    run.add(out / "phantom.vol")
    run.manifest.update(
        config=str(args.config),
        config_hash=chash,
        seed=seed,
        n_blocks=len(scan.blocks),
        n_views=len(schedule),
        n_floored=scan.n_floored,
        data_digest=realization_digest(scan),
    )
    run.finish()
    print(f"wrote {len(scan.blocks)} blocks to {out}")
    return EXIT_OK


def _effective_config_text(cfg: ScanConfig, seed: int) -> str:
    """Config text with overridden scan fields rewritten (keeps the file human-readable)."""
    import yaml

    data = yaml.safe_load(cfg.text) or {}
    data["seed"] = int(seed)
    data.setdefault("scan", {})["pitch"] = float(cfg.pitch)
    data.setdefault("dose", {})["noise"] = bool(cfg.dose.noise)
    return yaml.safe_dump(data, sort_keys=True)


def load_data_blocks(in_dir: Path):
    """Config, scan and weighted data blocks of a directory written by 'simulate'."""
    in_dir = Path(in_dir)
    cfg_path = in_dir / "config.yaml"
    if not cfg_path.exists():
        raise CLIError("config", f"{in_dir} has no config.yaml", field="config.yaml")
    cfg = load_config(cfg_path)
    scan = load_scan(in_dir, cfg.grid)
    if scan.config_hash != cfg.hash:
        raise CLIError("config", "block files were not produced from this config.yaml (hash mismatch)")
    schedule = None
    raw = []
    for b in scan.blocks:
        if b.system is None:
            schedule = schedule or cfg.schedule()
            views = schedule.block(b.pair_index, b.spot_index)
            layout = schedule.layout
            b.system = build_system_block(
                layout.pair_geometry(b.pair_index), layout.pairs[b.pair_index][1][b.spot_index], views, cfg.grid,
                block_index=b.block_index,
            )
        if b.system.shape[1] != cfg.grid.size:
            raise CLIError("config", f"block {b.block_index} has {b.system.shape[1]} columns, grid has {cfg.grid.size}")
        w = statistical_weights(counts=b.counts, sigma_e2=scan.dose.sigma_e2, count_floor=scan.dose.count_floor, normalize=False)
        raw.append((b, w.values))
    top = max(float(w.max()) for _, w in raw)
    blocks = [DataBlock(b.system, b.sinogram, w / top if top > 0 else w) for b, w in raw]
    return cfg, scan, blocks


def cmd_reconstruct(args) -> int:
    in_dir = Path(args.blocks)
    cfg, scan, blocks = load_data_blocks(in_dir)
    rc = cfg.recon
    strength = rc.prior_strength if args.prior_strength is None else args.prior_strength
    p = rc.prior_p if args.prior_p is None else args.prior_p
    q = rc.prior_q if args.prior_q is None else args.prior_q
    c = rc.prior_c_hu if args.prior_c is None else args.prior_c
    try:
        prior = PriorParams(strength, p, q, c)
    except ValueError as exc:
        raise CLIError("config", str(exc), field="prior") from None
    threads = args.threads if args.threads_set else (rc.threads or args.threads)
    max_iters = rc.max_iters if args.max_iters is None else args.max_iters
    out = _out_dir(args.out)
    run = _Run(args, out)
    res = reconstruct(
        blocks, cfg.grid, prior,
        sigma=args.sigma if args.sigma is not None else rc.sigma,
        rho=rc.rho if args.rho is None else args.rho,
        tol=rc.tol_hu if args.tol is None else args.tol,
        max_iters=max_iters,
        inner_iters=rc.inner_iters if args.inner_iters is None else args.inner_iters,
        threads=threads,
        mu_water=cfg.mu_water,
    )
    if not np.all(np.isfinite(res.volume.values)):
        raise CLIError("numeric", "reconstruction produced non-finite values", EXIT_NUMERIC)
    save_volume(res.volume, out / "volume.vol")
    hu_per_mu = 1000.0 / cfg.mu_water
    rows = [
        (h["iteration"], h["cost"], h["max_disagreement"] * hu_per_mu, run.wall(h["wall_time"]))
        for h in res.history
    ]
    write_csv(out / "history.csv", ["iteration", "cost", "max_disagreement_hu", "wall_time_s"], rows)
    run.add(out / "volume.vol", out / "history.csv")
    if res.history:
        from .plotting import plot_convergence

        plot_convergence(res.history, out / "convergence.png", cfg.mu_water)
        run.add(out / "convergence.png")
    mid = res.volume.values[res.volume.values.shape[0] // 2]
    sidecar = write_pgm16(
        out / "slice_mid.pgm", mid, args.window, args.level,
        {"unit": "HU", "slice_index": res.volume.values.shape[0] // 2, "pixel_mm": cfg.grid.delta_xy},
    )
    run.add(out / "slice_mid.pgm", sidecar)
    converged = res.converged if max_iters > 0 else None
    run.manifest.update(
        input_dir=str(in_dir),
        config_hash=cfg.hash,
        seed=scan.seed,
        n_blocks=len(blocks),
        prior={"strength": strength, "p": p, "q": q, "c_hu": c},
        sigma=res.state.sigma,
        rho=res.state.rho,
        iterations=res.iterations,
        converged=converged,
        final_disagreement_hu=res.history[-1]["max_disagreement"] * hu_per_mu if res.history else None,
        threads=threads,
    )
    run.finish()
    if converged is False:
        return _report(
            "nonconvergence",
            f"did not reach tol within {max_iters} iterations; partial result written to {out}",
            EXIT_NONCONVERGED,
        )
    print(f"reconstructed {cfg.grid.shape} volume in {res.iterations} iterations -> {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if not (args.mtf_roi or args.nps_roi or args.streak_roi or args.noise_roi or args.reference):
        raise CLIError("usage", "give at least one of --mtf-roi, --nps-roi, --streak-roi, --noise-roi, --reference")
    vol = load_volume(args.volume).to_hu()
    stack = vol.values
    if args.slices is not None:
        lo, hi = (int(v) for v in args.slices)
        if not 0 <= lo < hi <= stack.shape[0]:
            raise CLIError("bounds", f"slices {lo}:{hi} outside 0:{stack.shape[0]}")
        stack = stack[lo:hi]
    px = vol.grid.delta_xy
    out = _out_dir(args.out)
    run = _Run(args, out)
    scalars = []
    from . import plotting

    if args.mtf_roi:
        m = mtf_task(stack, px, args.mtf_roi, circle_center=args.mtf_circle)
        write_csv(out / "mtf.csv", ["frequency_per_mm", "mtf"], zip(m.frequency, m.mtf))
        plotting.plot_mtf(m.frequency, m.mtf, m.f10, out / "mtf.png", f_max=0.5 / px)
        run.add(out / "mtf.csv", out / "mtf.png")
        scalars += [("mtf_f10_per_mm", m.f10), ("edge_contrast_hu", m.contrast)]
    if args.nps_roi:
        n = nps(stack, px, roi_size=args.nps_size, region=args.nps_roi)
        write_csv(out / "nps.csv", ["frequency_per_mm", "nps_hu2_mm2"], zip(n.frequency, n.power))
        write_csv(out / "nps_axial.csv", ["frequency_per_mm", "nps_hu2_mm2"], zip(n.axial_frequency, n.axial_cut))
        plotting.plot_nps(n.frequency, n.power, out / "nps.png")
        run.add(out / "nps.csv", out / "nps_axial.csv", out / "nps.png")
        scalars += [("nps_integral_hu2", n.integral), ("nps_n_rois", n.n_rois)]
    if args.noise_roi:
        scalars.append(("noise_variance_hu2", noise_variance(stack, args.noise_roi)))
    if args.streak_roi:
        scalars.append(("streak_energy_hu2", float(np.mean([streak_energy(s, args.streak_roi) for s in stack]))))
    if args.reference:
        ref = load_volume(args.reference).to_hu()
        if ref.values.shape != vol.values.shape:
            raise CLIError("config", f"reference shape {ref.values.shape} != volume {vol.values.shape}")
        scalars.append(("rmse_hu", rmse(vol.values, ref.values)))
    write_csv(out / "scalars.csv", ["metric", "value"], scalars)
    run.add(out / "scalars.csv")
    run.manifest.update(volume=str(args.volume), metrics=dict(scalars))
    run.finish()
    for k, v in scalars:
        print(f"{k}: {v:.6g}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = load_config(args.config)
    if args.pitch is not None:
        cfg.pitch = args.pitch
    out = _out_dir(args.out)
    run = _Run(args, out)
    beta = math.radians(args.beta_deg)
    schedule = cfg.schedule()
    rep = z_coverage_intervals(None, schedule, beta)
    rows = []
    for p, ivs in enumerate(rep.per_pair):
        rows += [(f"pair{p + 1}", lo, hi) for lo, hi in ivs]
    rows += [("union", lo, hi) for lo, hi in rep.union]
    rows += [("gap", lo, hi) for lo, hi in rep.gaps]
    write_csv(out / "coverage.csv", ["kind", "z_lo_mm", "z_hi_mm"], rows)
    from .plotting import plot_coverage

    plot_coverage(rep, out / "coverage.png")
    run.add(out / "coverage.csv", out / "coverage.png")
    summary = rep.as_dict()
    summary["single_source_gap_fraction"] = 1.0 - rep.per_pair_union[0] / rep.scan_length
    summary["pitch"] = cfg.pitch
    summary["beta_query_deg"] = args.beta_deg
    run.manifest.update(config=str(args.config), config_hash=cfg.hash, coverage=summary)
    run.finish()
    print(
        f"scan {rep.scan_length:.4g} mm, union {rep.union_length:.4g} mm, "
        f"gap fraction {rep.gap_fraction:.4g} (pair 1 alone {summary['single_source_gap_fraction']:.4g})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dsffs", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"dsffs {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--deterministic", action="store_true", help="zero wall-clock fields in outputs")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a noisy scan from a config file")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--pitch", type=float)
    s.add_argument("--no-noise", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="MAP reconstruction of a simulated scan directory")
    r.add_argument("blocks", help="directory written by 'simulate'")
    r.add_argument("--prior-strength", type=float)
    r.add_argument("--prior-p", type=float)
    r.add_argument("--prior-q", type=float)
    r.add_argument("--prior-c", type=float, help="transition scale in HU")
    r.add_argument("--sigma", type=float, help="proximal scale in mm^-1")
    r.add_argument("--rho", type=float)
    r.add_argument("--tol", type=float, help="stopping tolerance in HU")
    r.add_argument("--max-iters", type=int)
    r.add_argument("--inner-iters", type=int)
    r.add_argument("--window", type=float, default=400.0, help="PGM export window (HU)")
    r.add_argument("--level", type=float, default=40.0, help="PGM export level (HU)")
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    m = sub.add_parser("metrics", help="image-quality metrics of a volume")
    m.add_argument("volume")
    m.add_argument("--mtf-roi", type=_box, help="r0:r1,c0:c1 around one edge")
    m.add_argument("--mtf-circle", type=_pair, help="row,col of a circular edge's center within the ROI")
    m.add_argument("--nps-roi", type=_box, help="r0:r1,c0:c1 noise-only region")
    m.add_argument("--nps-size", type=int, default=32)
    m.add_argument("--noise-roi", type=_box)
    m.add_argument("--streak-roi", type=_annulus, help="row,col,r_in,r_out")
    m.add_argument("--reference", help="volume for RMSE")
    m.add_argument("--slices", type=_pair, help="z slice range lo,hi")
    m.add_argument("--out", required=True)
    m.add_argument("--threads", type=int, default=None)
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("coverage", help="z-coverage intervals and gaps at one view angle")
    c.add_argument("config")
    c.add_argument("--beta-deg", type=float, default=90.0)
    c.add_argument("--pitch", type=float)
    c.add_argument("--out", required=True)
    c.add_argument("--threads", type=int, default=None)
    c.set_defaults(func=cmd_coverage)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.threads_set = args.threads is not None
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise CLIError("usage", "--threads must be >= 1", field="--threads")
        return args.func(args)
    except CLIError as exc:
        return _report(exc.category, str(exc), exc.code, **exc.extra)
    except ConfigError as exc:
        return _report("config", str(exc), EXIT_CONFIG, field=exc.field, line=exc.line, source=exc.source)
    except ROIError as exc:
        return _report("bounds", str(exc), EXIT_CONFIG)
    except (FormatError, GeometryError) as exc:
        return _report("config", str(exc), EXIT_CONFIG)
    except MemoryBudgetError as exc:
        return _report("config", str(exc), EXIT_CONFIG, required_bytes=exc.required_bytes)
    except OSError as exc:
        return _report("io", f"{exc.strerror or exc}: {exc.filename or ''}".strip(": "), EXIT_CONFIG)
    except (AgentError, EdgeNotFound, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _report("numeric", str(exc), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
