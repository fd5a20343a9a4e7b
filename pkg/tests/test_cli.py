import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import CONFIGS
from dsffs.cli import main
from dsffs.io import load_volume, read_csv, read_pgm16

TINY = str(CONFIGS / "tiny.yaml")


def error_of(capsys):
    err = capsys.readouterr().err
    line = next(l for l in err.splitlines() if l.startswith("dsffs-error "))
    return json.loads(line[len("dsffs-error ") :])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--deterministic", "simulate", TINY, "--out", str(root / "scan")]) == 0
    assert main(["--deterministic", "reconstruct", str(root / "scan"), "--out", str(root / "rec")]) == 0
    return root


def test_simulate_outputs(tiny_run):
    scan = tiny_run / "scan"
    names = sorted(p.name for p in scan.iterdir())
    assert names.count("config.yaml") == 1 and "manifest.json" in names and "phantom.vol" in names
    assert len([n for n in names if n.endswith(".sino")]) == 4
    assert len([n for n in names if n.endswith(".sysm")]) == 4
    man = json.loads((scan / "manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["seed"] == 7 and man["n_blocks"] == 4
    assert man["deterministic"] is True and man["wall_time_s"] == 0.0


def test_reconstruct_outputs(tiny_run):
    rec = tiny_run / "rec"
    man = json.loads((rec / "manifest.json").read_text())
    assert man["converged"] is True and man["iterations"] <= 50
    header, rows = read_csv(rec / "history.csv")
    assert header == ["iteration", "cost", "max_disagreement_hu", "wall_time_s"]
    assert rows[-1, 2] <= 0.1
    assert not np.any(rows[:, 3])
    vol = load_volume(rec / "volume.vol")
    assert vol.unit == "HU" and vol.values.shape == (8, 16, 16)
    assert read_pgm16(rec / "slice_mid.pgm").shape == (16, 16)
    side = json.loads((rec / "slice_mid.pgm.json").read_text())
    assert side["window"] == 400.0
    assert (rec / "convergence.png").stat().st_size > 0


def test_max_iters_zero(tiny_run, tmp_path):
    assert main(["reconstruct", str(tiny_run / "scan"), "--max-iters", "0", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["converged"] is None and man["iterations"] == 0


def test_nonconvergence_exit_code(tiny_run, tmp_path, capsys):
    code = main(["reconstruct", str(tiny_run / "scan"), "--max-iters", "2", "--tol", "1e-6", "--out", str(tmp_path)])
    assert code == 4
    assert (tmp_path / "volume.vol").exists()
    assert error_of(capsys)["category"] == "nonconvergence"


def test_metrics_outputs(tiny_run, tmp_path):
    vol = str(tiny_run / "rec" / "volume.vol")
    code = main([
        "metrics", vol, "--noise-roi", "6:10,6:10", "--streak-roi", "7.5,7.5,3,7",
        "--reference", str(tiny_run / "scan" / "phantom.vol"), "--out", str(tmp_path),
    ])
    assert code == 0
    header, rows = read_csv_text(tmp_path / "scalars.csv")
    assert header == ["metric", "value"]
    names = [r.split(",")[0] for r in rows]
    assert {"noise_variance_hu2", "streak_energy_hu2", "rmse_hu"} <= set(names)
    assert json.loads((tmp_path / "manifest.json").read_text())["subcommand"] == "metrics"


def test_metrics_roi_errors(tiny_run, tmp_path, capsys):
    vol = str(tiny_run / "rec" / "volume.vol")
    assert main(["metrics", vol, "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["category"] == "usage"
    assert main(["metrics", vol, "--noise-roi", "10:40,0:4", "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["category"] == "bounds"
    with pytest.raises(SystemExit) as ex:
        main(["metrics", vol, "--noise-roi", "garbage", "--out", str(tmp_path)])
    assert ex.value.code == 2
    assert error_of(capsys)["category"] == "usage"


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text((CONFIGS / "tiny.yaml").read_text().replace("nx: 16", "nx: -16"))
    assert main(["simulate", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = error_of(capsys)
    assert err["category"] == "config" and err["field"] == "grid.nx" and err["line"] > 0
    assert main(["simulate", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 2
    err = error_of(capsys)
    assert err["category"] == "config" and "cannot read" in err["message"]


def test_threads_validation(tmp_path, capsys):
    assert main(["coverage", TINY, "--threads", "0", "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["category"] == "usage"


def test_coverage_command(tmp_path):
    cfg = str(CONFIGS / "bars_pitch28.yaml")
    assert main(["--deterministic", "coverage", cfg, "--out", str(tmp_path)]) == 0
    cov = json.loads((tmp_path / "manifest.json").read_text())["coverage"]
    assert cov["single_source_gap_fraction"] > 0
    assert cov["union_mm"] > cov["per_pair_union_mm"][0]
    header, _ = read_csv_text(tmp_path / "coverage.csv")
    assert header == ["kind", "z_lo_mm", "z_hi_mm"]


def read_csv_text(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), lines[1:]


def test_subprocess_env_threads(tmp_path):
    env = dict(os.environ, DSFFS_THREADS="2", DSFFS_DETERMINISTIC="1")
    proc = subprocess.run(
        [sys.executable, "-m", "dsffs.cli", "coverage", TINY, "--out", str(tmp_path)],
        env=env, capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["threads"] == 2 and man["deterministic"] is True
    proc = subprocess.run(
        [sys.executable, "-m", "dsffs.cli", "coverage", TINY, "--out", str(tmp_path)],
        env=dict(env, DSFFS_THREADS="many"), capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert proc.stderr.startswith("dsffs-error ")
