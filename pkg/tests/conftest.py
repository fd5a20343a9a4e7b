import math
from pathlib import Path

import numpy as np
import pytest

from dsffs.geometry import DualSourceLayout, ScannerGeometry, default_spots, dual_source_view_schedule
from dsffs.models import DataBlock
from dsffs.projector import VoxelGrid, build_system_block, forward_project

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def small_layout():
    g1 = ScannerGeometry(595.0, 1085.6, 4.0, 3.0, 48, 8, tau=0.12)
    g2 = ScannerGeometry(595.0, 1085.6, 4.0, 3.0, 36, 8, tau=0.12)
    return DualSourceLayout(((g1, default_spots(g1)), (g2, default_spots(g2))), math.radians(95.0), 0.88)


def make_blocks(schedule, grid, x_true, noise=0.0, seed=1, keys=None):
    """One DataBlock per (pair, spot) with unit weights."""
    rng = np.random.default_rng(seed)
    out = []
    for k, (p, s) in enumerate(keys or schedule.block_keys()):
        views = schedule.block(p, s)
        blk = build_system_block(
            schedule.layout.pair_geometry(p), schedule.layout.pairs[p][1][s], views, grid, block_index=k
        )
        y = forward_project(blk, x_true)
        if noise:
            y = y + noise * rng.standard_normal(y.shape)
        out.append(DataBlock(blk, y, np.ones(y.size)))
    return out


@pytest.fixture(scope="session")
def ce_problem():
    """16x16x8 volume seen by 2 pairs x 2 focal spots (K = 4) over two rotations."""
    layout = small_layout()
    schedule = dual_source_view_schedule(layout, 24, 2, 1.0, beta_start=-2 * math.pi)
    grid = VoxelGrid(16, 16, 8, 4.0, 1.5)
    rng = np.random.default_rng(1)
    x_true = 0.02 * (1 + 0.2 * rng.standard_normal(grid.shape))
    blocks = make_blocks(schedule, grid, x_true, noise=1e-3)
    return schedule, grid, x_true, blocks
