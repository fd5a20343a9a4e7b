"""Consensus Equilibrium reconstruction with coordinate-descent proximal agents.

Each agent owns one system block (one pair and focal spot, or any other
partition of the views) and solves its proximal problem

    F_k(v; z) = 1/2 ||y_k - A_k v||^2_{D_k} + R(v)/K + ||v - z||^2 / (2 sigma^2)

at the anchor ``z = X + U_k``. The consensus loop reflects, relaxes and
averages agent outputs until every agent agrees with the consensus volume.
All volumes inside the solver are attenuation in mm^-1.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .models import (
    MU_WATER,
    DataBlock,
    PriorParams,
    Volume,
    as_data_blocks,
    mu_to_hu,
    negative_log_posterior,
    prior_cost,
    quadratic_prior_hessian,
)
from .projector import VoxelGrid

log = logging.getLogger(__name__)


class AgentError(RuntimeError):
    def __init__(self, agent_index: int, message: str):
        super().__init__(f"agent {agent_index}: {message}")
        self.agent_index = agent_index


class ProblemTooLarge(ValueError):
    pass


class AgentProblem:
    """One proximal agent: a data block, its share of the prior and a residual cache."""

    def __init__(self, data: DataBlock, shape: tuple[int, int, int], prior: PriorParams | None, n_agents: int):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.data = data
        self.shape = tuple(shape)
        if int(np.prod(self.shape)) != data.block.shape[1]:
            raise ValueError("block columns do not match the volume shape")
        self.prior = prior
        self.n_agents = n_agents
        csc = sp.csc_matrix(data.block.matrix)
        csc.sort_indices()
        self._indptr = csc.indptr.astype(np.int64)
        self._indices = csc.indices.astype(np.int64)
        self._data = csc.data.astype(np.float64)
        self.theta2 = np.asarray(csc.multiply(csc).T @ data.weights).ravel()
        # absolute round-off floor for cost comparisons near a zero-residual fit
        self.cost_floor = 1e-13 * (0.5 * float(np.dot(data.weights * data.sinogram, data.sinogram)) + 1e-300)
        self._nbr_w = np.concatenate([prior.weights, prior.weights]) if prior is not None else np.zeros(26)
        self.v: np.ndarray | None = None
        self.e: np.ndarray | None = None

    @property
    def prior_scale(self) -> float:
        if self.prior is None or self.prior.strength == 0:
            return 0.0
        return 2.0 * self.prior.strength / self.n_agents

    def residual(self, v: np.ndarray) -> np.ndarray:
        return self.data.sinogram - self.data.block.matrix @ v.ravel()

    def cost(self, v: np.ndarray, anchor: np.ndarray, sigma: float) -> float:
        e = self.residual(v) if v is not self.v else self.e
        f = 0.5 * float(np.dot(self.data.weights * e, e))
        if self.prior_scale > 0:
            f += prior_cost(v.reshape(self.shape), self.prior) / self.n_agents
        dv = v.ravel() - anchor.ravel()
        return f + float(dv @ dv) / (2.0 * sigma * sigma)

    def warm_start(self, v: np.ndarray) -> None:
        self.v = np.array(v, dtype=float).ravel()
        self.e = self.residual(self.v)

    def sweep(self, anchor: np.ndarray, sigma: float) -> int:
        p = self.prior
        nz, ny, nx = self.shape
        return _kernels.icd_sweep(
            self.v, np.ascontiguousarray(anchor.ravel(), dtype=float), nz, ny, nx,
            self._indptr, self._indices, self._data, self.data.weights, self.e, self.theta2,
            1.0 / (sigma * sigma), self.prior_scale,
            p.p if p else 2.0, p.q if p else 2.0, p.c if p else 1.0,
            _kernels.NEIGHBOR_OFFSETS, self._nbr_w,
        )


def proximal_agent_solve(
    agent: AgentProblem,
    anchor: np.ndarray,
    sigma: float,
    inner_iters: int = 20,
    inner_tol: float = 1e-6,
    start: np.ndarray | None = None,
    agent_index: int = 0,
) -> np.ndarray:
    """Approximate proximal map of one agent at ``anchor`` by coordinate descent.

    Starts from ``start``, else the agent's previous solution, else the
    anchor. Stops once a sweep lowers F_k by less than ``inner_tol``
    relative, or after ``inner_iters`` sweeps.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    anchor = np.asarray(anchor, dtype=float).ravel()
    if anchor.size != agent.data.block.shape[1]:
        raise ValueError("anchor does not match the agent grid")
    if start is not None:
        agent.warm_start(start)
    elif agent.v is None:
        agent.warm_start(anchor)
    f_prev = agent.cost(agent.v, anchor, sigma)
    for _ in range(inner_iters):
        agent.sweep(anchor, sigma)
        f = agent.cost(agent.v, anchor, sigma)
        scale = max(abs(f_prev), agent.cost_floor)
        if f > f_prev + 1e-9 * scale:
            raise AgentError(agent_index, f"proximal cost increased from {f_prev:.6g} to {f:.6g}")
        if f_prev - f <= inner_tol * scale:
            break
        f_prev = f
    return agent.v.copy()


@dataclass
class CEState:
    X: np.ndarray
    V: list[np.ndarray]
    W: list[np.ndarray]
    U: list[np.ndarray]
    sigma: float
    rho: float = 0.8
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for arr in (*self.V, *self.W, *self.U):
            if arr.shape != self.X.shape:
                raise ValueError("agent volumes must share the consensus grid")

    @classmethod
    def initialize(cls, x0: np.ndarray, n_agents: int, sigma: float, rho: float = 0.8) -> "CEState":
        """V = W = x0 and U = 0, so every first proximal input equals x0."""
        x0 = np.asarray(x0, dtype=float).ravel()
        return cls(
            X=x0.copy(),
            V=[x0.copy() for _ in range(n_agents)],
            W=[x0.copy() for _ in range(n_agents)],
            U=[np.zeros_like(x0) for _ in range(n_agents)],
            sigma=sigma,
            rho=rho,
        )

    @property
    def disagreement(self) -> float:
        return max(float(np.max(np.abs(v - self.X))) for v in self.V)


def ce_iterate(
    state: CEState,
    agents: Sequence[AgentProblem],
    inner_iters: int = 20,
    inner_tol: float = 1e-6,
    threads: int = 1,
    cost_fn=None,
) -> CEState:
    """One consensus sweep over all agents (updates ``state`` in place)."""
    K = len(agents)
    if K != len(state.V):
        raise ValueError("agent count does not match the state")
    t0 = time.perf_counter()
    anchors = [state.X + state.U[k] for k in range(K)]

    def solve(k):
        try:
            return proximal_agent_solve(agents[k], anchors[k], state.sigma, inner_iters, inner_tol, agent_index=k)
        except AgentError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-tagged with the agent index
            raise AgentError(k, str(exc)) from exc

    if threads > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=min(threads, K)) as pool:
            V = list(pool.map(solve, range(K)))
    else:
        V = [solve(k) for k in range(K)]

    W_prev = [w.copy() for w in state.W]
    W = [2.0 * V[k] - anchors[k] for k in range(K)]
    W = [state.rho * W[k] + (1.0 - state.rho) * W_prev[k] for k in range(K)]
    X = W[0].copy()
    for k in range(1, K):
        X += W[k]
    X /= K
    state.V, state.W, state.X = V, W, X
    state.U = [X - W[k] for k in range(K)]
    state.iteration += 1
    entry = {
        "iteration": state.iteration,
        "cost": float(cost_fn(X)) if cost_fn is not None else float("nan"),
        "max_disagreement": state.disagreement,
        "wall_time": time.perf_counter() - t0,
    }
    state.history.append(entry)
    return state


def initial_estimate(blocks: Sequence) -> np.ndarray:
    """Weighted back-projection normalized by the back-projected path lengths."""
    blocks = as_data_blocks(blocks)
    num = np.zeros(blocks[0].block.shape[1])
    den = np.zeros_like(num)
    for db in blocks:
        A = db.block.matrix
        lengths = np.asarray(A.sum(axis=1)).ravel()
        num += A.T @ (db.weights * db.sinogram)
        den += A.T @ (db.weights * lengths)
    out = np.zeros_like(num)
    seen = den > 0
    out[seen] = num[seen] / den[seen]
    return out


def std_sigma(x0: np.ndarray) -> float:
    """Sample standard deviation of an estimate, floored away from zero."""
    s = float(np.std(x0))
    return s if s > 0 else 1.0


def default_sigma(agents: Sequence[AgentProblem]) -> float:
    """Proximal scale from the mean per-voxel curvature of one agent's cost.

    With ``h_d`` the mean diagonal of A_k^T D_k A_k over illuminated voxels
    and ``h_r`` the prior curvature at a difference of ``c``, the proximal
    penalty 1/sigma^2 is set to sqrt(h_d * (h_d + h_r)): the geometric mean
    of the weakest and strongest curvature the agent sees.
    """
    curv = np.mean([a.theta2 for a in agents], axis=0)
    seen = curv > 0
    if not seen.any():
        return 1.0
    h_d = float(curv[seen].mean())
    h_r = 0.0
    a0 = agents[0]
    if a0.prior_scale > 0:
        p = a0.prior
        h_r = a0.prior_scale * (p.p + p.q) / (4.0 * p.c * p.c)
    return float((h_d * (h_d + h_r)) ** -0.25)


@dataclass
class ReconResult:
    volume: Volume
    history: list[dict]
    converged: bool
    state: CEState
    x0: np.ndarray

    @property
    def iterations(self) -> int:
        return self.state.iteration


def reconstruct(
    blocks: Sequence,
    grid: VoxelGrid,
    prior: PriorParams | None = None,
    sigma: float | None = None,
    rho: float = 0.8,
    tol: float = 0.1,
    max_iters: int = 100,
    inner_iters: int = 20,
    inner_tol: float = 1e-6,
    threads: int = 1,
    mu_water: float = MU_WATER,
    x0: np.ndarray | None = None,
    track_cost: bool = True,
) -> ReconResult:
    """MAP reconstruction by Consensus Equilibrium.

    ``prior.c`` and ``tol`` are in HU; everything else follows the data
    (line integrals of mm^-1). One agent is created per data block.
    """
    blocks = as_data_blocks(blocks)
    for db in blocks:
        if db.block.shape[1] != grid.size:
            raise ValueError(f"block {db.block.block_index} has {db.block.shape[1]} columns, grid has {grid.size}")
    hu_scale = mu_water / 1000.0
    prior_mu = prior.scaled(hu_scale) if prior is not None else None
    tol_mu = tol * hu_scale
    if x0 is None:
        x0 = initial_estimate(blocks)
    x0 = np.asarray(x0, dtype=float).ravel()
    K = len(blocks)
    agents = [AgentProblem(db, grid.shape, prior_mu, K) for db in blocks]
    if sigma is None:
        sigma = default_sigma(agents)
    state = CEState.initialize(x0, K, sigma, rho)

    def cost(x):
        return negative_log_posterior(x.reshape(grid.shape), blocks, prior_mu)

    converged = False
    t_start = time.perf_counter()
    for _ in range(max_iters):
        ce_iterate(state, agents, inner_iters, inner_tol, threads, cost if track_cost else None)
        state.history[-1]["elapsed"] = time.perf_counter() - t_start
        log.debug("iteration %d: disagreement %.3g", state.iteration, state.disagreement)
        if state.disagreement <= tol_mu:
            converged = True
            break
    volume = Volume(grid, mu_to_hu(state.X.reshape(grid.shape), mu_water), "HU")
    return ReconResult(volume, state.history, converged, state, x0)


def normal_equations(blocks: Sequence, shape, prior: PriorParams | None):
    blocks = as_data_blocks(blocks)
    n = blocks[0].block.shape[1]
    H = sp.csr_matrix((n, n))
    b = np.zeros(n)
    for db in blocks:
        A = db.block.matrix
        H = H + (A.T @ sp.diags(db.weights) @ A)
        b += A.T @ (db.weights * db.sinogram)
    if prior is not None and prior.strength > 0:
        H = H + quadratic_prior_hessian(tuple(shape), prior)
    return sp.csr_matrix(H), b


def direct_solve_small(
    blocks: Sequence, shape, prior: PriorParams | None, max_unknowns: int = 10_000, rtol: float = 1e-10
) -> np.ndarray:
    """Exact minimizer of the quadratic-prior cost by a sparse direct solve.

    Returns a flat attenuation vector; raises :class:`ProblemTooLarge` above
    ``max_unknowns``.
    """
    n = int(np.prod(shape))
    if n > max_unknowns:
        raise ProblemTooLarge(f"{n} unknowns exceeds the direct-solve cap of {max_unknowns}")
    if prior is not None and prior.strength > 0 and not prior.is_quadratic:
        raise ValueError("direct solve needs a quadratic prior (p = q = 2)")
    H, b = normal_equations(blocks, shape, prior)
    x = spla.spsolve(sp.csc_matrix(H), b)
    bn = max(np.linalg.norm(b), 1e-300)
    for _ in range(5):
        r = b - H @ x
        if np.linalg.norm(r) <= rtol * bn:
            break
        x = x + spla.spsolve(sp.csc_matrix(H), r)
    return np.asarray(x)


def weighted_least_squares(
    blocks: Sequence, shape, x0: np.ndarray | None = None, rtol: float = 1e-8, maxiter: int = 5000
) -> tuple[np.ndarray, int]:
    """Unregularized weighted least-squares solution by conjugate gradients.

    Used as the no-prior baseline. Voxels that no ray touches keep their
    ``x0`` value (zero without one). Returns ``(x, info)`` with scipy's CG
    status code (0 = converged).
    """
    blocks = as_data_blocks(blocks)
    n = int(np.prod(shape))
    mats = [(db.block.matrix, db.weights) for db in blocks]

    def normal(v):
        out = np.zeros(n)
        for A, d in mats:
            out += A.T @ (d * (A @ v))
        return out

    b = np.zeros(n)
    for db in blocks:
        b += db.block.matrix.T @ (db.weights * db.sinogram)
    start = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    op = spla.LinearOperator((n, n), matvec=normal, dtype=float)
    x, info = spla.cg(op, b, x0=start, rtol=rtol, maxiter=maxiter)
    return np.asarray(x), int(info)
