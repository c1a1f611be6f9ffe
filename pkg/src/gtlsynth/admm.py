"""Distributed synthesis by primal-splitting consensus.

A stitched occupancy program decomposes into per-agent blocks (each agent's
chain rows, bounds, threshold and objective slice) tied together only by the
marked coupling rows, which are homogeneous: stacking the per-block coupling
coefficients B_i gives  sum_i B_i o_i = 0.  Multi-block ADMM on that form is
not convergent in general, so the solver introduces per-agent auxiliary
copies z_i of the coupling activity with a zero-sum side constraint and runs
the resulting two-block scheme:

    z_i <- B_i o_i - nu_i/beta - mean_j(B_j o_j - nu_j/beta)
    o_i <- argmin_{o_i feasible}  f_i(o_i) + (beta/2) ||B_i o_i - z_i - nu_i/beta||^2
    nu_i <- nu_i - beta (B_i o_i - z_i)

with one global reduction (the mean) per iteration; everything else is
per-agent and embarrassingly parallel.  The o-update is a convex QP over the
agent's own occupancy polytope, dispatched to any quadratic-capable backend;
its Hessian beta * B_i' B_i is constant across iterations, so the splitting
backend's cached factorization makes repeat solves cheap.

Storage note: each coupling row touches exactly two agents, so for agent i
the vectors z_i and nu_i are only ever *individually interesting* on the rows
whose pair includes i.  Off those rows their values are identical across all
agents (a consequence of the averaging formula), and the implementation
stores that common tail once instead of M times.  ``AdmmState.z_of`` /
``nu_of`` materialize the full per-agent vectors on demand.

Termination: stop at the first iterate whose primal residual
sum_i ||B_i o_i - z_i||^2 and dual residual sum_i beta ||B_i (o_i - o_i')||^2
both fall below ``gamma``, else after ``max_iters`` iterations.  The trace
records both residuals, the global objective and wall time per iteration and
can be exported as CSV.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .lp import (
    COUPLING_KINDS,
    CheckReport,
    LpError,
    OccupancyLp,
    Policy,
    check_solution,
    extract_policy,
)
from .solvers import CanonicalProblem, SolverError, get_backend


@dataclass
class AgentBlock:
    """One agent's slice of the program plus its coupling coefficients.

    ``prob`` is the agent's standalone problem in minimize orientation
    (objective negated); ``B`` holds the coupling-row coefficients on this
    agent's columns, restricted to ``rows`` (the parent coupling-row indices
    the agent actually touches)."""

    agent: int
    cols: np.ndarray
    eq_rows: np.ndarray
    ge_rows: np.ndarray
    prob: CanonicalProblem
    B: sp.csr_matrix
    rows: np.ndarray
    _Bt: sp.csr_matrix | None = field(repr=False, default=None)
    _gram: sp.csr_matrix | None = field(repr=False, default=None)
    _penalized: dict = field(repr=False, default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.cols)

    def gram(self) -> sp.csr_matrix:
        if self._gram is None:
            self._Bt = self.B.T.tocsr()
            self._gram = (self._Bt @ self.B).tocsr()
        return self._gram

    def qp(self, beta: float, target: np.ndarray) -> CanonicalProblem:
        """The o-update subproblem: own block plus the quadratic penalty
        (beta/2)||B o - target||^2 folded into P and c."""
        P = self._penalized.get(beta)
        if P is None:
            P = (beta * self.gram()).tocsr()
            self._penalized[beta] = P
        c = self.prob.c - beta * (self._Bt @ target)
        return replace(self.prob, c=c, P=P)


@dataclass
class BlockProblem:
    """The program split into per-agent blocks plus shared coupling rows."""

    lp: OccupancyLp
    agents: list[int]
    blocks: dict[int, AgentBlock]
    coupling_rows: np.ndarray

    @property
    def n_coupling(self) -> int:
        return len(self.coupling_rows)

    def assemble(self, o: dict[int, np.ndarray]) -> np.ndarray:
        """Scatter per-agent solutions back into parent column order."""
        x = np.zeros(self.lp.n_vars)
        for a in self.agents:
            x[self.blocks[a].cols] = o[a]
        return x


def split_blocks(lp: OccupancyLp) -> BlockProblem:
    """Partition a stitched program into per-agent blocks.

    Requires a program whose coupling rows are marked (built by the
    neighboring or local formulation builders); the monolithic program is a
    single indivisible block and is rejected.  Internal rows are assigned to
    agents by their tags, and the split is verified to be exact: every
    internal row must touch only its own agent's columns, every coupling row
    exactly two agents' columns with zero right-hand side.
    """
    formulation = lp.meta.get("formulation")
    if formulation not in ("neighboring", "local"):
        raise LpError(
            f"cannot split a {formulation!r} program: no marked per-agent "
            "coupling structure"
        )

    coupling_rows = lp.coupling_row_ids()
    if coupling_rows.size and float(np.abs(lp.b_eq[coupling_rows]).max()) != 0.0:
        raise LpError("coupling rows must be homogeneous")

    # Group columns and internal rows by owning agent.
    agent_of = lp.agent_of
    order = np.argsort(agent_of, kind="stable")
    agents_arr, starts = np.unique(agent_of[order], return_index=True)
    col_groups = {
        int(a): np.sort(order[s:e])
        for a, s, e in zip(
            agents_arr, starts, np.append(starts[1:], len(order))
        )
    }
    agents = sorted(col_groups)

    eq_groups: dict[int, list[np.ndarray]] = {a: [] for a in agents}
    for kind, start, count in lp.eq_blocks:
        if kind[0] in COUPLING_KINDS:
            continue
        eq_groups[int(kind[1])].append(np.arange(start, start + count))
    ge_groups: dict[int, list[np.ndarray]] = {a: [] for a in agents}
    for kind, start, count in lp.ge_blocks:
        if not isinstance(kind[1], (int, np.integer)):
            raise LpError(f"ge row block {kind!r} is not owned by one agent")
        ge_groups[int(kind[1])].append(np.arange(start, start + count))

    C = lp.A_eq[coupling_rows].tocsc() if coupling_rows.size else None
    col_map = np.full(lp.n_vars, -1, dtype=np.int64)
    touch_count = np.zeros(len(coupling_rows), dtype=np.int64)

    blocks: dict[int, AgentBlock] = {}
    for a in agents:
        cols = col_groups[a]
        col_map[cols] = np.arange(len(cols))

        eq_rows = (
            np.concatenate(eq_groups[a]) if eq_groups[a]
            else np.zeros(0, dtype=np.int64)
        )
        sub = lp.A_eq[eq_rows].tocoo()
        loc = col_map[sub.col]
        if loc.size and loc.min() < 0:
            raise LpError(
                f"internal row of agent {a} touches another agent's variables"
            )
        A_eq = sp.csr_matrix(
            (sub.data, (sub.row, loc)), shape=(len(eq_rows), len(cols))
        )

        ge_rows = (
            np.concatenate(ge_groups[a]) if ge_groups[a]
            else np.zeros(0, dtype=np.int64)
        )
        gsub = lp.A_ge[ge_rows].tocoo()
        gloc = col_map[gsub.col]
        if gloc.size and gloc.min() < 0:
            raise LpError(
                f"threshold row of agent {a} touches another agent's variables"
            )
        A_ge = sp.csr_matrix(
            (gsub.data, (gsub.row, gloc)), shape=(len(ge_rows), len(cols))
        )

        prob = CanonicalProblem(
            c=-lp.c[cols],
            A_eq=A_eq,
            b_eq=lp.b_eq[eq_rows],
            A_ub=(-A_ge).tocsr(),
            b_ub=-lp.b_ge[ge_rows],
            lb=lp.lb[cols],
            ub=lp.ub[cols],
        )

        if C is not None:
            full = C[:, cols].tocoo()
            rows = np.unique(full.row)
            row_map = np.zeros(len(coupling_rows), dtype=np.int64)
            row_map[rows] = np.arange(len(rows))
            B = sp.csr_matrix(
                (full.data, (row_map[full.row], full.col)),
                shape=(len(rows), len(cols)),
            )
            touch_count[rows] += 1
        else:
            rows = np.zeros(0, dtype=np.int64)
            B = sp.csr_matrix((0, len(cols)))

        col_map[cols] = -1
        blocks[a] = AgentBlock(
            agent=a, cols=cols, eq_rows=eq_rows, ge_rows=ge_rows,
            prob=prob, B=B, rows=rows,
        )

    if coupling_rows.size and not np.array_equal(
        touch_count, np.full(len(coupling_rows), 2)
    ):
        bad = int(np.flatnonzero(touch_count != 2)[0])
        raise LpError(
            f"coupling row {int(coupling_rows[bad])} touches "
            f"{int(touch_count[bad])} agents, expected exactly 2"
        )

    return BlockProblem(
        lp=lp, agents=agents, blocks=blocks, coupling_rows=coupling_rows
    )


# ---------------------------------------------------------------------------
# Consensus state and iteration
# ---------------------------------------------------------------------------


@dataclass
class AdmmState:
    """Iterate k of the consensus scheme.

    ``o`` holds each agent's block solution; ``zR``/``nuR`` hold the
    auxiliary and dual vectors on the agent's own coupling rows, with
    ``z_off``/``nu_off`` the (shared) values every agent carries on rows it
    does not touch.  ``Bo`` caches B_i o_i on the touched rows; ``Bo_prev``
    is the previous iterate's, for the dual residual.
    """

    k: int
    beta: float
    agents: list[int]
    rows: dict[int, np.ndarray]
    n_coupling: int
    o: dict[int, np.ndarray]
    Bo: dict[int, np.ndarray]
    Bo_prev: dict[int, np.ndarray] | None
    zR: dict[int, np.ndarray]
    nuR: dict[int, np.ndarray]
    z_off: np.ndarray
    nu_off: np.ndarray
    history: list[tuple[float, float]] = field(default_factory=list)

    def z_of(self, agent: int) -> np.ndarray:
        out = np.array(self.z_off, copy=True)
        out[self.rows[agent]] = self.zR[agent]
        return out

    def nu_of(self, agent: int) -> np.ndarray:
        out = np.array(self.nu_off, copy=True)
        out[self.rows[agent]] = self.nuR[agent]
        return out

    def z_sum(self) -> np.ndarray:
        """sum_i z_i, which the averaging update keeps at exactly zero."""
        total = (len(self.agents) - 2) * self.z_off
        for a in self.agents:
            np.add.at(total, self.rows[a], self.zR[a])
        return total


def initial_state(blocks: BlockProblem, beta: float, backend) -> AdmmState:
    """Warm start: each agent solves its own block alone; duals start at 0."""
    solver = get_backend(backend)
    o: dict[int, np.ndarray] = {}
    Bo: dict[int, np.ndarray] = {}
    for a in blocks.agents:
        blk = blocks.blocks[a]
        res = solver.solve(blk.prob)
        if res.x is None:
            raise SolverError(
                f"agent {a}: uncoupled block subproblem {res.status}"
            )
        o[a] = np.asarray(res.x, dtype=float)
        Bo[a] = blk.B @ o[a]
    m = blocks.n_coupling
    return AdmmState(
        k=0,
        beta=beta,
        agents=list(blocks.agents),
        rows={a: blocks.blocks[a].rows for a in blocks.agents},
        n_coupling=m,
        o=o,
        Bo=Bo,
        Bo_prev=None,
        zR={a: np.zeros(len(blocks.blocks[a].rows)) for a in blocks.agents},
        nuR={a: np.zeros(len(blocks.blocks[a].rows)) for a in blocks.agents},
        z_off=np.zeros(m),
        nu_off=np.zeros(m),
        history=[],
    )


def admm_step(state: AdmmState, blocks: BlockProblem, backend) -> AdmmState:
    """One full iteration: z-update, per-agent o-update QP, dual update."""
    solver = get_backend(backend)
    beta = state.beta
    M = len(state.agents)
    m = state.n_coupling

    # Global reduction: u = mean_j (B_j o_j - nu_j / beta).
    u = np.zeros(m)
    for a in state.agents:
        np.add.at(u, state.rows[a], state.Bo[a] - state.nuR[a] / beta)
    u += (M - 2) * (-state.nu_off / beta)
    u /= M

    z_off = -state.nu_off / beta - u
    zR: dict[int, np.ndarray] = {}
    nuR: dict[int, np.ndarray] = {}
    o: dict[int, np.ndarray] = {}
    Bo: dict[int, np.ndarray] = {}
    for a in state.agents:
        blk = blocks.blocks[a]
        rows = state.rows[a]
        target = state.Bo[a] - u[rows]          # = z_i + nu_i/beta on own rows
        zR[a] = target - state.nuR[a] / beta
        if len(rows):
            res = solver.solve(blk.qp(beta, target), x0=state.o[a])
            if res.x is None:
                raise SolverError(f"agent {a}: o-update subproblem {res.status}")
            o[a] = np.asarray(res.x, dtype=float)
        else:
            # No coupling activity: the penalty vanishes and the warm-start
            # block optimum is already the argmin.
            o[a] = state.o[a]
        Bo[a] = blk.B @ o[a]
        nuR[a] = state.nuR[a] - beta * (Bo[a] - zR[a])
    nu_off = state.nu_off + beta * z_off

    new = AdmmState(
        k=state.k + 1,
        beta=beta,
        agents=state.agents,
        rows=state.rows,
        n_coupling=m,
        o=o,
        Bo=Bo,
        Bo_prev=state.Bo,
        zR=zR,
        nuR=nuR,
        z_off=z_off,
        nu_off=nu_off,
        history=list(state.history),
    )
    new.history.append(residuals(new))
    return new


def residuals(state: AdmmState) -> tuple[float, float]:
    """(primal, dual) residuals of the iterate: feasibility of the coupling
    rows and stationarity of the coupling activity.  The dual residual is
    infinite at the warm start, where no previous iterate exists."""
    M = len(state.agents)
    res_p = max(M - 2, 0) * float(state.z_off @ state.z_off)
    for a in state.agents:
        d = state.Bo[a] - state.zR[a]
        res_p += float(d @ d)
    if state.Bo_prev is None:
        return res_p, np.inf
    res_d = 0.0
    for a in state.agents:
        d = state.Bo[a] - state.Bo_prev[a]
        res_d += state.beta * float(d @ d)
    return res_p, res_d


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class AdmmRun:
    """Outcome of a full distributed solve."""

    status: str                 # "converged" or "iteration_limit"
    iterations: int
    objective: float
    x: np.ndarray
    policy: Policy
    check: CheckReport
    trace: list[dict]
    state: AdmmState

    @property
    def res_p(self) -> float:
        return self.state.history[-1][0] if self.state.history else np.inf

    @property
    def res_d(self) -> float:
        return self.state.history[-1][1] if self.state.history else np.inf


def run_admm(
    blocks: BlockProblem,
    beta: float = 1.0,
    gamma: float = 1e-4,
    max_iters: int = 500,
    backend="ipm",
    callback=None,
) -> AdmmRun:
    """Run the consensus scheme until both residuals drop below ``gamma`` or
    ``max_iters`` iterations elapse, then extract policies from the final
    per-agent occupancies.

    The returned ``check`` report re-verifies the assembled solution against
    the *original* stitched program, so a run stopped at the iteration limit
    shows its remaining coupling violation rather than hiding it.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if max_iters < 1:
        raise ValueError("need at least one iteration")

    solver = get_backend(backend)
    state = initial_state(blocks, beta, solver)
    trace: list[dict] = []
    status = "iteration_limit"
    for _ in range(max_iters):
        t0 = time.perf_counter()
        state = admm_step(state, blocks, solver)
        wall_ms = (time.perf_counter() - t0) * 1e3
        res_p, res_d = state.history[-1]
        objective = sum(
            float(blocks.lp.c[blocks.blocks[a].cols] @ state.o[a])
            for a in blocks.agents
        )
        trace.append(
            {
                "iteration": state.k,
                "res_p": res_p,
                "res_d": res_d,
                "objective": objective,
                "wall_ms": wall_ms,
            }
        )
        if callback is not None:
            callback(state, trace[-1])
        if res_p <= gamma and res_d <= gamma:
            status = "converged"
            break

    x = blocks.assemble(state.o)
    return AdmmRun(
        status=status,
        iterations=state.k,
        objective=float(blocks.lp.c @ x),
        x=x,
        policy=extract_policy(blocks.lp, x),
        check=check_solution(blocks.lp, x),
        trace=trace,
        state=state,
    )


def write_trace_csv(trace: list[dict], path: str) -> None:
    """Residual trace in the external CSV layout:
    iteration, res_p, res_d, objective, wall_ms."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["iteration", "res_p", "res_d", "objective", "wall_ms"]
        )
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in writer.fieldnames})
