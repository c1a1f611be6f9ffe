"""Solver backends for occupancy programs.

Three interchangeable backends behind one canonical problem shape:

- ``ipm``: bundled sparse primal-dual interior-point method (Mehrotra
  predictor-corrector with regularized KKT systems). Handles LPs and convex
  QPs; classifies infeasible LPs with an elastic phase-1 solve. The default.
- ``highs``: scipy's linprog/HiGHS. LPs only, fastest at benchmark scale.
- ``splitting``: operator-splitting QP solver in the OSQP style, with cached
  KKT factorizations keyed by problem-structure digests so that agents with
  identical blocks share one factorization. Used as the distributed
  algorithm's subproblem solver at scale; also detects primal/dual
  infeasibility via certificate norms.

`solve_lp` wraps a built OccupancyLp (maximize orientation) and normalizes
statuses to: optimal, infeasible, unbounded, iteration_limit, stalled, error.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .lp import OccupancyLp


class SolverError(RuntimeError):
    pass


@dataclass
class CanonicalProblem:
    """minimize c @ x + 0.5 x' P x  s.t.  A_eq x = b_eq, A_ub x <= b_ub,
    lb <= x <= ub. P is None for LPs."""

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    P: sp.csr_matrix | None = None

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x: np.ndarray) -> float:
        val = float(self.c @ x)
        if self.P is not None:
            val += 0.5 * float(x @ (self.P @ x))
        return val


def canonicalize(lp: OccupancyLp) -> CanonicalProblem:
    """Minimize orientation: negate the (maximize) objective, flip >= rows."""
    return CanonicalProblem(
        c=-lp.c,
        A_eq=lp.A_eq,
        b_eq=lp.b_eq,
        A_ub=(-lp.A_ge).tocsr() if lp.A_ge.shape[0] else sp.csr_matrix((0, lp.n_vars)),
        b_ub=-lp.b_ge,
        lb=lp.lb.copy(),
        ub=lp.ub.copy(),
    )


@dataclass
class SolverResult:
    status: str
    x: np.ndarray | None
    objective: float | None
    iterations: int
    wall_time: float
    backend: str
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# ---------------------------------------------------------------------------
# HiGHS (scipy) backend
# ---------------------------------------------------------------------------


class HighsBackend:
    """scipy.optimize.linprog with the HiGHS engine. LPs only."""

    name = "highs"

    def __init__(self, tol: float = 1e-9, **_ignored):
        self.tol = tol

    def solve(self, prob: CanonicalProblem, x0=None) -> SolverResult:
        if prob.P is not None and prob.P.nnz:
            raise SolverError("the highs backend solves LPs only")
        t0 = time.perf_counter()
        bounds = np.column_stack([prob.lb, prob.ub])
        res = linprog(
            prob.c,
            A_ub=prob.A_ub if prob.A_ub.shape[0] else None,
            b_ub=prob.b_ub if prob.A_ub.shape[0] else None,
            A_eq=prob.A_eq if prob.A_eq.shape[0] else None,
            b_eq=prob.b_eq if prob.A_eq.shape[0] else None,
            bounds=bounds,
            method="highs",
            options={"presolve": True, "primal_feasibility_tolerance": self.tol,
                     "dual_feasibility_tolerance": self.tol},
        )
        wall = time.perf_counter() - t0
        status = {0: "optimal", 1: "iteration_limit", 2: "infeasible",
                  3: "unbounded"}.get(res.status, "error")
        return SolverResult(
            status=status,
            x=np.asarray(res.x) if res.x is not None else None,
            objective=float(res.fun) if res.fun is not None else None,
            iterations=int(getattr(res, "nit", 0) or 0),
            wall_time=wall,
            backend=self.name,
            info={"message": res.message},
        )


# ---------------------------------------------------------------------------
# Bundled interior-point backend
# ---------------------------------------------------------------------------


class InteriorPointBackend:
    """Sparse Mehrotra predictor-corrector for LPs and convex QPs.

    Box bounds and inequality rows are folded into one G x <= h block; each
    iteration factorizes the regularized reduced KKT system

        [[P + G' diag(lam/s) G + dI, A'], [A, -dI]]

    once and reuses it for the predictor and corrector solves. Occupancy
    programs carry redundant flow/consistency rows, so the regularization
    d > 0 is what keeps the factorization well-posed. For LPs that fail to
    converge, an elastic phase-1 solve separates 'infeasible' from 'stalled'.
    """

    name = "ipm"

    def __init__(self, tol: float = 1e-9, maxiter: int = 200,
                 regularization: float = 1e-9, feas_tol: float = 1e-7,
                 **_ignored):
        self.tol = tol
        self.maxiter = maxiter
        self.reg = regularization
        self.feas_tol = feas_tol

    def solve(self, prob: CanonicalProblem, x0=None) -> SolverResult:
        t0 = time.perf_counter()
        res = self._mehrotra(prob, x0)
        if res.status != "optimal" and prob.P is None:
            # classify: solve the always-feasible elastic relaxation
            verdict = self._phase1(prob)
            if verdict is not None:
                res.status = verdict
        res.wall_time = time.perf_counter() - t0
        return res

    # -- core ------------------------------------------------------------

    def _fold_inequalities(self, prob: CanonicalProblem):
        """G x <= h from A_ub plus every finite bound."""
        n = prob.n
        parts_G, parts_h = [], []
        if prob.A_ub.shape[0]:
            parts_G.append(prob.A_ub)
            parts_h.append(prob.b_ub)
        finite_ub = np.isfinite(prob.ub)
        if finite_ub.any():
            idx = np.flatnonzero(finite_ub)
            E = sp.csr_matrix(
                (np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n)
            )
            parts_G.append(E)
            parts_h.append(prob.ub[idx])
        finite_lb = np.isfinite(prob.lb)
        if finite_lb.any():
            idx = np.flatnonzero(finite_lb)
            E = sp.csr_matrix(
                (-np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n)
            )
            parts_G.append(E)
            parts_h.append(-prob.lb[idx])
        if parts_G:
            return sp.vstack(parts_G).tocsr(), np.concatenate(parts_h)
        return sp.csr_matrix((0, n)), np.zeros(0)

    def _mehrotra(self, prob: CanonicalProblem, x0=None) -> SolverResult:
        n = prob.n
        A, b = prob.A_eq.tocsr(), prob.b_eq
        G, h = self._fold_inequalities(prob)
        p, m = A.shape[0], G.shape[0]
        P = prob.P.tocsr() if prob.P is not None else sp.csr_matrix((n, n))
        c = prob.c

        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
        finite = np.isfinite(prob.lb) & np.isfinite(prob.ub)
        x[finite] = np.clip(x[finite], prob.lb[finite], prob.ub[finite])
        y = np.zeros(p)
        s = np.maximum(h - G @ x, 1.0) if m else np.zeros(0)
        lam = np.ones(m)
        scale = 1.0 + max(
            np.abs(b).max() if p else 0.0,
            np.abs(h).max() if m else 0.0,
            np.abs(c).max() if n else 0.0,
        )

        best_merit = np.inf
        stall = 0
        for it in range(self.maxiter):
            rd = P @ x + c + (A.T @ y if p else 0) + (G.T @ lam if m else 0)
            rp = A @ x - b if p else np.zeros(0)
            rc = G @ x + s - h if m else np.zeros(0)
            mu = float(lam @ s / m) if m else 0.0
            merit = max(
                np.abs(rd).max() if n else 0.0,
                np.abs(rp).max() if p else 0.0,
                np.abs(rc).max() if m else 0.0,
                mu,
            )
            if merit <= self.tol * scale:
                return SolverResult(
                    status="optimal", x=x, objective=prob.objective(x),
                    iterations=it, wall_time=0.0, backend=self.name,
                    info={"mu": mu, "merit": merit},
                )
            if merit < best_merit * 0.9:
                best_merit, stall = merit, 0
            else:
                stall += 1
                if stall > 30:
                    return SolverResult(
                        status="stalled", x=x, objective=prob.objective(x),
                        iterations=it, wall_time=0.0, backend=self.name,
                        info={"merit": merit},
                    )

            W = lam / s if m else np.zeros(0)
            H = P + self.reg * sp.eye(n)
            if m:
                H = H + G.T @ sp.diags(W) @ G
            if p:
                K = sp.bmat(
                    [[H, A.T], [A, -self.reg * sp.eye(p)]], format="csc"
                )
            else:
                K = H.tocsc()
            try:
                factor = spla.splu(K)
            except RuntimeError as e:
                return SolverResult(
                    status="error", x=x, objective=None, iterations=it,
                    wall_time=0.0, backend=self.name, info={"error": str(e)},
                )

            def solve_kkt(rx, ry):
                rhs = np.concatenate([rx, ry]) if p else rx
                sol = factor.solve(rhs)
                return (sol[:n], sol[n:]) if p else (sol, np.zeros(0))

            def direction(rcs):
                rx = -rd
                if m:
                    rx = rx + G.T @ ((rcs - lam * rc) / s)
                dx, dy = solve_kkt(rx, -rp)
                if m:
                    ds = -rc - G @ dx
                    dlam = -(rcs + lam * ds) / s
                else:
                    ds = np.zeros(0)
                    dlam = np.zeros(0)
                return dx, dy, ds, dlam

            # predictor
            rcs_aff = lam * s
            dx_a, dy_a, ds_a, dl_a = direction(rcs_aff)
            alpha_p = _max_step(s, ds_a)
            alpha_d = _max_step(lam, dl_a)
            if m:
                mu_aff = float(
                    (lam + alpha_d * dl_a) @ (s + alpha_p * ds_a) / m
                )
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                rcs = rcs_aff - sigma * mu + dl_a * ds_a
            else:
                rcs = rcs_aff
            # corrector (same factorization)
            dx, dy, ds, dlam = direction(rcs)
            alpha_p = 0.995 * _max_step(s, ds)
            alpha_d = 0.995 * _max_step(lam, dlam)
            if m == 0:
                alpha_p = alpha_d = 1.0
            x = x + alpha_p * dx
            y = y + alpha_d * dy
            if m:
                s = s + alpha_p * ds
                lam = lam + alpha_d * dlam
            if np.abs(x).max() > 1e13:
                return SolverResult(
                    status="unbounded", x=None, objective=None, iterations=it,
                    wall_time=0.0, backend=self.name, info={},
                )

        return SolverResult(
            status="iteration_limit", x=x, objective=prob.objective(x),
            iterations=self.maxiter, wall_time=0.0, backend=self.name, info={},
        )

    def _phase1(self, prob: CanonicalProblem) -> str | None:
        """Elastic feasibility LP: min sum of violations. Returns a verdict
        ('infeasible') or None when the relaxation says feasible."""
        n = prob.n
        p = prob.A_eq.shape[0]
        m = prob.A_ub.shape[0]
        # variables: x, pos, neg (equality elastics), u (inequality elastics)
        cols = n + 2 * p + m
        c = np.concatenate([np.zeros(n), np.ones(2 * p + m)])
        I_p = sp.eye(p, format="csr")
        A_eq = (
            sp.hstack([prob.A_eq, I_p, -I_p, sp.csr_matrix((p, m))]).tocsr()
            if p else sp.csr_matrix((0, cols))
        )
        A_ub = (
            sp.hstack(
                [prob.A_ub, sp.csr_matrix((m, 2 * p)), -sp.eye(m, format="csr")]
            ).tocsr()
            if m else sp.csr_matrix((0, cols))
        )
        lb = np.concatenate([prob.lb, np.zeros(2 * p + m)])
        ub = np.concatenate([prob.ub, np.full(2 * p + m, np.inf)])
        relax = CanonicalProblem(
            c=c, A_eq=A_eq, b_eq=prob.b_eq, A_ub=A_ub, b_ub=prob.b_ub,
            lb=lb, ub=ub,
        )
        res = self._mehrotra(relax)
        if res.status == "optimal" and res.objective is not None:
            if res.objective > self.feas_tol * (1.0 + np.abs(prob.b_eq).sum()):
                return "infeasible"
            return None
        return None


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] with v + alpha dv >= 0."""
    if len(v) == 0:
        return 1.0
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, (-v[neg] / dv[neg]).min()))


# ---------------------------------------------------------------------------
# Operator-splitting backend
# ---------------------------------------------------------------------------


class SplittingBackend:
    """First-order QP solver: ADMM on the (x, z) splitting with z = M x
    clamped into [l, u], in the style of OSQP. One sparse factorization of

        [[P + sigma I, M'], [M, -I/rho]]

    per problem *structure*; factorizations are cached across calls keyed by
    a digest of the matrix bytes, so many identical subproblem shapes (e.g.
    one per agent in a distributed solve) factor once."""

    name = "splitting"

    _factor_cache: dict[bytes, object] = {}
    _cache_order: list[bytes] = []
    _cache_limit = 32

    def __init__(self, tol: float = 1e-6, maxiter: int = 50_000,
                 rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
                 check_every: int = 25, **_ignored):
        self.tol = tol
        self.maxiter = maxiter
        self.rho = rho
        self.sigma = sigma
        self.alpha = alpha
        self.check_every = check_every

    def _stack(self, prob: CanonicalProblem):
        n = prob.n
        blocks = [prob.A_eq, prob.A_ub, sp.eye(n, format="csr")]
        M = sp.vstack([B for B in blocks if B.shape[0]]).tocsr()
        l = np.concatenate([
            prob.b_eq, np.full(prob.A_ub.shape[0], -np.inf), prob.lb
        ])
        u = np.concatenate([prob.b_eq, prob.b_ub, prob.ub])
        return M, l, u

    def _factorize(self, P, M):
        n, m = P.shape[0], M.shape[0]
        K = sp.bmat(
            [[P + self.sigma * sp.eye(n), M.T],
             [M, -sp.eye(m) / self.rho]],
            format="csc",
        )
        key = hashlib.blake2b(
            K.indptr.tobytes() + K.indices.tobytes() + K.data.tobytes(),
            digest_size=16,
        ).digest()
        factor = self._factor_cache.get(key)
        if factor is None:
            factor = spla.splu(K)
            self._factor_cache[key] = factor
            self._cache_order.append(key)
            if len(self._cache_order) > self._cache_limit:
                dead = self._cache_order.pop(0)
                self._factor_cache.pop(dead, None)
        return factor

    def solve(self, prob: CanonicalProblem, x0=None, y0=None) -> SolverResult:
        t0 = time.perf_counter()
        n = prob.n
        P = (prob.P if prob.P is not None else sp.csr_matrix((n, n))).tocsr()
        q = prob.c
        M, l, u = self._stack(prob)
        m = M.shape[0]
        factor = self._factorize(P, M)

        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
        z = np.clip(M @ x, l, u)
        y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).copy()

        status = "iteration_limit"
        it = 0
        for it in range(1, self.maxiter + 1):
            rhs = np.concatenate([self.sigma * x - q, z - y / self.rho])
            sol = factor.solve(rhs)
            x_t, nu = sol[:n], sol[n:]
            z_t = z + (nu - y) / self.rho
            x_prev, y_prev = x, y
            x = self.alpha * x_t + (1 - self.alpha) * x
            z_r = self.alpha * z_t + (1 - self.alpha) * z
            z_new = np.clip(z_r + y / self.rho, l, u)
            y = y + self.rho * (z_r - z_new)
            z = z_new

            if it % self.check_every == 0 or it == self.maxiter:
                Mx = M @ x
                r_prim = float(np.abs(Mx - z).max()) if m else 0.0
                r_dual = float(np.abs(P @ x + q + M.T @ y).max())
                eps_p = self.tol + self.tol * max(
                    np.abs(Mx).max() if m else 0.0, np.abs(z).max() if m else 0.0
                )
                eps_d = self.tol + self.tol * max(
                    np.abs(P @ x).max(), np.abs(q).max(),
                    np.abs(M.T @ y).max() if m else 0.0,
                )
                if r_prim <= eps_p and r_dual <= eps_d:
                    status = "optimal"
                    break
                dy = y - y_prev
                dx = x - x_prev
                if _primal_infeasible(M, l, u, dy) and it > 100:
                    status = "infeasible"
                    break
                if _dual_infeasible(P, q, M, l, u, dx) and it > 100:
                    status = "unbounded"
                    break

        return SolverResult(
            status=status,
            x=x if status in ("optimal", "iteration_limit") else None,
            objective=prob.objective(x) if status in ("optimal", "iteration_limit") else None,
            iterations=it,
            wall_time=time.perf_counter() - t0,
            backend=self.name,
            info={"rho": self.rho},
        )


def _primal_infeasible(M, l, u, dy, tol=1e-10) -> bool:
    norm = np.abs(dy).max() if len(dy) else 0.0
    if norm < tol:
        return False
    dy = dy / norm
    if np.abs(M.T @ dy).max() > 1e-6:
        return False
    support = np.where(
        dy > 0, np.where(np.isfinite(u), u, np.inf) * dy,
        np.where(np.isfinite(l), l, -np.inf) * dy,
    )
    gap = support[np.isfinite(support)].sum()
    return bool(np.isfinite(gap) and gap < -1e-8)


def _dual_infeasible(P, q, M, l, u, dx, tol=1e-10) -> bool:
    norm = np.abs(dx).max() if len(dx) else 0.0
    if norm < tol:
        return False
    dx = dx / norm
    if np.abs(P @ dx).max() > 1e-6 or q @ dx > -1e-8:
        return False
    Mdx = M @ dx
    up = (Mdx > 1e-6) & np.isfinite(u)
    dn = (Mdx < -1e-6) & np.isfinite(l)
    return not (up.any() or dn.any())


# ---------------------------------------------------------------------------
# Registry and the LP-level wrapper
# ---------------------------------------------------------------------------

BACKENDS = {
    "ipm": InteriorPointBackend,
    "highs": HighsBackend,
    "splitting": SplittingBackend,
}


def get_backend(name: str, **options):
    if isinstance(name, (HighsBackend, InteriorPointBackend, SplittingBackend)):
        return name
    try:
        return BACKENDS[name](**options)
    except KeyError:
        raise SolverError(
            f"unknown backend {name!r}; available: {sorted(BACKENDS)}"
        ) from None


def solve_lp(lp: OccupancyLp, backend="ipm", x0=None, **options) -> SolverResult:
    """Solve a built occupancy program; the result's objective is reported in
    the program's own maximize orientation."""
    if lp.meta.get("infeasible_thresholds"):
        agents = lp.meta["infeasible_thresholds"]
        return SolverResult(
            status="infeasible", x=None, objective=None, iterations=0,
            wall_time=0.0, backend="structural",
            info={
                "reason": "no accepting run is reachable within the horizon "
                          f"for agents {agents}",
            },
        )
    solver = get_backend(backend, **options)
    prob = canonicalize(lp)
    res = solver.solve(prob, x0=x0)
    if res.objective is not None:
        res.info["canonical_objective"] = res.objective
        res.objective = -res.objective
    return res
