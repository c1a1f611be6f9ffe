"""Occupancy LP container: block-structured variable tables, sparse rows with
semantic tags, policy extraction, solution checking, and a text export in the
standard LP interchange format.

Variables are created in homogeneous *blocks* (structure-of-arrays) so that
benchmark-scale programs with millions of variables never materialize one
Python tuple per variable. A variable's key is still a readable tuple:

- ``("sa", i, s, q, a, t)``   state-action occupancy of agent i's product
- ``("acc", i, s, q, t)``     frozen accepting accumulator
- ``("term", i, s, q)``       terminal-layer state occupancy (t = horizon)
- ``("y", i, s, a, t)``       local-chain state-action occupancy
- ``("z", i, s)``             local-chain terminal occupancy
- ``("v", i, s, q, t)``       neighborhood-layer state occupancy (local form)
- ``("w", i, q, s, t)``       neighborhood-layer transition auxiliary

The monolithic formulation uses agent index -1. Constraint rows are likewise
grouped into tagged blocks; rows whose tag is in COUPLING_KINDS tie two agents
together and are the ones a distributed solver relaxes.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

COUPLING_KINDS = ("consistency", "linking", "pairwise")

# Per-tag order of the key fields that follow (tag, agent).
_KEY_FIELDS = {
    "sa": ("s", "q", "a", "t"),
    "acc": ("s", "q", "t"),
    "term": ("s", "q"),
    "y": ("s", "a", "t"),
    "z": ("s",),
    "v": ("s", "q", "t"),
    "w": ("q", "s", "t"),
}


class LpError(ValueError):
    pass


class LpSizeError(LpError):
    """Raised when a formulation would exceed the variable-count guard."""


@dataclass
class VarBlock:
    """One homogeneous run of variables sharing a tag and an owning agent."""

    tag: str
    agent: int
    start: int
    arrays: dict[str, np.ndarray]

    def __len__(self) -> int:
        fields = _KEY_FIELDS[self.tag]
        return len(self.arrays[fields[0]]) if fields else 0

    def key(self, offset: int) -> tuple:
        return (self.tag, self.agent) + tuple(
            int(self.arrays[f][offset]) for f in _KEY_FIELDS[self.tag]
        )

    def keys(self):
        fields = _KEY_FIELDS[self.tag]
        cols = [self.arrays[f] for f in fields]
        for row in zip(*(c.tolist() for c in cols)):
            yield (self.tag, self.agent) + row


class KeyTable:
    """Variable keys stored block-wise; behaves like a read-only sequence."""

    def __init__(self, blocks: list[VarBlock], n_vars: int):
        self.blocks = blocks
        self._n = n_vars
        self._index: dict[tuple, int] | None = None

    def __len__(self) -> int:
        return self._n

    def __iter__(self):
        for block in self.blocks:
            yield from block.keys()

    def __getitem__(self, idx: int) -> tuple:
        if idx < 0:
            idx += self._n
        for block in self.blocks:
            if block.start <= idx < block.start + len(block):
                return block.key(idx - block.start)
        raise IndexError(idx)

    def index(self, key: tuple) -> int:
        """Column index of a structured key (builds a dict on first use)."""
        if self._index is None:
            self._index = {k: i for i, k in enumerate(self)}
        return self._index[key]

    def family(self, tag: str, agent: int | None = None) -> list[VarBlock]:
        """Blocks matching a tag (and agent, when given)."""
        return [
            b for b in self.blocks
            if b.tag == tag and (agent is None or b.agent == agent)
        ]


class _Rows:
    """COO accumulator for one constraint sense, with tagged row blocks."""

    def __init__(self):
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self.blocks: list[tuple[tuple, int, int]] = []  # (kind, start, count)
        self.n_rows = 0

    def add_block(self, kind: tuple, count: int, rhs) -> np.ndarray:
        """Register `count` rows sharing a semantic tag; returns their ids."""
        ids = np.arange(self.n_rows, self.n_rows + count, dtype=np.int64)
        self.blocks.append((kind, self.n_rows, count))
        self.n_rows += count
        self._rhs.append(
            np.broadcast_to(np.asarray(rhs, dtype=float), (count,)).copy()
        )
        return ids

    def put(self, rows, cols, vals) -> None:
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
        vals = np.broadcast_to(
            np.atleast_1d(np.asarray(vals, dtype=float)), rows.shape
        )
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(np.asarray(vals))

    def matrix(self, n_vars: int) -> tuple[sp.csr_matrix, np.ndarray]:
        b = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
        if self._rows:
            A = sp.coo_matrix(
                (
                    np.concatenate(self._vals),
                    (np.concatenate(self._rows), np.concatenate(self._cols)),
                ),
                shape=(self.n_rows, n_vars),
            ).tocsr()
            A.sum_duplicates()
        else:
            A = sp.csr_matrix((self.n_rows, n_vars))
        return A, b


class LpBuilder:
    """Incremental construction helper used by the formulation builders."""

    def __init__(self):
        self._blocks: list[VarBlock] = []
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._obj: list[np.ndarray] = []
        self.n_vars = 0
        self.eq = _Rows()
        self.ge = _Rows()

    def add_block(self, tag: str, agent: int, arrays: dict,
                  lb: float = 0.0, ub: float = np.inf, obj=0.0) -> np.ndarray:
        """Append a run of variables; returns their column indices."""
        fields = _KEY_FIELDS[tag]
        arrays = {f: np.asarray(arrays[f], dtype=np.int64) for f in fields}
        n = len(arrays[fields[0]]) if fields else 0
        block = VarBlock(tag=tag, agent=agent, start=self.n_vars, arrays=arrays)
        self._blocks.append(block)
        cols = np.arange(self.n_vars, self.n_vars + n, dtype=np.int64)
        self.n_vars += n
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (n,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (n,)).copy())
        self._obj.append(np.broadcast_to(np.asarray(obj, dtype=float), (n,)).copy())
        return cols

    def add_var(self, tag: str, agent: int, key_vals: dict,
                lb: float = 0.0, ub: float = np.inf, obj: float = 0.0) -> int:
        """Single-variable convenience wrapper around add_block."""
        arrays = {f: np.array([v]) for f, v in key_vals.items()}
        return int(self.add_block(tag, agent, arrays, lb, ub, obj)[0])

    def build(self, meta: dict) -> "OccupancyLp":
        n = self.n_vars
        A_eq, b_eq = self.eq.matrix(n)
        A_ge, b_ge = self.ge.matrix(n)
        agent_of = (
            np.concatenate(
                [np.full(len(b), b.agent, dtype=np.int64) for b in self._blocks]
            )
            if self._blocks
            else np.zeros(0, dtype=np.int64)
        )
        return OccupancyLp(
            keys=KeyTable(self._blocks, n),
            lb=np.concatenate(self._lb) if self._lb else np.zeros(0),
            ub=np.concatenate(self._ub) if self._ub else np.zeros(0),
            c=np.concatenate(self._obj) if self._obj else np.zeros(0),
            agent_of=agent_of,
            A_eq=A_eq,
            b_eq=b_eq,
            eq_blocks=self.eq.blocks,
            A_ge=A_ge,
            b_ge=b_ge,
            ge_blocks=self.ge.blocks,
            meta=meta,
        )


@dataclass
class OccupancyLp:
    """A built occupancy program (maximize c @ x subject to A_eq x = b_eq,
    A_ge x >= b_ge, lb <= x <= ub)."""

    keys: KeyTable
    lb: np.ndarray
    ub: np.ndarray
    c: np.ndarray
    agent_of: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_blocks: list[tuple[tuple, int, int]]
    A_ge: sp.csr_matrix
    b_ge: np.ndarray
    ge_blocks: list[tuple[tuple, int, int]]
    meta: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return len(self.keys)

    @property
    def n_rows(self) -> int:
        return self.A_eq.shape[0] + self.A_ge.shape[0]

    def var(self, key: tuple) -> int:
        return self.keys.index(key)

    def coupling_row_ids(self) -> np.ndarray:
        """Equality-row indices that tie two agents together."""
        parts = [
            np.arange(start, start + count, dtype=np.int64)
            for kind, start, count in self.eq_blocks
            if kind[0] in COUPLING_KINDS
        ]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def internal_eq_row_ids(self) -> np.ndarray:
        mask = np.ones(self.A_eq.shape[0], dtype=bool)
        mask[self.coupling_row_ids()] = False
        return np.flatnonzero(mask).astype(np.int64)

    def threshold_rows(self) -> dict[int, int]:
        """agent -> ge-row index of its satisfaction-threshold row."""
        out = {}
        for kind, start, count in self.ge_blocks:
            if kind[0] == "threshold":
                out[kind[1]] = start
        return out

    def with_thresholds(self, lambdas: dict[int, float]) -> "OccupancyLp":
        """Clone with new threshold right-hand sides (matrices shared)."""
        b_ge = self.b_ge.copy()
        rows = self.threshold_rows()
        for agent, lam in lambdas.items():
            if agent not in rows:
                raise LpError(f"no threshold row for agent {agent}")
            b_ge[rows[agent]] = lam
        meta = dict(self.meta)
        meta["lambdas"] = {**meta.get("lambdas", {}), **lambdas}
        return OccupancyLp(
            keys=self.keys, lb=self.lb, ub=self.ub, c=self.c,
            agent_of=self.agent_of, A_eq=self.A_eq, b_eq=self.b_eq,
            eq_blocks=self.eq_blocks, A_ge=self.A_ge, b_ge=b_ge,
            ge_blocks=self.ge_blocks, meta=meta,
        )


@dataclass
class CheckReport:
    ok: bool
    max_eq_violation: float
    max_ge_violation: float
    max_bound_violation: float
    objective: float
    threshold_slack: dict
    tol: float

    def __str__(self) -> str:
        status = "ok" if self.ok else "VIOLATED"
        return (
            f"check[{status}] eq={self.max_eq_violation:.3e} "
            f"ge={self.max_ge_violation:.3e} bounds={self.max_bound_violation:.3e} "
            f"objective={self.objective:.6f}"
        )


def check_solution(lp: OccupancyLp, x: np.ndarray, tol: float = 1e-6) -> CheckReport:
    """Independently re-verify a solution vector against every row and bound."""
    x = np.asarray(x, dtype=float)
    max_eq = 0.0
    if lp.b_eq.size:
        max_eq = float(np.abs(lp.A_eq @ x - lp.b_eq).max())
    max_ge = 0.0
    slack = {}
    if lp.b_ge.size:
        vals = lp.A_ge @ x
        max_ge = float(np.maximum(lp.b_ge - vals, 0).max())
        for agent, row in lp.threshold_rows().items():
            slack[agent] = float(vals[row] - lp.b_ge[row])
    lower = np.maximum(lp.lb - x, 0)
    finite_ub = np.isfinite(lp.ub)
    upper = np.maximum(x[finite_ub] - lp.ub[finite_ub], 0)
    max_bound = float(max(lower.max() if lower.size else 0.0,
                          upper.max() if upper.size else 0.0))
    return CheckReport(
        ok=max(max_eq, max_ge, max_bound) <= tol,
        max_eq_violation=max_eq,
        max_ge_violation=max_ge,
        max_bound_violation=max_bound,
        objective=float(lp.c @ x),
        threshold_slack=slack,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

ZERO_MASS = 1e-12


@dataclass
class Policy:
    """Per-agent randomized time-varying policies extracted from occupancies.

    entries[i][(state_key, t)] is a distribution over agent i's own actions.
    state_key is a (block state, automaton state) pair for product-form
    policies and the bare local state s_i for local-form ones; the monolithic
    joint policy sits under agent key -1 with distributions over flat joint
    actions.
    """

    formulation: str
    horizon: int
    objective: float
    lambdas: dict
    entries: dict[int, dict]
    fallback: str = "uniform"

    def action_dist(self, agent: int, state_key, t: int, n_actions: int) -> np.ndarray:
        dist = self.entries.get(agent, {}).get((state_key, t))
        if dist is None:
            return np.full(n_actions, 1.0 / n_actions)
        return dist


def _group_dists(codes: np.ndarray, acts: np.ndarray, mass: np.ndarray,
                 n_actions: int):
    """Yield (group_code, dist) for every code with positive total mass."""
    if codes.size == 0:
        return
    order = np.argsort(codes, kind="stable")
    codes, acts, mass = codes[order], acts[order], np.maximum(mass[order], 0.0)
    cuts = np.flatnonzero(np.diff(codes)) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [codes.size]))
    totals = np.add.reduceat(mass, starts)
    for g in np.flatnonzero(totals > ZERO_MASS):
        lo, hi = starts[g], ends[g]
        dist = np.zeros(n_actions)
        np.add.at(dist, acts[lo:hi], mass[lo:hi])
        dist /= dist.sum()
        yield int(codes[lo]), dist


def extract_policy(lp: OccupancyLp, x: np.ndarray) -> Policy:
    """Conditional action distributions o(s,a,t) / sum_a o(s,a,t); states with
    no occupancy mass fall back to uniform at lookup time."""
    x = np.asarray(x, dtype=float)
    formulation = lp.meta["formulation"]
    horizon = int(lp.meta["horizon"])
    entries: dict[int, dict] = {}
    T1 = horizon + 1

    if formulation in ("monolithic", "neighboring"):
        for block in lp.keys.family("sa"):
            s, q = block.arrays["s"], block.arrays["q"]
            a, t = block.arrays["a"], block.arrays["t"]
            mass = x[block.start:block.start + len(block)]
            n_q = int(q.max()) + 1 if len(q) else 1
            if formulation == "monolithic":
                n_actions = int(lp.meta["n_joint_actions"])
                a_own = a
            else:
                prod = lp.meta["products"][block.agent]
                pos = prod.owner_pos
                stride = prod.dyn.action_strides[pos]
                n_actions = prod.dyn.action_sizes[pos]
                a_own = (a // stride) % n_actions
            codes = (s.astype(np.int64) * n_q + q) * T1 + t
            agent_entries = entries.setdefault(block.agent, {})
            for code, dist in _group_dists(codes, a_own, mass, n_actions):
                sq, t_val = divmod(code, T1)
                agent_entries[((int(sq // n_q), int(sq % n_q)), int(t_val))] = dist
    elif formulation == "local":
        model = lp.meta["model"]
        for block in lp.keys.family("y"):
            s, a, t = block.arrays["s"], block.arrays["a"], block.arrays["t"]
            mass = x[block.start:block.start + len(block)]
            n_actions = model.agents[block.agent].n_actions
            codes = s.astype(np.int64) * T1 + t
            agent_entries = entries.setdefault(block.agent, {})
            for code, dist in _group_dists(codes, a, mass, n_actions):
                agent_entries[(int(code // T1), int(code % T1))] = dist
    else:
        raise LpError(f"unknown formulation {formulation!r}")

    return Policy(
        formulation=formulation,
        horizon=horizon,
        objective=float(lp.c @ x),
        lambdas=dict(lp.meta.get("lambdas", {})),
        entries=entries,
    )


def policy_to_dict(policy: Policy) -> dict:
    """JSON-ready view of a policy. Lookup keys flatten to comma-joined
    integers — "s,t" for local entries, "s,q,t" for product-form ones — so
    the file stays diffable and `policy_from_dict` can tell them apart by
    arity alone."""
    entries = {}
    for agent, table in policy.entries.items():
        rows = {}
        for (state_key, t), dist in sorted(table.items()):
            if isinstance(state_key, tuple):
                key = f"{state_key[0]},{state_key[1]},{t}"
            else:
                key = f"{state_key},{t}"
            rows[key] = [float(p) for p in dist]
        entries[str(agent)] = rows
    return {
        "formulation": policy.formulation,
        "horizon": policy.horizon,
        "objective": policy.objective,
        "lambdas": {str(i): float(v) for i, v in policy.lambdas.items()},
        "fallback": policy.fallback,
        "entries": entries,
    }


def policy_from_dict(doc: dict) -> Policy:
    """Inverse of :func:`policy_to_dict`."""
    entries: dict[int, dict] = {}
    for agent, rows in doc["entries"].items():
        table = {}
        for key, dist in rows.items():
            parts = [int(p) for p in key.split(",")]
            if len(parts) == 3:
                table[((parts[0], parts[1]), parts[2])] = np.asarray(dist)
            elif len(parts) == 2:
                table[(parts[0], parts[1])] = np.asarray(dist)
            else:
                raise LpError(f"malformed policy key {key!r}")
        entries[int(agent)] = table
    return Policy(
        formulation=doc["formulation"],
        horizon=int(doc["horizon"]),
        objective=float(doc["objective"]),
        lambdas={int(i): float(v) for i, v in doc["lambdas"].items()},
        entries=entries,
        fallback=doc.get("fallback", "uniform"),
    )


# ---------------------------------------------------------------------------
# Text export (LP interchange format)
# ---------------------------------------------------------------------------


def write_lp_text(lp: OccupancyLp, path: str) -> None:
    """Write the program in the standard LP text format for cross-checking
    with external solvers. Variables are x<idx>; a comment block maps the
    first few indices back to their structured keys."""
    lines = ["\\ occupancy program export", f"\\ {lp.n_vars} variables"]
    for idx, key in enumerate(itertools.islice(iter(lp.keys), 50)):
        lines.append(f"\\ x{idx} = {key}")
    lines.append("Maximize")
    nz = lp.c.nonzero()[0]
    lines.append(" obj: " + _lincomb(nz, lp.c[nz]))
    lines.append("Subject To")
    A = lp.A_eq.tocsr()
    for r in range(A.shape[0]):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        lines.append(
            f" e{r}: " + _lincomb(A.indices[lo:hi], A.data[lo:hi])
            + f" = {lp.b_eq[r]:.17g}"
        )
    G = lp.A_ge.tocsr()
    for r in range(G.shape[0]):
        lo, hi = G.indptr[r], G.indptr[r + 1]
        lines.append(
            f" g{r}: " + _lincomb(G.indices[lo:hi], G.data[lo:hi])
            + f" >= {lp.b_ge[r]:.17g}"
        )
    lines.append("Bounds")
    for idx in range(lp.n_vars):
        ub = lp.ub[idx]
        if np.isinf(ub):
            lines.append(f" 0 <= x{idx}")
        else:
            lines.append(f" 0 <= x{idx} <= {ub:.17g}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _lincomb(indices, values) -> str:
    terms = []
    for idx, val in zip(indices, values):
        if val == 0:
            continue
        sign = "+" if val >= 0 else "-"
        terms.append(f"{sign} {abs(val):.17g} x{idx}")
    if not terms:
        return "0 x0"
    out = " ".join(terms)
    return out[2:] if out.startswith("+ ") else out


def timed(fn, *args, **kwargs):
    """(result, wall seconds) of one call; used by solvers and benchmarks."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
