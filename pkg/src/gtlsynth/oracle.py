"""Ground-truth validation of synthesized policies.

The occupancy programs make claims — satisfaction probabilities, expected
rewards, feasibility of product-form couplings — and everything here exists
to re-check those claims through machinery that shares no code with the
program constructors:

- ``exact_satisfaction`` closes the loop and propagates the joint state
  distribution forward, scoring the specification with a freshly compiled
  automaton run on true trajectory prefixes (no freeze accounting, no
  neighborhood pinning). Feasible only at oracle scale; guarded by a cap.
- ``simulate`` / ``simulate_batch`` / ``monte_carlo_satisfaction`` sample
  closed-loop rollouts (hot loop in ``_accel``) and score each run with the
  recursive trajectory monitor, so the estimate is independent of both the
  programs and the automaton compiler. Confidence intervals are Wilson.
- ``lemma1_construction`` turns any set of local policies into an explicit
  point satisfying the local program's equality rows — the feasibility
  witness: product-of-marginals layers are always consistent.
- ``forward_occupancies`` replays a joint policy under the freeze-at-
  acceptance accounting, reproducing a monolithic program's occupancies
  variable by variable.

Policies are executed exactly as ``lp.extract_policy`` hands them over: each
agent samples its own action from its own table, so a product-form policy's
joint behaviour is the product of its marginals, and states the program never
visited fall back to uniform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._accel import advance_rollouts
from .automata import GraphPredicate, compile_dfa, touched_agents
from .gtl import Formula, evaluate as monitor
from .gtl import horizon as formula_horizon
from .lp import OccupancyLp, Policy
from .model import (
    FactoredMdp,
    GraphTrajectory,
    dependency_closure,
    restrict_to_members,
)
from .product import JOINT_STATE_CAP, JointMdp, ProductModel, _BlockDynamics


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvaluationRow:
    """One agent's verdict: satisfaction probability of its specification and
    its own expected accumulated reward under the closed loop."""

    agent: int
    method: str            # "exact" | "mc"
    satisfaction: float
    half_width: float      # Wilson half-width; 0 for exact rows
    confidence: float
    expected_reward: float
    horizon: int
    runs: int = 0


@dataclass
class EvaluationReport:
    rows: list[EvaluationRow] = field(default_factory=list)

    def row_for(self, agent: int) -> EvaluationRow:
        for row in self.rows:
            if row.agent == agent:
                return row
        raise KeyError(agent)

    def to_csv(self, path: str) -> None:
        names = ["agent", "method", "satisfaction", "half_width",
                 "confidence", "expected_reward", "horizon", "runs"]
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=names)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({n: getattr(row, n) for n in names})

    def __str__(self) -> str:
        lines = []
        for r in self.rows:
            if r.method == "exact":
                lines.append(
                    f"agent {r.agent} [exact] P(sat)={r.satisfaction:.6f} "
                    f"E[reward]={r.expected_reward:.6f} (T={r.horizon})"
                )
            else:
                lines.append(
                    f"agent {r.agent} [mc]    P(sat)={r.satisfaction:.6f} "
                    f"+/-{r.half_width:.6f} @{r.confidence:.0%} "
                    f"E[reward]={r.expected_reward:.6f} "
                    f"(T={r.horizon}, runs={r.runs})"
                )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Exact propagation
# ---------------------------------------------------------------------------


def _tracked_products(policy: Policy, products: dict[int, ProductModel] | None):
    """Owners whose automaton state the executor must carry.

    Product-form policies key their lookups on automaton states, so every
    product with more than one state matters; one-state automata sit in a
    fixed q = 0 and drop out of both lookup keys and the packed monolithic
    automaton index.
    """
    if policy.formulation == "local":
        return []
    if products is None:
        raise OracleError(
            f"executing a {policy.formulation} policy needs the per-agent "
            "products it was synthesized with (pass products=...)"
        )
    return [(i, products[i]) for i in sorted(products)
            if products[i].dfa.n_states > 1]


def _member_codes(dyn: _BlockDynamics, prod: ProductModel,
                  joint_codes: np.ndarray) -> np.ndarray:
    """Block-state codes of `prod`'s members inside flat joint states."""
    out = np.zeros(len(joint_codes), dtype=np.int64)
    for pos, k in enumerate(prod.members):
        s_k = (joint_codes // dyn.state_strides[k]) % dyn.state_sizes[k]
        out += s_k * prod.dyn.state_strides[pos]
    return out


class _ExactPropagator:
    """Closed-loop distribution over (joint state, executor automata, scoring
    automaton), advanced one step at a time.

    The scoring automaton is compiled fresh from the formula under evaluation
    and its predicates are applied to full joint states, so closure pinning
    never enters; acceptance at the final layer is the exact satisfaction
    probability because the compiled automaton decides the bounded formula on
    the full prefix.
    """

    def __init__(self, model: FactoredMdp, policy: Policy,
                 products: dict[int, ProductModel] | None,
                 formula: Formula, owner: int, horizon: int, cap: int):
        self.model = model
        self.policy = policy
        self.horizon = horizon
        self.dyn = _BlockDynamics(model, range(model.n_agents), pin_outside=False)
        self.tracked = _tracked_products(policy, products)
        self.products = products or {}

        self.dfa = compile_dfa(formula)
        self.owner = owner
        n_qe = self.dfa.n_states
        n_qx = 1
        for _, p in self.tracked:
            n_qx *= p.dfa.n_states
        self.n_qx, self.n_qe = n_qx, n_qe
        n_comp = self.dyn.n_states * n_qx * n_qe
        if n_comp > cap:
            raise OracleError(
                f"exact propagation needs {n_comp} composite states, over the "
                f"{cap} cap; use monte_carlo_satisfaction instead"
            )

        preds = [GraphPredicate(owner, atom) for atom in self.dfa.atoms]
        self.score_letters = np.zeros(self.dyn.n_states, dtype=np.int64)
        if preds:
            for s in range(self.dyn.n_states):
                assignment = dict(enumerate(self.dyn.decode_state(s)))
                letter = 0
                for j, pred in enumerate(preds):
                    if pred.evaluate(model, assignment):
                        letter |= 1 << j
                self.score_letters[s] = letter

        self.mass = np.zeros(n_comp)
        s0 = self.dyn.initial_flat()
        qx = [p.initial[1] for _, p in self.tracked]
        qe = int(self.dfa.delta[self.dfa.initial, self.score_letters[s0]])
        self.mass[self._pack(s0, qx, qe)] = 1.0
        self.rewards = np.zeros(model.n_agents)
        self.accepting = np.zeros(n_qe, dtype=bool)
        self.accepting[list(self.dfa.accepting)] = True

    def _pack(self, s: int, qx, qe: int) -> int:
        flat = 0
        for q, (_, p) in zip(qx, self.tracked):
            flat = flat * p.dfa.n_states + q
        return (s * self.n_qx + flat) * self.n_qe + qe

    def _unpack(self, c: int):
        c, qe = divmod(c, self.n_qe)
        s, flat = divmod(c, self.n_qx)
        qx = [0] * len(self.tracked)
        for pos in range(len(self.tracked) - 1, -1, -1):
            flat, qx[pos] = divmod(flat, self.tracked[pos][1].dfa.n_states)
        return s, qx, qe

    def _successors(self, s: int, qx, t: int, weight: float):
        """Per-composite-state expansion: returns (joint successor codes,
        probabilities) and accumulates expected reward in place."""
        model, policy = self.model, self.policy
        states = self.dyn.decode_state(s)
        q_of = {i: q for (i, _), q in zip(self.tracked, qx)}

        if policy.formulation == "monolithic":
            key = (s, self._qx_flat(qx))
            dist = policy.action_dist(-1, key, t, self.dyn.n_actions)
            codes = np.zeros(0, dtype=np.int64)
            probs = np.zeros(0)
            for a_flat in np.flatnonzero(dist):
                pa = dist[a_flat]
                actions = self.dyn.decode_action(int(a_flat))
                part_c = np.zeros(1, dtype=np.int64)
                part_p = np.full(1, pa)
                for i, agent in enumerate(model.agents):
                    ctx = agent.kernel.ctx_index(
                        [states[k] for k in agent.kernel.depends_on])
                    row = agent.kernel.probs[ctx, actions[i]]
                    sup = np.flatnonzero(row)
                    part_c = (part_c[:, None]
                              + sup[None, :] * self.dyn.state_strides[i]).ravel()
                    part_p = (part_p[:, None] * row[sup][None, :]).ravel()
                    rctx = [states[k] for k in agent.reward.depends_on]
                    self.rewards[i] += weight * pa * agent.reward.value(
                        rctx, int(actions[i]))
                codes = np.concatenate([codes, part_c])
                probs = np.concatenate([probs, part_p])
            return codes, probs

        codes = np.zeros(1, dtype=np.int64)
        probs = np.ones(1)
        for i, agent in enumerate(model.agents):
            if policy.formulation == "local":
                key = states[i]
            else:
                try:
                    prod = self.products[i]
                except KeyError:
                    raise OracleError(
                        f"neighboring execution needs a product for every "
                        f"agent; none given for agent {i}"
                    ) from None
                code = sum(states[k] * prod.dyn.state_strides[pos]
                           for pos, k in enumerate(prod.members))
                key = (code, q_of.get(i, 0))
            pi = policy.action_dist(i, key, t, agent.n_actions)
            ctx = agent.kernel.ctx_index(
                [states[k] for k in agent.kernel.depends_on])
            nxt = pi @ agent.kernel.probs[ctx]
            sup = np.flatnonzero(nxt)
            codes = (codes[:, None]
                     + sup[None, :] * self.dyn.state_strides[i]).ravel()
            probs = (probs[:, None] * nxt[sup][None, :]).ravel()
            rctx = [states[k] for k in agent.reward.depends_on]
            self.rewards[i] += weight * float(
                pi @ agent.reward.values[agent.reward.ctx_index(rctx)])
        return codes, probs

    def _qx_flat(self, qx) -> int:
        flat = 0
        for q, (_, p) in zip(qx, self.tracked):
            flat = flat * p.dfa.n_states + q
        return flat

    def step(self, t: int) -> None:
        nxt = np.zeros_like(self.mass)
        for c in np.flatnonzero(self.mass):
            weight = self.mass[c]
            s, qx, qe = self._unpack(int(c))
            codes, probs = self._successors(s, qx, t, weight)
            if not len(codes):
                continue
            qe2 = self.dfa.delta[qe, self.score_letters[codes]].astype(np.int64)
            flat = np.zeros(len(codes), dtype=np.int64)
            for (i, p), q in zip(self.tracked, qx):
                bc = _member_codes(self.dyn, p, codes)
                q2 = p.dfa.delta[q, p.letters[bc]].astype(np.int64)
                flat = flat * p.dfa.n_states + q2
            comp = (codes * self.n_qx + flat) * self.n_qe + qe2
            np.add.at(nxt, comp, weight * probs)
        self.mass = nxt

    def run(self) -> float:
        for t in range(self.horizon):
            self.step(t)
        support = np.flatnonzero(self.mass)
        accepted = support[self.accepting[support % self.n_qe]]
        return float(self.mass[accepted].sum())


def exact_satisfaction(model: FactoredMdp, policy: Policy, formula: Formula,
                       owner: int, *, products: dict[int, ProductModel] | None = None,
                       horizon: int | None = None,
                       cap: int = JOINT_STATE_CAP) -> float:
    """Exact probability that the closed loop satisfies `formula` at `owner`.

    `horizon` defaults to the formula's own horizon and must not fall short
    of it; a longer horizon scores the same formula on a longer prefix (the
    compiled automaton simply keeps running). Product-form policies need the
    `products` they were synthesized with, since their lookup keys carry
    automaton states.
    """
    need = formula_horizon(formula)
    if horizon is None:
        horizon = need
    if horizon < need:
        raise OracleError(
            f"formula needs {need} steps but the horizon is {horizon}"
        )
    prop = _ExactPropagator(model, policy, products, formula, owner,
                            horizon, cap)
    return prop.run()


def exact_local_satisfaction(model: FactoredMdp, policy: Policy,
                             formula: Formula, owner: int, *,
                             horizon: int | None = None,
                             cap: int = JOINT_STATE_CAP) -> float:
    """Exact satisfaction of a local-form policy, computed on the owner's
    dependency-closed neighborhood sub-model instead of the full joint space.

    Local policies condition each agent on its own state alone, so once every
    member's kernel and reward condition on members alone the members' closed
    loop is autonomous: the sub-model's law is exactly their marginal law in
    the full model, and a formula whose counting chains stay inside the
    members scores identically. Per-owner evaluation on, say, a 50-agent ring
    then propagates a handful of agents where the full composition would sit
    far beyond any cap. Neighborhood-form dynamics grow the closure along
    dependency edges (possibly to a whole component), at which point the cap
    fails the attempt just as :func:`exact_satisfaction` would.
    """
    if policy.formulation != "local":
        raise OracleError(
            "restricted evaluation executes local-form policies only (their "
            f"lookups touch own states alone); got {policy.formulation!r}"
        )
    members = dependency_closure(
        model, touched_agents(formula, owner, model.graph))
    sub, remap = restrict_to_members(model, members)
    entries = {remap[k]: policy.entries[k]
               for k in members if k in policy.entries}
    sub_policy = Policy(
        formulation="local",
        horizon=policy.horizon,
        objective=policy.objective,
        lambdas=policy.lambdas,
        entries=entries,
        fallback=policy.fallback,
    )
    return exact_satisfaction(sub, sub_policy, formula, remap[owner],
                              horizon=horizon, cap=cap)


def expected_rewards(model: FactoredMdp, policy: Policy, horizon: int, *,
                     products: dict[int, ProductModel] | None = None,
                     cap: int = JOINT_STATE_CAP) -> np.ndarray:
    """Exact per-agent expected accumulated rewards of the closed loop."""
    from .gtl import FalseF

    if horizon < 0:
        raise OracleError("horizon must not be negative")
    prop = _ExactPropagator(model, policy, products, FalseF(), 0, horizon, cap)
    prop.run()
    return prop.rewards


def evaluate_policy(model: FactoredMdp, policy: Policy,
                    specs: dict[int, Formula], *,
                    products: dict[int, ProductModel] | None = None,
                    method: str = "exact", horizon: int | None = None,
                    runs: int = 10_000, seed: int = 0,
                    confidence: float = 0.95,
                    cap: int = JOINT_STATE_CAP) -> EvaluationReport:
    """Score every constrained agent's specification under the closed loop.

    One row per owner, exact or Monte Carlo. Exact rows re-propagate per
    owner (the scoring automaton differs), which is fine at oracle scale.
    """
    if method not in ("exact", "mc"):
        raise OracleError(f"unknown evaluation method {method!r}")
    report = EvaluationReport()
    for owner in sorted(specs):
        f = specs[owner]
        if method == "exact":
            need = formula_horizon(f)
            h = need if horizon is None else horizon
            if h < need:
                raise OracleError(
                    f"formula for agent {owner} needs {need} steps but the "
                    f"horizon is {h}"
                )
            prop = _ExactPropagator(model, policy, products, f, owner, h, cap)
            sat = prop.run()
            report.rows.append(EvaluationRow(
                agent=owner, method="exact", satisfaction=sat,
                half_width=0.0, confidence=1.0,
                expected_reward=float(prop.rewards[owner]),
                horizon=h, runs=0,
            ))
        else:
            sub = monte_carlo_satisfaction(
                model, policy, f, owner, runs=runs, seed=seed,
                confidence=confidence, horizon=horizon, products=products,
            )
            report.rows.append(sub.rows[0])
    return report


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class _SimTables:
    """Flattened per-agent kernel/policy/automaton tables in the layout the
    rollout kernels consume (see _accel). Policy tables are prefilled with
    the uniform fallback and then overwritten from the policy's entries, so
    lookup semantics match Policy.action_dist exactly."""

    def __init__(self, model: FactoredMdp, policy: Policy,
                 products: dict[int, ProductModel] | None, horizon: int):
        if policy.formulation == "monolithic":
            raise OracleError("monolithic policies take the joint path")
        if policy.formulation == "neighboring" and products is None:
            raise OracleError(
                "executing a neighboring policy needs the per-agent products "
                "it was synthesized with (pass products=...)"
            )
        M = model.n_agents
        T = horizon
        self.horizon = T
        kcum, pol, letters, delta = [], [], [], []
        koff, poff, loff, doff = [0], [0], [0], [0]
        dep_idx, dep_str, blk_idx, blk_str = [], [], [], []
        dep_off, blk_off = [0], [0]
        n_s = np.zeros(M, dtype=np.int64)
        n_a = np.zeros(M, dtype=np.int64)
        n_q = np.zeros(M, dtype=np.int64)
        n_l = np.zeros(M, dtype=np.int64)
        self.q0 = np.zeros(M, dtype=np.int64)

        for i, agent in enumerate(model.agents):
            n_s[i], n_a[i] = agent.n_states, agent.n_actions
            kcum.append(np.cumsum(agent.kernel.probs, axis=-1).ravel())
            koff.append(koff[-1] + kcum[-1].size)
            dep_idx.extend(agent.kernel.depends_on)
            dep_str.extend(agent.kernel.strides)
            dep_off.append(len(dep_idx))

            if policy.formulation == "local":
                n_q[i], n_l[i] = 1, 1
                blk_idx.append(i)
                blk_str.append(1)
                n_code = agent.n_states
                letters.append(np.zeros(1, dtype=np.int64))
                delta.append(np.zeros(1, dtype=np.int64))
            else:
                if i not in products:
                    raise OracleError(
                        f"neighboring execution needs a product for every "
                        f"agent; none given for agent {i}"
                    )
                prod = products[i]
                n_q[i] = prod.dfa.n_states
                n_l[i] = prod.dfa.n_letters
                self.q0[i] = prod.initial[1]
                blk_idx.extend(prod.members)
                blk_str.extend(prod.dyn.state_strides)
                n_code = prod.dyn.n_states
                letters.append(prod.letters.astype(np.int64))
                delta.append(prod.dfa.delta.astype(np.int64).ravel())
            blk_off.append(len(blk_idx))
            loff.append(loff[-1] + letters[-1].size)
            doff.append(doff[-1] + delta[-1].size)

            # uniform prefill, then overwrite synthesized entries
            table = np.tile(
                np.cumsum(np.full(n_a[i], 1.0 / n_a[i])),
                n_code * int(n_q[i]) * T,
            )
            for (state_key, t), dist in policy.entries.get(i, {}).items():
                if t >= T:
                    continue
                if policy.formulation == "local":
                    code, q = state_key, 0
                else:
                    code, q = state_key
                base = ((code * int(n_q[i]) + q) * T + t) * int(n_a[i])
                table[base:base + int(n_a[i])] = np.cumsum(dist)
            pol.append(table)
            poff.append(poff[-1] + table.size)

        self.kcum = np.concatenate(kcum)
        self.pol = np.concatenate(pol)
        self.letters = np.concatenate(letters)
        self.delta = np.concatenate(delta)
        self.koff = np.array(koff, dtype=np.int64)
        self.poff = np.array(poff, dtype=np.int64)
        self.loff = np.array(loff, dtype=np.int64)
        self.doff = np.array(doff, dtype=np.int64)
        self.dep_idx = np.array(dep_idx, dtype=np.int64)
        self.dep_str = np.array(dep_str, dtype=np.int64)
        self.dep_off = np.array(dep_off, dtype=np.int64)
        self.blk_idx = np.array(blk_idx, dtype=np.int64)
        self.blk_str = np.array(blk_str, dtype=np.int64)
        self.blk_off = np.array(blk_off, dtype=np.int64)
        self.n_s, self.n_a, self.n_q, self.n_l = n_s, n_a, n_q, n_l

    def rollout(self, model: FactoredMdp, runs: int, rng: np.random.Generator):
        T, M = self.horizon, len(self.n_s)
        states = np.zeros((runs, T + 1, M), dtype=np.int64)
        states[:, 0, :] = np.array(model.initial_states(), dtype=np.int64)
        actions = np.zeros((runs, T, M), dtype=np.int64)
        qs = np.tile(self.q0, (runs, 1))
        urand = rng.random((runs, T, 2, M))
        advance_rollouts(states, actions, qs, urand,
                         self.kcum, self.koff, self.dep_idx, self.dep_str,
                         self.dep_off, self.n_s, self.n_a,
                         self.pol, self.poff, self.blk_idx, self.blk_str,
                         self.blk_off, self.n_q, self.letters, self.loff,
                         self.delta, self.doff, self.n_l)
        return states, actions


def _rollout_joint(model: FactoredMdp, policy: Policy,
                   products: dict[int, ProductModel], horizon: int,
                   runs: int, rng: np.random.Generator):
    """Joint-path rollouts for monolithic policies: one Python loop per step,
    acceptable because the monolithic program only exists at oracle scale."""
    dyn = _BlockDynamics(model, range(model.n_agents), pin_outside=False)
    tracked = [(i, products[i]) for i in sorted(products)
               if products[i].dfa.n_states > 1]
    T, M = horizon, model.n_agents
    states = np.zeros((runs, T + 1, M), dtype=np.int64)
    actions = np.zeros((runs, T, M), dtype=np.int64)
    init = np.array(model.initial_states(), dtype=np.int64)
    strides = np.array(dyn.state_strides, dtype=np.int64)
    kernels = [
        (a.kernel, np.cumsum(a.kernel.probs, axis=-1)) for a in model.agents
    ]
    for b in range(runs):
        cur = init.copy()
        qx = [p.initial[1] for _, p in tracked]
        for t in range(T):
            states[b, t] = cur
            s_flat = int(cur @ strides)
            q_flat = 0
            for q, (_, p) in zip(qx, tracked):
                q_flat = q_flat * p.dfa.n_states + q
            dist = policy.action_dist(-1, (s_flat, q_flat), t, dyn.n_actions)
            a_flat = int(np.searchsorted(np.cumsum(dist), rng.random(),
                                         side="right"))
            a_flat = min(a_flat, dyn.n_actions - 1)
            acts = dyn.decode_action(a_flat)
            nxt = np.zeros(M, dtype=np.int64)
            for i, (kernel, cum) in enumerate(kernels):
                ctx = kernel.ctx_index([cur[k] for k in kernel.depends_on])
                row = cum[ctx, acts[i]]
                nxt[i] = min(int(np.searchsorted(row, rng.random(),
                                                 side="right")),
                             model.agents[i].n_states - 1)
            actions[b, t] = acts
            for pos, (i, p) in enumerate(tracked):
                bc = sum(int(nxt[k]) * p.dyn.state_strides[j]
                         for j, k in enumerate(p.members))
                qx[pos] = int(p.dfa.delta[qx[pos], p.letters[bc]])
            cur = nxt
        states[b, T] = cur
    return states, actions


def _rollout_chunk(model, policy, products, horizon, runs, rng,
                   tables: _SimTables | None):
    if policy.formulation == "monolithic":
        if products is None:
            raise OracleError(
                "executing a monolithic policy needs the per-owner products "
                "it was synthesized with (pass products=...)"
            )
        return _rollout_joint(model, policy, products, horizon, runs, rng)
    return tables.rollout(model, runs, rng)


def simulate(model: FactoredMdp, policy: Policy, horizon: int, *,
             seed: int = 0,
             products: dict[int, ProductModel] | None = None) -> GraphTrajectory:
    """One closed-loop rollout; the same seed reproduces the same run."""
    states = simulate_batch(model, policy, horizon, 1, seed=seed,
                            products=products)
    return model.trajectory(states[0])


def simulate_batch(model: FactoredMdp, policy: Policy, horizon: int,
                   runs: int, *, seed: int = 0,
                   products: dict[int, ProductModel] | None = None) -> np.ndarray:
    """Stacked rollout states, shape (runs, horizon+1, n_agents).

    Materializes every run; for estimates over large run counts use
    monte_carlo_satisfaction, which streams in chunks instead.
    """
    if horizon < 0:
        raise OracleError("horizon must not be negative")
    if runs < 1:
        raise OracleError("need at least one run")
    rng = np.random.default_rng(seed)
    tables = None
    if policy.formulation != "monolithic":
        tables = _SimTables(model, policy, products, horizon)
    states, _ = _rollout_chunk(model, policy, products, horizon, runs, rng,
                               tables)
    return states


def _wilson(successes: int, n: int, confidence: float):
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    p = successes / n
    denom = 1.0 + z * z / n
    half = z * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    return p, float(half)


def monte_carlo_satisfaction(model: FactoredMdp, policy: Policy,
                             formula: Formula, owner: int, *,
                             runs: int = 10_000, seed: int = 0,
                             confidence: float = 0.95,
                             horizon: int | None = None,
                             products: dict[int, ProductModel] | None = None,
                             batch: int | None = None) -> EvaluationReport:
    """Monte Carlo estimate of P(formula holds at `owner`) with a Wilson
    interval, plus the owner's mean accumulated reward.

    Each run is scored by the recursive trajectory monitor on the sampled
    prefix — not by the compiled automaton — so agreement between this
    estimate and `exact_satisfaction` exercises the whole pipeline. Rollouts
    stream through fixed-size chunks with independently spawned substreams;
    `batch` is a memory knob (resizing it reshuffles the sampled stream but
    not its statistics).
    """
    need = formula_horizon(formula)
    T = need if horizon is None else horizon
    if T < need:
        raise OracleError(f"formula needs {need} steps but the horizon is {T}")
    if runs < 1:
        raise OracleError("need at least one run")
    if not (0.0 < confidence < 1.0):
        raise OracleError("confidence must sit strictly inside (0, 1)")

    M = model.n_agents
    if batch is None:
        batch = max(1, min(runs, int(2e7 // max(1, T * 2 * M))))
    tables = None
    if policy.formulation != "monolithic":
        tables = _SimTables(model, policy, products, T)

    reward = model.agents[owner].reward
    rew_idx = np.array(reward.depends_on, dtype=np.int64)
    rew_str = np.array(reward.strides, dtype=np.int64)

    successes = 0
    reward_sum = 0.0
    done = 0
    seeds = np.random.SeedSequence(seed).spawn((runs + batch - 1) // batch)
    for chunk_seed in seeds:
        size = min(batch, runs - done)
        rng = np.random.default_rng(chunk_seed)
        states, actions = _rollout_chunk(model, policy, products, T, size,
                                         rng, tables)
        ctx = states[:, :T, rew_idx] @ rew_str
        reward_sum += float(
            reward.values[ctx, actions[:, :, owner]].sum()
        )
        for b in range(size):
            if monitor(model.trajectory(states[b]), owner, 0, formula):
                successes += 1
        done += size

    p, half = _wilson(successes, runs, confidence)
    return EvaluationReport(rows=[EvaluationRow(
        agent=owner, method="mc", satisfaction=p, half_width=half,
        confidence=confidence, expected_reward=reward_sum / runs,
        horizon=T, runs=runs,
    )])


# ---------------------------------------------------------------------------
# Feasibility witness for the local program
# ---------------------------------------------------------------------------


def local_marginals(model: FactoredMdp, policy: Policy,
                    horizon: int) -> list[np.ndarray]:
    """Exact per-agent state marginals mu[t, s] under local policies.

    Local-form kernels make the agents independent Markov chains, so each
    marginal propagates on its own; this is the backbone of the feasibility
    witness and is exact, not a mean-field approximation.
    """
    if policy.formulation != "local":
        raise OracleError("marginal propagation needs local-form policies")
    out = []
    for i, agent in enumerate(model.agents):
        if model.form(i) != "local":
            raise OracleError(
                f"agent {model.names[i]!r} has neighborhood-form dynamics; "
                "its marginal chain is not closed"
            )
        mu = np.zeros((horizon + 1, agent.n_states))
        mu[0, agent.initial] = 1.0
        for t in range(horizon):
            for s in np.flatnonzero(mu[t]):
                pi = policy.action_dist(i, int(s), t, agent.n_actions)
                mu[t + 1] += mu[t, s] * (pi @ agent.kernel.probs[int(s)])
        out.append(mu)
    return out


def _product_layer_propagation(model: FactoredMdp, prod: ProductModel,
                               policy: Policy, horizon: int):
    """Product-of-marginals flow through one neighborhood layer.

    Returns per-t dictionaries v[(s, q)] -> mass and the split masses
    w[(t, q, s')] -> mass that the local program's auxiliary variables carry.
    The automaton advance is deterministic on the successor block state, so
    v at t+1 is exactly the pushforward of the w split.
    """
    n_q = prod.dfa.n_states
    dists: dict[tuple[int, int, int], np.ndarray] = {}

    def own_next(k: int, s: int, t: int) -> np.ndarray:
        key = (k, s, t)
        if key not in dists:
            agent = model.agents[k]
            pi = policy.action_dist(k, s, t, agent.n_actions)
            dists[key] = pi @ agent.kernel.probs[s]
        return dists[key]

    v_layers: list[dict[tuple[int, int], float]] = [dict()]
    w_mass: dict[tuple[int, int, int], float] = {}
    s0, q0 = prod.initial
    v_layers[0][(s0, q0)] = 1.0
    for t in range(horizon):
        nxt: dict[tuple[int, int], float] = {}
        for (s, q), m in v_layers[t].items():
            member_states = prod.dyn.decode_state(s)
            codes = np.zeros(1, dtype=np.int64)
            probs = np.ones(1)
            for pos, k in enumerate(prod.members):
                d = own_next(k, int(member_states[pos]), t)
                sup = np.flatnonzero(d)
                codes = (codes[:, None]
                         + sup[None, :] * prod.dyn.state_strides[pos]).ravel()
                probs = (probs[:, None] * d[sup][None, :]).ravel()
            q2 = prod.dfa.delta[q, prod.letters[codes]]
            for s2, p, qn in zip(codes.tolist(), probs.tolist(), q2.tolist()):
                w_key = (t, q, s2)
                w_mass[w_key] = w_mass.get(w_key, 0.0) + m * p
                pair = (s2, int(qn))
                nxt[pair] = nxt.get(pair, 0.0) + m * p
        v_layers.append(nxt)
    return v_layers, w_mass


def lemma1_construction(lp: OccupancyLp, policy: Policy) -> np.ndarray:
    """Explicit feasible point of a local program's equality rows built from
    the policy's independent marginal chains.

    Own chains fill the y/z families directly; each constrained agent's
    neighborhood layer is the product of its members' marginals pushed
    through the block dynamics, and the w split is that product's one-step
    flow. Every equality row holds by construction for *any* local policies;
    threshold rows may or may not, and check_solution reports their slack
    separately.
    """
    if lp.meta.get("formulation") != "local":
        raise OracleError("the feasibility witness targets local programs")
    if policy.formulation != "local":
        raise OracleError("the feasibility witness needs local policies")
    model: FactoredMdp = lp.meta["model"]
    products: dict[int, ProductModel] = lp.meta["products"]
    T = int(lp.meta["horizon"])

    mus = local_marginals(model, policy, T)
    x = np.zeros(lp.n_vars)

    for i, agent in enumerate(model.agents):
        for block in lp.keys.family("y", i):
            s_arr, a_arr = block.arrays["s"], block.arrays["a"]
            t_arr = block.arrays["t"]
            vals = np.empty(len(block))
            for j, (s, a, t) in enumerate(
                    zip(s_arr.tolist(), a_arr.tolist(), t_arr.tolist())):
                pi = policy.action_dist(i, s, t, agent.n_actions)
                vals[j] = mus[i][t, s] * pi[a]
            x[block.start:block.start + len(block)] = vals
        for block in lp.keys.family("z", i):
            s_arr = block.arrays["s"]
            x[block.start:block.start + len(block)] = mus[i][T, s_arr]

    for i in sorted(products):
        prod = products[i]
        v_layers, w_mass = _product_layer_propagation(model, prod, policy, T)
        placed_v = 0.0
        for block in lp.keys.family("v", i):
            s_arr, q_arr = block.arrays["s"], block.arrays["q"]
            t_arr = block.arrays["t"]
            vals = np.array([
                v_layers[t].get((s, q), 0.0)
                for s, q, t in zip(s_arr.tolist(), q_arr.tolist(),
                                   t_arr.tolist())
            ])
            x[block.start:block.start + len(block)] = vals
            placed_v += vals.sum()
        if abs(placed_v - (T + 1)) > 1e-9 * (T + 1):
            raise OracleError(
                f"neighborhood layer of agent {i} leaked mass: propagated "
                f"pairs missing from the program's reachable layers"
            )
        placed_w = 0.0
        for block in lp.keys.family("w", i):
            q_arr, s_arr = block.arrays["q"], block.arrays["s"]
            t_arr = block.arrays["t"]
            vals = np.array([
                w_mass.get((t, q, s), 0.0)
                for q, s, t in zip(q_arr.tolist(), s_arr.tolist(),
                                   t_arr.tolist())
            ])
            x[block.start:block.start + len(block)] = vals
            placed_w += vals.sum()
        if abs(placed_w - T) > 1e-9 * max(T, 1):
            raise OracleError(
                f"neighborhood split of agent {i} leaked mass: propagated "
                f"(class, successor) cells missing from the program"
            )
    return x


# ---------------------------------------------------------------------------
# Freeze-convention forward pass (monolithic cross-check)
# ---------------------------------------------------------------------------


def _composed_automaton(joint: JointMdp):
    """The lockstep automaton the monolithic program runs: per-owner tables
    folded owner-major in sorted order, accepting iff every owner accepts."""
    letters = np.zeros(joint.dyn.n_states, dtype=np.int64)
    delta = np.zeros((1, 1), dtype=np.int64)
    acc = np.ones(1, dtype=bool)
    q0 = 0
    if not joint.owners:
        return letters, delta, frozenset(), 0
    _, qs = joint.initial()
    for o, q_o in zip(joint.owners, qs):
        dfa = joint.products[o].dfa
        n2, n_l2 = dfa.delta.shape
        a2 = np.zeros(n2, dtype=bool)
        a2[list(dfa.accepting)] = True
        letters = letters * n_l2 + joint.letters[o]
        delta = (
            delta[:, None, :, None] * n2 + dfa.delta[None, :, None, :]
        ).reshape(delta.shape[0] * n2, delta.shape[1] * n_l2)
        acc = (acc[:, None] & a2[None, :]).reshape(-1)
        q0 = q0 * n2 + int(q_o)
    return letters, delta, frozenset(np.flatnonzero(acc).tolist()), q0


def forward_occupancies(joint: JointMdp, policy: Policy, horizon: int) -> dict:
    """Forward occupancies of a joint policy under freeze-at-acceptance
    accounting: mass reaching an accepting automaton state stops moving and
    earning, exactly as the monolithic program's accumulators book it.

    A policy extracted from a feasible monolithic solution reproduces that
    solution's occupancies variable for variable (flow conservation pins the
    forward pass), which makes this an independent replay of the program's
    accounting rather than of true trajectory semantics: `accept_mass` is
    P(all owners accept by the horizon) under the freeze convention.
    """
    if policy.formulation != "monolithic":
        raise OracleError("the freeze-convention replay takes joint policies")
    if horizon < 1:
        raise OracleError("horizon must be at least 1")
    letters, delta, accepting, q0 = _composed_automaton(joint)
    dyn = joint.dyn
    n_q = delta.shape[0]
    s0 = dyn.initial_flat()

    live: dict[tuple[int, int], float] = {}
    frozen: dict[tuple[int, int], float] = {}
    if q0 in accepting:
        frozen[(s0, q0)] = 1.0
    else:
        live[(s0, q0)] = 1.0

    sa: dict[tuple, float] = {}
    acc: dict[tuple, float] = {}
    objective = 0.0
    for t in range(horizon):
        for (s, q), m in frozen.items():
            acc[(s, q, t)] = m
        nxt_live: dict[tuple[int, int], float] = {}
        for (s, q), m in live.items():
            dist = policy.action_dist(-1, (s, q), t, dyn.n_actions)
            for a in np.flatnonzero(dist):
                w = m * float(dist[a])
                if w == 0.0:
                    continue
                sa[(s, q, int(a), t)] = sa.get((s, q, int(a), t), 0.0) + w
                objective += w * joint.reward_total(s, int(a))
                succ, prob = dyn.successors(s, int(a))
                q2 = delta[q, letters[succ]]
                for s2, p, qn in zip(succ.tolist(), prob.tolist(),
                                     q2.tolist()):
                    pair = (int(s2), int(qn))
                    if qn in accepting:
                        frozen[pair] = frozen.get(pair, 0.0) + w * p
                    else:
                        nxt_live[pair] = nxt_live.get(pair, 0.0) + w * p
        live = nxt_live
    term = {pair: m for pair, m in live.items()}
    for (s, q), m in frozen.items():
        acc[(s, q, horizon)] = m
    accept_mass = float(sum(frozen.values()))
    return {"sa": sa, "acc": acc, "term": term,
            "objective": objective, "accept_mass": accept_mass}
