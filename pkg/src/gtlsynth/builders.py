"""Constructors for the three occupancy-measure formulations.

All three share one accounting convention. Action variables exist on layers
t = 0..T-1; layer T carries state-only variables; the satisfaction
probability is read off the accepting variables at the final layer and
thresholded there. Reachable (state, automaton) pairs are enumerated layer by
layer; variables exist only for reachable pairs.

Accepting mass is handled in one of two equivalent readings. The monolithic
program uses the accumulator reading: mass reaching an accepting automaton
state freezes into an accumulator variable that is copied forward (no
actions, no reward). The neighboring program uses the sink reading: accepted
mass keeps flowing with the block dynamics — the automaton merely rests in
its accepting sink — but earns no further reward, and is collected by the
final layer's accepting variables. Both readings assign every policy the
same objective and the same satisfaction probability; the sink reading is
what keeps the cross-block consistency rows mass-conserving at every layer
(under the accumulator reading a block whose automaton accepts early would
drain its live pool while a neighbour's never does, and no assignment could
equate their live marginals).

- build_monolithic_lp: exact joint program over the full composition, with
  every constrained agent's automaton run in lockstep; oracle machinery.
- build_neighboring_lp: one block per agent over its closed neighborhood with
  joint block actions, stitched together by marginal-consistency rows on every
  pair of agents whose closed neighborhoods intersect. The scalable
  formulation; guarded by `var_cap`.
- build_local_lp: for models whose kernels and rewards condition on the agent
  alone, per-agent chains plus a state-only neighborhood layer tied to the
  chains by linking rows. An outer relaxation of the neighboring program.
"""

from __future__ import annotations

import numpy as np

from .lp import LpBuilder, LpError, LpSizeError, OccupancyLp
from .model import FactoredMdp
from .product import JointMdp, ProductModel

VAR_CAP = 10_000_000


# ---------------------------------------------------------------------------
# Shared chain machinery
# ---------------------------------------------------------------------------


class _Chain:
    """Vectorized flow-row assembly for one (block dynamics x DFA) chain.

    Wraps either a ProductModel (per-agent blocks) or the joint composition;
    everything downstream only needs successor expansion, the valuation
    table, the transition function, and the accepting set.
    """

    def __init__(self, dyn, letters: np.ndarray, delta: np.ndarray,
                 accepting: frozenset, initial_pair: tuple[int, int],
                 reward_of=None):
        self.dyn = dyn
        self.letters = letters
        self.delta = delta
        self.accepting = accepting
        self.initial_pair = initial_pair
        self.n_q = delta.shape[0] if delta.size else 1
        self._reward_of = reward_of
        # CSR-like expansion of the base transitions, filled lazily per state:
        # row s*nA+a -> (successor states, probabilities)
        self._rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def layers(self, horizon: int,
               freeze_accepting: bool = True) -> list[dict[tuple[int, int], int]]:
        """Reachable (state, q) pairs per t.

        With `freeze_accepting` (the accumulator reading used by the
        monolithic and neighboring programs) accepting pairs persist in
        place; without it they keep moving with the block dynamics, the
        automaton merely staying inside its accepting sink.
        """
        layers: list[dict[tuple[int, int], int]] = []
        current = {self.initial_pair}
        for t in range(horizon + 1):
            layers.append({pair: i for i, pair in enumerate(sorted(current))})
            if t == horizon:
                break
            nxt: set[tuple[int, int]] = set()
            for (s, q) in current:
                if freeze_accepting and q in self.accepting:
                    nxt.add((s, q))
                    continue
                succ = self.dyn.successors_any_action(s)
                q_next = self.delta[q, self.letters[succ]]
                nxt.update(zip(succ.tolist(), (int(x) for x in q_next)))
            current = nxt
        return layers

    def expand(self, s_arr: np.ndarray, a_arr: np.ndarray):
        """Flatten successor lists of many (state, action) pairs at once.

        Returns (repeat_index, succ_states, probs): entry j of the output
        arose from input position repeat_index[j].
        """
        n_a = self.dyn.n_actions
        sa = s_arr.astype(np.int64) * n_a + a_arr
        for code in np.unique(sa):
            if int(code) not in self._rows:
                s, a = divmod(int(code), n_a)
                self._rows[int(code)] = self.dyn.successors(s, a)
        lens = np.array([len(self._rows[int(c)][0]) for c in sa], dtype=np.int64)
        total = int(lens.sum())
        succ = np.empty(total, dtype=np.int64)
        prob = np.empty(total)
        pos = 0
        for c, ln in zip(sa, lens):
            block = self._rows[int(c)]
            succ[pos:pos + ln] = block[0]
            prob[pos:pos + ln] = block[1]
            pos += ln
        repeat_index = np.repeat(np.arange(len(sa), dtype=np.int64), lens)
        return repeat_index, succ, prob

    def reward_table(self, states: np.ndarray) -> np.ndarray:
        """Reward per (reachable state, action); full table indexed by state."""
        n_a = self.dyn.n_actions
        table = np.zeros((self.dyn.n_states, n_a))
        for s in states.tolist():
            for a in range(n_a):
                table[s, a] = self._reward_of(s, a)
        return table


def _emit_chain(builder: LpBuilder, agent: int, chain: _Chain,
                layers: list[dict], horizon: int, freeze: bool = True) -> dict:
    """Create variables and flow/accumulator rows for one chain.

    With `freeze` (the accumulator reading) accepting pairs become action-less
    accumulator variables as soon as they are reached; `layers` must then come
    from `chain.layers(horizon)`. Without it (the sink reading) every pair
    stays an action-bearing variable until the final layer — accepting pairs
    merely stop earning reward — and `layers` must come from
    `chain.layers(horizon, freeze_accepting=False)`.

    Returns per-agent bookkeeping used afterwards for coupling rows,
    thresholds, and the objective: the concatenated sa arrays and the
    accepting columns at the final layer.
    """
    n_q = chain.n_q
    n_a = chain.dyn.n_actions
    T = horizon

    # base-reachable states (for the reward table)
    reached = np.unique(
        np.concatenate([
            np.fromiter((s for (s, _) in layer), dtype=np.int64, count=len(layer))
            for layer in layers
        ])
    )
    rewards = chain.reward_table(reached) if chain._reward_of else None

    sa_parts: list[dict] = []
    cols_sa: list[np.ndarray] = []     # per t
    pairs_sa: list[np.ndarray] = []    # per t: codes aligned with cols
    prev_acc: dict[int, int] = {}      # pair code -> acc column at t-1
    prev_codes: np.ndarray | None = None
    prev_rowinfo = None
    final_acc_cols: np.ndarray = np.zeros(0, dtype=np.int64)

    for t in range(T + 1):
        layer = layers[t]
        codes = np.fromiter(
            (s * n_q + q for (s, q) in layer), dtype=np.int64, count=len(layer)
        )
        s_arr = codes // n_q
        q_arr = codes % n_q
        acc_mask = np.fromiter(
            ((q in chain.accepting) for q in q_arr.tolist()),
            dtype=bool, count=len(layer),
        )
        # pairs parked in action-less variables at this layer: every accepting
        # pair under the accumulator reading, only the final layer's under the
        # sink reading
        park = acc_mask if (freeze or t == T) else np.zeros_like(acc_mask)

        # variables for this layer
        if t < T:
            ns = int((~park).sum())
            sa_s = np.repeat(s_arr[~park], n_a)
            sa_q = np.repeat(q_arr[~park], n_a)
            sa_a = np.tile(np.arange(n_a, dtype=np.int64), ns)
            if rewards is not None:
                # accepted-but-still-flowing mass earns nothing further, so
                # both readings score every policy identically
                obj = np.where(
                    np.repeat(acc_mask[~park], n_a), 0.0, rewards[sa_s, sa_a]
                )
            else:
                obj = 0.0
            cols = builder.add_block(
                "sa", agent,
                {"s": sa_s, "q": sa_q, "a": sa_a, "t": np.full(ns * n_a, t)},
                lb=0.0, ub=np.inf, obj=obj,
            )
            cols_sa.append(cols)
            pairs_sa.append(np.repeat(codes[~park], n_a))
            sa_parts.append({"s": sa_s, "q": sa_q, "a": sa_a, "cols": cols})
            term_cols = None
        else:
            term_cols = builder.add_block(
                "term", agent,
                {"s": s_arr[~park], "q": q_arr[~park]},
                lb=0.0, ub=1.0,
            )
        acc_cols = builder.add_block(
            "acc", agent,
            {"s": s_arr[park], "q": q_arr[park],
             "t": np.full(int(park.sum()), t)},
            lb=0.0, ub=1.0,
        )
        if t == T:
            final_acc_cols = acc_cols

        # rows for this layer
        if t == 0:
            rid = builder.eq.add_block(("init", agent), 1, 1.0)
            if park[0]:
                builder.eq.put(rid, acc_cols, 1.0)
            else:
                builder.eq.put(np.repeat(rid, n_a), cols_sa[0], 1.0)
        else:
            # one row per pair, grouped flow/term first then accumulators
            row_of_pair = np.empty(len(layer), dtype=np.int64)
            n_flow = int((~park).sum())
            if t < T:
                flow_rows = builder.eq.add_block(("flow", agent, t), n_flow, 0.0)
            else:
                flow_rows = builder.eq.add_block(("term", agent), n_flow, 0.0)
            acc_rows = builder.eq.add_block(
                ("accflow", agent, t), int(park.sum()), 0.0
            )
            row_of_pair[~park] = flow_rows
            row_of_pair[park] = acc_rows

            # outgoing / carried variables enter with +1
            if t < T:
                rows_plus = row_of_pair[np.searchsorted(codes, pairs_sa[t])]
                builder.eq.put(rows_plus, cols_sa[t], 1.0)
            else:
                builder.eq.put(row_of_pair[~park], term_cols, 1.0)
            builder.eq.put(row_of_pair[park], acc_cols, 1.0)

            # accumulators carried from t-1 enter with -1
            if prev_acc:
                acc_codes = codes[park]
                keep = np.fromiter(
                    (prev_acc.get(int(c), -1) for c in acc_codes),
                    dtype=np.int64, count=len(acc_codes),
                )
                has_prev = keep >= 0
                builder.eq.put(row_of_pair[park][has_prev], keep[has_prev], -1.0)

            # inflow from t-1 state-action variables enters with -p
            src = prev_rowinfo
            if src is not None and len(src["cols"]):
                rep, succ, prob = chain.expand(src["s"], src["a"])
                q_next = chain.delta[src["q"][rep], chain.letters[succ]]
                dst = succ * n_q + q_next
                pos = np.searchsorted(codes, dst)
                builder.eq.put(row_of_pair[pos], src["cols"][rep], -prob)

        prev_acc = {
            int(c): int(col)
            for c, col in zip(codes[park], acc_cols)
        }
        prev_codes = codes
        prev_rowinfo = sa_parts[t] if t < T else None

    del prev_codes
    sa_all = {
        "s": np.concatenate([p["s"] for p in sa_parts]),
        "q": np.concatenate([p["q"] for p in sa_parts]),
        "a": np.concatenate([p["a"] for p in sa_parts]),
        "t": np.concatenate(
            [np.full(len(p["cols"]), t) for t, p in enumerate(sa_parts)]
        ),
        "cols": np.concatenate([p["cols"] for p in sa_parts]),
    }
    return {"sa": sa_all, "final_acc_cols": final_acc_cols}


def _chain_var_count(chain: _Chain, layers: list[dict], horizon: int,
                     freeze: bool = True) -> int:
    n_a = chain.dyn.n_actions
    total = 0
    for t, layer in enumerate(layers):
        n_acc = sum(1 for (_, q) in layer if q in chain.accepting)
        if not freeze and t < horizon:
            n_acc = 0
        n_other = len(layer) - n_acc
        total += n_acc + (n_other * n_a if t < horizon else n_other)
    return total


# ---------------------------------------------------------------------------
# Monolithic
# ---------------------------------------------------------------------------


def build_monolithic_lp(joint: JointMdp, lam: float | None, horizon: int,
                        var_cap: int = VAR_CAP) -> OccupancyLp:
    """Exact occupancy program over the full joint composition.

    Every constrained agent's automaton is composed in lockstep over the
    joint valuations, and `lam` thresholds the probability that *all* of
    them accept by the final layer. With no constrained agent, `lam` is
    ignored and the program is pure reward maximization. This is oracle
    machinery; the joint state-space cap inside JointMdp keeps it small.
    """
    if horizon < 1:
        raise LpError("horizon must be at least 1")
    builder = LpBuilder()
    meta: dict = {
        "formulation": "monolithic",
        "horizon": int(horizon),
        "n_joint_actions": joint.dyn.n_actions,
        "lambdas": {},
        "infeasible_thresholds": [],
        "exact": joint.exact,
    }

    if joint.owners:
        s0, qs = joint.initial()
        letters = np.zeros(joint.dyn.n_states, dtype=np.int64)
        delta = np.zeros((1, 1), dtype=np.int64)
        acc = np.ones(1, dtype=bool)
        q0 = 0
        for o, q_o in zip(joint.owners, qs):
            dfa = joint.products[o].dfa
            n2, L2 = dfa.delta.shape
            if delta.size * n2 * L2 > 10_000_000:
                raise LpSizeError("composed automaton table too large")
            a2 = np.zeros(n2, dtype=bool)
            a2[list(dfa.accepting)] = True
            letters = letters * L2 + joint.letters[o]
            delta = (
                delta[:, None, :, None] * n2 + dfa.delta[None, :, None, :]
            ).reshape(delta.shape[0] * n2, delta.shape[1] * L2)
            acc = (acc[:, None] & a2[None, :]).reshape(-1)
            q0 = q0 * n2 + int(q_o)
        accepting = frozenset(np.flatnonzero(acc).tolist())
        initial_pair = (s0, q0)
    else:
        letters = np.zeros(joint.dyn.n_states, dtype=np.int64)
        delta = np.zeros((1, 1), dtype=np.int64)
        accepting = frozenset()
        initial_pair = (joint.dyn.initial_flat(), 0)

    chain = _Chain(joint.dyn, letters, delta, accepting, initial_pair,
                   reward_of=joint.reward_total)
    layers = chain.layers(horizon)
    count = _chain_var_count(chain, layers, horizon)
    if count > var_cap:
        raise LpSizeError(
            f"monolithic program needs {count} variables, over the {var_cap} cap"
        )
    info = _emit_chain(builder, -1, chain, layers, horizon)

    if joint.owners and lam is not None:
        meta["lambdas"] = {int(o): float(lam) for o in joint.owners}
        cols = info["final_acc_cols"]
        key = joint.owners[0] if len(joint.owners) == 1 else "joint"
        if len(cols):
            rid = builder.ge.add_block(("threshold", key), 1, float(lam))
            builder.ge.put(np.repeat(rid, len(cols)), cols, 1.0)
        else:
            # no accepting pair is reachable within the horizon, so the
            # threshold can never be met; flag it instead of emitting a
            # degenerate 0 >= lam row
            meta["infeasible_thresholds"].extend(int(o) for o in joint.owners)
    return builder.build(meta)


# ---------------------------------------------------------------------------
# Neighboring blocks
# ---------------------------------------------------------------------------


def build_neighboring_lp(model: FactoredMdp, products: dict[int, ProductModel],
                         lambdas: dict[int, float], horizon: int,
                         var_cap: int = VAR_CAP) -> OccupancyLp:
    """Per-agent closed-neighborhood blocks with joint block actions, glued by
    marginal-consistency rows over every pair of agents whose closed
    neighborhoods intersect.

    `products` must hold one product per agent (unconstrained agents get a
    trivial single-state automaton with an empty accepting set — see
    product.trivial_product). `lambdas` maps the constrained agents to their
    satisfaction thresholds.

    The consistency rows equate, per shared (state, action, t) cell, the
    occupancy marginals of the two blocks. The chains use the sink reading of
    acceptance (see the module docstring): accepted mass keeps flowing with
    the block dynamics at zero reward instead of freezing into mid-horizon
    accumulators, so every block's action layer always carries total mass and
    the consistency rows stay mass-conserving no matter how early one block's
    automaton accepts relative to its neighbours'. Satisfaction is collected
    at the final layer, where accepting pairs park in accumulator variables.
    """
    M = model.n_agents
    if sorted(products) != list(range(M)):
        raise LpError("need one product per agent (see synth.trivial_product)")
    if horizon < 1:
        raise LpError("horizon must be at least 1")
    for i in lambdas:
        if not (0.0 <= lambdas[i] <= 1.0):
            raise LpError(f"threshold for agent {model.names[i]!r} outside [0,1]")

    builder = LpBuilder()
    meta: dict = {
        "formulation": "neighboring",
        "horizon": int(horizon),
        "model": model,
        "products": products,
        "lambdas": {int(i): float(v) for i, v in lambdas.items()},
        "infeasible_thresholds": [],
        "exact": all(products[i].exact_closure for i in range(M)),
    }

    # fail fast on size before any expensive enumeration: first with the
    # crude dense bound, then with exact reachable counts agent by agent
    bound = 0
    chains: dict[int, _Chain] = {}
    for i in range(M):
        p = products[i]
        chains[i] = _Chain(p.dyn, p.letters, p.dfa.delta, p.dfa.accepting,
                           p.initial, reward_of=p.reward)
        bound += p.dyn.n_states * p.dfa.n_states * (p.dyn.n_actions + 1) * (horizon + 1)
    layers: dict[int, list[dict]] = {}
    if bound > var_cap:
        running = 0
        for i in range(M):
            layers[i] = chains[i].layers(horizon, freeze_accepting=False)
            running += _chain_var_count(chains[i], layers[i], horizon,
                                        freeze=False)
            if running > var_cap:
                per_agent = running // (i + 1)
                raise LpSizeError(
                    f"neighboring program exceeds the {var_cap} variable cap: "
                    f"agents 0..{i} alone need {running} variables "
                    f"(~{per_agent} each, {M} agents total)"
                )
    else:
        for i in range(M):
            layers[i] = chains[i].layers(horizon, freeze_accepting=False)

    infos = {}
    for i in range(M):
        infos[i] = _emit_chain(builder, i, chains[i], layers[i], horizon,
                               freeze=False)

    # thresholds
    for i, lam in sorted(meta["lambdas"].items()):
        cols = infos[i]["final_acc_cols"]
        if len(cols) == 0:
            meta["infeasible_thresholds"].append(i)
            continue
        rid = builder.ge.add_block(("threshold", i), 1, float(lam))
        builder.ge.put(np.repeat(rid, len(cols)), cols, 1.0)

    # consistency rows: for every pair of agents with intersecting closed
    # neighborhoods, the (state, action) marginal over the shared agents must
    # agree between the two blocks, at every action layer
    for (i, j) in _coupled_pairs(model):
        shared = model.graph.shared(i, j)
        codes_i = _marginal_codes(model, products[i], infos[i]["sa"], shared, horizon)
        codes_j = _marginal_codes(model, products[j], infos[j]["sa"], shared, horizon)
        cells = np.union1d(np.unique(codes_i), np.unique(codes_j))
        rows = builder.eq.add_block(("consistency", i, j), len(cells), 0.0)
        builder.eq.put(
            rows[np.searchsorted(cells, codes_i)], infos[i]["sa"]["cols"], 1.0
        )
        builder.eq.put(
            rows[np.searchsorted(cells, codes_j)], infos[j]["sa"]["cols"], -1.0
        )

    return builder.build(meta)


def _coupled_pairs(model: FactoredMdp) -> list[tuple[int, int]]:
    """Agent pairs whose closed neighborhoods intersect (includes non-edges)."""
    pairs = []
    for i in range(model.n_agents):
        for j in range(i + 1, model.n_agents):
            if model.graph.shared(i, j):
                pairs.append((i, j))
    return pairs


def _marginal_codes(model: FactoredMdp, prod: ProductModel, sa: dict,
                    shared: tuple[int, ...], horizon: int) -> np.ndarray:
    """Encode each sa variable's (shared-state, shared-action, t) cell."""
    code = np.zeros(len(sa["cols"]), dtype=np.int64)
    for k in shared:
        pos = prod.members.index(k)
        size = prod.dyn.state_sizes[pos]
        stride = prod.dyn.state_strides[pos]
        code = code * size + (sa["s"] // stride) % size
    for k in shared:
        pos = prod.members.index(k)
        size = prod.dyn.action_sizes[pos]
        stride = prod.dyn.action_strides[pos]
        code = code * size + (sa["a"] // stride) % size
    return code * (horizon + 1) + sa["t"]


# ---------------------------------------------------------------------------
# Local chains
# ---------------------------------------------------------------------------


def build_local_lp(model: FactoredMdp, products: dict[int, ProductModel],
                   lambdas: dict[int, float], horizon: int,
                   var_cap: int = VAR_CAP) -> OccupancyLp:
    """Per-agent local chains plus state-only neighborhood layers.

    Requires every kernel and reward to be in local form (conditioning on the
    agent alone); models whose dynamics genuinely couple neighbors have no
    local decomposition and are rejected. `products` holds one product per
    *constrained* agent only. The neighborhood layers carry no actions: an
    auxiliary w(q, s', t) splits each automaton class's mass by next block
    state, which keeps the deterministic automaton advance linear. Accepted
    mass keeps moving with the block dynamics (the automaton merely stays in
    its accepting sink), so the accepting layer-T variables read off the
    probability of having accepted by the horizon. Linking rows tie each
    layer's member marginals to the member chains; state-only marginal rows
    tie constrained agents with intersecting closed neighborhoods pairwise.

    Two honest deviations from the exact product-of-marginals coupling: the
    w split may correlate members beyond what independent local policies can
    realize (an outer relaxation, so thresholds are optimistic and synthesized
    policies must be re-validated by simulation or exact propagation), and
    the own chains never freeze reward on acceptance the way the neighboring
    blocks do, because acceptance is not a function of the own state. Both
    effects vanish on instances whose optimal policies resolve their
    specifications only at the horizon.
    """
    M = model.n_agents
    if horizon < 1:
        raise LpError("horizon must be at least 1")
    for k in range(M):
        if model.form(k) != "local":
            raise LpError(
                f"agent {model.names[k]!r} has neighborhood-form dynamics; "
                "the local formulation needs kernels conditioning on the "
                "agent alone"
            )
    for i in products:
        if products[i].owner != i:
            raise LpError(f"product for agent {i} owned by {products[i].owner}")
    for i in lambdas:
        if i not in products:
            raise LpError(f"threshold for agent {i} without a product")

    builder = LpBuilder()
    meta: dict = {
        "formulation": "local",
        "horizon": int(horizon),
        "model": model,
        "products": products,
        "lambdas": {int(i): float(v) for i, v in lambdas.items()},
        "infeasible_thresholds": [],
        "exact": True,  # local kernels leave nothing outside any block
    }
    T = horizon

    # --- per-agent chains over own states -------------------------------
    # reachable own states per t
    own_layers: dict[int, list[np.ndarray]] = {}
    for k in range(M):
        agent = model.agents[k]
        succ_any = {}
        cur = np.array([agent.initial], dtype=np.int64)
        seq = [cur]
        for t in range(T):
            nxt: set[int] = set()
            for s in cur.tolist():
                if s not in succ_any:
                    parts = [
                        agent.kernel.dist([s], a)[0] for a in range(agent.n_actions)
                    ]
                    succ_any[s] = np.unique(np.concatenate(parts))
                nxt.update(succ_any[s].tolist())
            cur = np.array(sorted(nxt), dtype=np.int64)
            seq.append(cur)
        own_layers[k] = seq

    total = sum(
        sum(len(states) * (model.agents[k].n_actions if t < T else 1)
            for t, states in enumerate(own_layers[k]))
        for k in range(M)
    )
    prod_layers: dict[int, list[dict]] = {}
    chains: dict[int, _Chain] = {}
    for i in sorted(products):
        p = products[i]
        chains[i] = _Chain(p.dyn, p.letters, p.dfa.delta, p.dfa.accepting, p.initial)
        prod_layers[i] = chains[i].layers(T, freeze_accepting=False)
        total += sum(len(layer) for layer in prod_layers[i])  # v variables
        # w variables bound below by |layer| * nQ; count exactly later
    if total > var_cap:
        raise LpSizeError(
            f"local program needs at least {total} variables, over the "
            f"{var_cap} cap"
        )

    y_info: dict[int, dict] = {}
    for k in range(M):
        agent = model.agents[k]
        n_a = agent.n_actions
        rewards = np.array(
            [[agent.reward.value([s], a) for a in range(n_a)]
             for s in range(agent.n_states)]
        )
        cols_per_t = []
        states_per_t = []
        for t in range(T):
            states = own_layers[k][t]
            y_s = np.repeat(states, n_a)
            y_a = np.tile(np.arange(n_a, dtype=np.int64), len(states))
            cols = builder.add_block(
                "y", k, {"s": y_s, "a": y_a, "t": np.full(len(y_s), t)},
                lb=0.0, ub=np.inf, obj=rewards[y_s, y_a],
            )
            cols_per_t.append(cols)
            states_per_t.append(states)
        z_states = own_layers[k][T]
        z_cols = builder.add_block("z", k, {"s": z_states}, lb=0.0, ub=1.0)

        rid = builder.eq.add_block(("init", k), 1, 1.0)
        builder.eq.put(np.repeat(rid, n_a), cols_per_t[0], 1.0)
        for t in range(1, T + 1):
            states = own_layers[k][t]
            if t < T:
                rows = builder.eq.add_block(("flow", k, t), len(states), 0.0)
                plus_rows = rows[np.searchsorted(states, np.repeat(states, n_a))]
                builder.eq.put(plus_rows, cols_per_t[t], 1.0)
            else:
                rows = builder.eq.add_block(("term", k), len(states), 0.0)
                builder.eq.put(rows, z_cols, 1.0)
            src_s = np.repeat(states_per_t[t - 1], n_a)
            src_a = np.tile(np.arange(n_a, dtype=np.int64), len(states_per_t[t - 1]))
            for idx in range(len(src_s)):
                supp, probs = agent.kernel.dist([int(src_s[idx])], int(src_a[idx]))
                builder.eq.put(
                    rows[np.searchsorted(states, supp)],
                    np.repeat(cols_per_t[t - 1][idx], len(supp)),
                    -probs,
                )
        y_info[k] = {
            "cols_per_t": cols_per_t, "states_per_t": states_per_t,
            "z_cols": z_cols, "z_states": z_states,
        }

    # --- neighborhood layers for constrained agents ---------------------
    v_info: dict[int, dict] = {}
    for i in sorted(products):
        p = products[i]
        chain = chains[i]
        n_q = chain.n_q
        layers = prod_layers[i]
        v_cols_per_t = []
        v_codes_per_t = []
        for t in range(T + 1):
            codes = np.fromiter(
                (s * n_q + q for (s, q) in layers[t]),
                dtype=np.int64, count=len(layers[t]),
            )
            cols = builder.add_block(
                "v", i,
                {"s": codes // n_q, "q": codes % n_q, "t": np.full(len(codes), t)},
                lb=0.0, ub=1.0,
            )
            v_cols_per_t.append(cols)
            v_codes_per_t.append(codes)

        rid = builder.eq.add_block(("vinit", i), 1, 1.0)
        builder.eq.put(rid, v_cols_per_t[0][:1], 1.0)

        prev_w: dict[tuple[int, int], int] = {}
        for t in range(T + 1):
            codes = v_codes_per_t[t]
            q_arr = codes % n_q
            if t > 0:
                # v advance: every automaton class moves with the block
                # dynamics; accepted mass stays accepted only because the
                # automaton cannot leave its accepting sink
                rows = builder.eq.add_block(("vflow", i, t), len(codes), 0.0)
                builder.eq.put(rows, v_cols_per_t[t], 1.0)
                if prev_w:
                    w_q = np.array([q for (q, _) in prev_w], dtype=np.int64)
                    w_s2 = np.array([s2 for (_, s2) in prev_w], dtype=np.int64)
                    w_cols = np.array(list(prev_w.values()), dtype=np.int64)
                    q_dst = chain.delta[w_q, chain.letters[w_s2]]
                    dst = w_s2 * n_q + q_dst
                    pos = np.searchsorted(codes, dst)
                    builder.eq.put(rows[pos], w_cols, -1.0)
            if t < T:
                # w variables and automaton-state mass conservation
                base_next = np.unique(v_codes_per_t[t + 1] // n_q)
                w_index: dict[tuple[int, int], int] = {}
                for q in np.unique(q_arr).tolist():
                    support = np.unique(codes[codes % n_q == q] // n_q)
                    dests = np.unique(np.concatenate(
                        [chain.dyn.successors_any_action(int(s)) for s in support]
                    ))
                    dests = dests[np.isin(dests, base_next)]
                    cols = builder.add_block(
                        "w", i,
                        {"q": np.full(len(dests), q), "s": dests,
                         "t": np.full(len(dests), t)},
                        lb=0.0, ub=1.0,
                    )
                    rid = builder.eq.add_block(("wmass", i, t, q), 1, 0.0)
                    builder.eq.put(np.repeat(rid, len(cols)), cols, 1.0)
                    at_q = np.flatnonzero(q_arr == q)
                    builder.eq.put(
                        np.repeat(rid, len(at_q)), v_cols_per_t[t][at_q], -1.0
                    )
                    for s2, col in zip(dests.tolist(), cols.tolist()):
                        w_index[(q, s2)] = col
                prev_w = w_index

        v_info[i] = {"cols_per_t": v_cols_per_t, "codes_per_t": v_codes_per_t,
                     "n_q": n_q}

        # linking rows to every member chain, all t including the last
        for k in p.members:
            pos = p.members.index(k)
            size = p.dyn.state_sizes[pos]
            stride = p.dyn.state_strides[pos]
            kind = ("ownlink", i) if k == i else ("linking", i, k)
            for t in range(T + 1):
                member_states = (
                    y_info[k]["states_per_t"][t] if t < T else y_info[k]["z_states"]
                )
                rows = builder.eq.add_block(kind + (t,), len(member_states), 0.0)
                s_of_v = (v_codes_per_t[t] // n_q // stride) % size
                builder.eq.put(
                    rows[np.searchsorted(member_states, s_of_v)],
                    v_cols_per_t[t], 1.0,
                )
                if t < T:
                    n_a = model.agents[k].n_actions
                    rows_y = rows[np.searchsorted(
                        member_states, np.repeat(member_states, n_a)
                    )]
                    builder.eq.put(rows_y, y_info[k]["cols_per_t"][t], -1.0)
                else:
                    builder.eq.put(rows, y_info[k]["z_cols"], -1.0)

    # --- pairwise state-only marginal rows between constrained agents with
    # intersecting closed neighborhoods
    for (i, j) in _coupled_pairs(model):
        if i not in products or j not in products:
            continue
        shared = model.graph.shared(i, j)
        for t in range(T + 1):
            codes_i = _state_marginal_codes(products[i], v_info[i], shared, t)
            codes_j = _state_marginal_codes(products[j], v_info[j], shared, t)
            cells = np.union1d(np.unique(codes_i), np.unique(codes_j))
            rows = builder.eq.add_block(("pairwise", i, j, t), len(cells), 0.0)
            builder.eq.put(
                rows[np.searchsorted(cells, codes_i)],
                v_info[i]["cols_per_t"][t], 1.0,
            )
            builder.eq.put(
                rows[np.searchsorted(cells, codes_j)],
                v_info[j]["cols_per_t"][t], -1.0,
            )

    # --- thresholds ------------------------------------------------------
    for i, lam in sorted(meta["lambdas"].items()):
        codes = v_info[i]["codes_per_t"][T]
        n_q = v_info[i]["n_q"]
        acc = np.fromiter(
            ((int(c) % n_q) in products[i].dfa.accepting for c in codes),
            dtype=bool, count=len(codes),
        )
        cols = v_info[i]["cols_per_t"][T][acc]
        if len(cols) == 0:
            meta["infeasible_thresholds"].append(i)
            continue
        rid = builder.ge.add_block(("threshold", i), 1, float(lam))
        builder.ge.put(np.repeat(rid, len(cols)), cols, 1.0)

    if builder.n_vars > var_cap:
        raise LpSizeError(
            f"local program needs {builder.n_vars} variables, over the "
            f"{var_cap} cap"
        )
    return builder.build(meta)


def _state_marginal_codes(prod: ProductModel, vinfo: dict,
                          shared: tuple[int, ...], t: int) -> np.ndarray:
    """Shared-state cell code of each v variable at layer t."""
    codes = vinfo["codes_per_t"][t] // vinfo["n_q"]
    out = np.zeros(len(codes), dtype=np.int64)
    for k in shared:
        pos = prod.members.index(k)
        size = prod.dyn.state_sizes[pos]
        stride = prod.dyn.state_strides[pos]
        out = out * size + (codes // stride) % size
    return out
