"""Product constructions: neighborhood-block × DFA products per agent, and the
exact joint composition used by the oracle and the monolithic formulation.

A ProductModel is the synchronous product of one agent's neighborhood block
(the joint states of its closed neighborhood, under the *joint* actions of all
block members) with that agent's specification DFA. The automaton advances on
the valuation of the successor block state. Accepting product states are
absorbing: the occupancy formulations treat them as frozen accumulators, so
the product never enumerates transitions out of them.

When a block member's kernel conditions on an agent outside the block, that
coordinate is pinned to its initial state (the closure rule); the
`exact_closure` flag records whether any pinning was needed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .automata import (
    AutomataError,
    Dfa,
    GraphPredicate,
    compile_dfa,
    extract_predicates,
)
from .model import FactoredMdp, _strides

BLOCK_STATE_CAP = 2_000_000
JOINT_STATE_CAP = 1_000_000


class ProductError(ValueError):
    """Raised when a product construction exceeds a cap or is ill-posed."""


def _flatten(states, strides) -> int:
    return int(sum(s * st for s, st in zip(states, strides)))


def _unflatten(flat: int, sizes, strides) -> tuple[int, ...]:
    out = []
    for st in strides:
        out.append(flat // st)
        flat = flat % st
    return tuple(out)


class _BlockDynamics:
    """Shared mechanics for a set of member agents moving jointly: flat state
    and action indexing, per-(state, action) successor distributions, and
    memoized successor caches."""

    def __init__(self, model: FactoredMdp, members, pin_outside: bool):
        self.model = model
        self.members = tuple(members)
        self.state_sizes = tuple(model.agents[k].n_states for k in self.members)
        self.state_strides = _strides(self.state_sizes)
        self.n_states = int(np.prod(self.state_sizes)) if self.members else 1
        self.action_sizes = tuple(model.agents[k].n_actions for k in self.members)
        self.action_strides = _strides(self.action_sizes)
        self.n_actions = int(np.prod(self.action_sizes))
        member_pos = {k: p for p, k in enumerate(self.members)}
        # for each member, how to read its kernel context out of a block state:
        # block position, or a pinned initial state for out-of-block parents
        self._ctx_sources = []
        self.exact_closure = True
        for k in self.members:
            sources = []
            for parent in model.agents[k].kernel.depends_on:
                if parent in member_pos:
                    sources.append(("block", member_pos[parent]))
                else:
                    if not pin_outside:
                        raise ProductError(
                            f"agent {model.names[k]!r} conditions on "
                            f"{model.names[parent]!r} outside the block"
                        )
                    self.exact_closure = False
                    sources.append(("pin", model.agents[parent].initial))
            self._ctx_sources.append(sources)
        self._succ_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._succ_all_cache: dict[int, np.ndarray] = {}

    def initial_flat(self) -> int:
        return _flatten(
            [self.model.agents[k].initial for k in self.members], self.state_strides
        )

    def decode_state(self, flat: int) -> tuple[int, ...]:
        return _unflatten(flat, self.state_sizes, self.state_strides)

    def decode_action(self, flat: int) -> tuple[int, ...]:
        return _unflatten(flat, self.action_sizes, self.action_strides)

    def successors(self, s_flat: int, a_flat: int):
        """(successor flat states, probabilities) for one block transition."""
        hit = self._succ_cache.get((s_flat, a_flat))
        if hit is not None:
            return hit
        states = self.decode_state(s_flat)
        actions = self.decode_action(a_flat)
        supports = []
        prob_rows = []
        for pos, k in enumerate(self.members):
            ctx = [
                states[src] if where == "block" else src
                for where, src in self._ctx_sources[pos]
            ]
            support, probs = self.model.agents[k].kernel.dist(ctx, actions[pos])
            supports.append(support)
            prob_rows.append(probs)
        n = 1
        for s in supports:
            n *= len(s)
        succ = np.empty(n, dtype=np.int64)
        prob = np.empty(n)
        for idx, combo in enumerate(itertools.product(*(range(len(s)) for s in supports))):
            flat = 0
            p = 1.0
            for pos, j in enumerate(combo):
                flat += int(supports[pos][j]) * self.state_strides[pos]
                p *= prob_rows[pos][j]
            succ[idx] = flat
            prob[idx] = p
        self._succ_cache[(s_flat, a_flat)] = (succ, prob)
        return succ, prob

    def successors_any_action(self, s_flat: int) -> np.ndarray:
        """Union of successor states over every joint action."""
        hit = self._succ_all_cache.get(s_flat)
        if hit is not None:
            return hit
        parts = [self.successors(s_flat, a)[0] for a in range(self.n_actions)]
        out = np.unique(np.concatenate(parts))
        self._succ_all_cache[s_flat] = out
        return out


class ProductModel:
    """One agent's neighborhood block crossed with its specification DFA."""

    def __init__(self, model: FactoredMdp, owner: int, dfa: Dfa,
                 predicates: list[GraphPredicate], cap: int = BLOCK_STATE_CAP):
        self.model = model
        self.owner = owner
        self.dfa = dfa
        self.predicates = tuple(predicates)
        members = model.graph.closed(owner)
        self.dyn = _BlockDynamics(model, members, pin_outside=True)
        self.members = self.dyn.members
        if self.dyn.n_states > cap:
            raise ProductError(
                f"block of agent {model.names[owner]!r} has {self.dyn.n_states} "
                f"joint states, over the {cap} state-space cap"
            )
        self.owner_pos = self.members.index(owner)
        self.exact_closure = self.dyn.exact_closure
        self.letters = self._valuation_table()
        q0 = int(dfa.delta[dfa.initial, self.letters[self.dyn.initial_flat()]])
        self.initial = (self.dyn.initial_flat(), q0)
        # reward context for the owner, read out of block states
        member_pos = {k: p for p, k in enumerate(self.members)}
        self._reward_positions = [
            member_pos[parent] for parent in model.agents[owner].reward.depends_on
        ]

    def _valuation_table(self) -> np.ndarray:
        """letters[s_flat] = alphabet letter of the block state s_flat."""
        table = np.zeros(self.dyn.n_states, dtype=np.int64)
        if not self.predicates:
            return table
        for flat in range(self.dyn.n_states):
            states = self.dyn.decode_state(flat)
            assignment = dict(zip(self.members, states))
            letter = 0
            for j, pred in enumerate(self.predicates):
                if pred.evaluate(self.model, assignment):
                    letter |= 1 << j
            table[flat] = letter
        return table

    def is_accepting(self, q: int) -> bool:
        return q in self.dfa.accepting

    def reward(self, s_flat: int, a_flat: int) -> float:
        """Owner's own reward at a block state under a joint block action."""
        states = self.dyn.decode_state(s_flat)
        ctx = [states[p] for p in self._reward_positions]
        a_own = self.dyn.decode_action(a_flat)[self.owner_pos]
        return self.model.agents[self.owner].reward.value(ctx, a_own)

    def step(self, s_flat: int, q: int, a_flat: int):
        """Successor (state, automaton) pairs with probabilities. Never call
        on an accepting product state: those are absorbing accumulators."""
        if self.is_accepting(q):
            raise ProductError("transitions out of accepting states are undefined")
        succ, prob = self.dyn.successors(s_flat, a_flat)
        q_next = self.dfa.delta[q, self.letters[succ]]
        return succ, q_next, prob

    def build_layers(self, horizon: int):
        """Per-time reachable (state, q) sets for t = 0..horizon.

        Accepting pairs persist from the time they are first reached
        (accumulators). Returns a list of dicts (s_flat, q) -> layer index,
        insertion-ordered deterministically.
        """
        n_q = self.dfa.n_states
        layers: list[dict[tuple[int, int], int]] = []
        current = {self.initial}
        for t in range(horizon + 1):
            ordered = dict((pair, i) for i, pair in enumerate(sorted(current)))
            layers.append(ordered)
            if t == horizon:
                break
            nxt: set[tuple[int, int]] = set()
            for (s_flat, q) in current:
                if self.is_accepting(q):
                    nxt.add((s_flat, q))  # frozen accumulator
                    continue
                succ = self.dyn.successors_any_action(s_flat)
                q_next = self.dfa.delta[q, self.letters[succ]]
                for s2, q2 in zip(succ.tolist(), q_next.tolist()):
                    nxt.add((s2, int(q2)))
            current = nxt
        del n_q
        return layers


def build_product(model: FactoredMdp, owner: int, dfa: Dfa,
                  cap: int = BLOCK_STATE_CAP) -> ProductModel:
    """Build the owner's block × DFA product, checking that every counting
    atom stays inside the owner's closed neighborhood."""
    # re-derive predicates with the containment check; order matches dfa.atoms
    preds = []
    for atom in dfa.atoms:
        got = extract_predicates(atom, owner, model.graph)
        if len(got) != 1:
            raise AutomataError(
                "DFA atom did not round-trip to a single predicate; "
                "was the automaton compiled from this formula?"
            )
        preds.append(got[0])
    return ProductModel(model, owner, dfa, preds, cap=cap)


def trivial_product(model: FactoredMdp, owner: int,
                    cap: int = BLOCK_STATE_CAP) -> ProductModel:
    """Product of an unconstrained agent's block with a one-state automaton
    that never accepts: the block behaves as a plain MDP chain, and no
    threshold can attach to it."""
    from .gtl import FalseF

    return build_product(model, owner, compile_dfa(FalseF()), cap=cap)


# ---------------------------------------------------------------------------
# Exact joint composition (oracle / monolithic path)
# ---------------------------------------------------------------------------


@dataclass
class JointState:
    s_flat: int
    qs: tuple[int, ...]


class JointMdp:
    """The full multi-agent system composed exactly (every agent visible, no
    closure pinning), optionally synchronized with one DFA per constrained
    owner. Guarded by a joint-state cap: this is oracle machinery, not the
    scalable path."""

    def __init__(self, model: FactoredMdp, products: dict[int, ProductModel],
                 cap: int = JOINT_STATE_CAP):
        self.model = model
        self.owners = tuple(sorted(products))
        self.products = {i: products[i] for i in self.owners}
        self.dyn = _BlockDynamics(model, range(model.n_agents), pin_outside=False)
        n_pairs = self.dyn.n_states
        for i in self.owners:
            n_pairs *= self.products[i].dfa.n_states
        if n_pairs > cap:
            raise ProductError(
                f"joint composition needs {self.dyn.n_states} base states and "
                f"{n_pairs} (state, automata) pairs, over the {cap} cap"
            )
        # per-owner valuation tables over *full* joint states
        self.letters: dict[int, np.ndarray] = {}
        for i in self.owners:
            prod_i = self.products[i]
            table = np.zeros(self.dyn.n_states, dtype=np.int64)
            if prod_i.predicates:
                for flat in range(self.dyn.n_states):
                    assignment = dict(enumerate(self.dyn.decode_state(flat)))
                    letter = 0
                    for j, pred in enumerate(prod_i.predicates):
                        if pred.evaluate(model, assignment):
                            letter |= 1 << j
                    table[flat] = letter
            self.letters[i] = table

    @property
    def exact(self) -> bool:
        return True  # full composition: no closure pinning by construction

    def initial(self) -> tuple[int, tuple[int, ...]]:
        s0 = self.dyn.initial_flat()
        qs = tuple(
            int(p.dfa.delta[p.dfa.initial, self.letters[i][s0]])
            for i, p in self.products.items()
        )
        return s0, qs

    def advance_qs(self, qs: tuple[int, ...], s_next: int) -> tuple[int, ...]:
        return tuple(
            int(p.dfa.delta[q, self.letters[i][s_next]])
            for q, (i, p) in zip(qs, self.products.items())
        )

    def accepting_mask(self, qs: tuple[int, ...]) -> tuple[bool, ...]:
        return tuple(
            q in p.dfa.accepting for q, (i, p) in zip(qs, self.products.items())
        )

    def reward_total(self, s_flat: int, a_flat: int) -> float:
        states = self.dyn.decode_state(s_flat)
        actions = self.dyn.decode_action(a_flat)
        total = 0.0
        for i, agent in enumerate(self.model.agents):
            ctx = [states[k] for k in agent.reward.depends_on]
            total += agent.reward.value(ctx, actions[i])
        return total


def compose_joint(model: FactoredMdp, products: dict[int, ProductModel] | None = None,
                  cap: int = JOINT_STATE_CAP) -> JointMdp:
    """Exact joint composition of the whole system with the given per-owner
    specification products attached (possibly none)."""
    return JointMdp(model, products or {}, cap=cap)
