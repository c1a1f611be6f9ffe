"""Formula-progression DFAs over graph-predicate valuations.

A bounded formula is compiled by *progression*: each DFA state is the residual
formula still to be satisfied, and consuming a valuation of the formula's
atomic graph predicates rewrites the residual. Residuals are normalized
(flattened n-ary and/or, constant absorption, deduplication with a stable
order) so the state space stays finite and small. After horizon(f)+1 letters
every residual has collapsed to true or false; the accepting state is the
true-residual. Because every word this toolkit feeds a DFA has that full
length, acceptance-at-horizon decides satisfaction for safe and co-safe
formulas alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gtl import (
    And,
    Eventually,
    Always,
    EdgeProp,
    Exists,
    FalseF,
    Formula,
    LabelProp,
    Next,
    Not,
    Or,
    TrueF,
    ValueProp,
    format_formula,
)

TRUE = TrueF()
FALSE = FalseF()


class AutomataError(ValueError):
    """Raised when a formula leaves the compilable fragment or blows a cap."""


# ---------------------------------------------------------------------------
# Atoms (graph predicates)
# ---------------------------------------------------------------------------


def _is_static(f: Formula) -> bool:
    """Node-local and horizon-0: decidable from one state snapshot."""
    if isinstance(f, (TrueF, FalseF, LabelProp, ValueProp)):
        return True
    if isinstance(f, Not):
        return _is_static(f.sub)
    if isinstance(f, (And, Or)):
        return all(_is_static(g) for g in f.subs)
    return False


def syntactic_atoms(f: Formula) -> tuple[Formula, ...]:
    """Atomic graph predicates of f in first-occurrence order.

    Atoms are label/value propositions and whole counting operators. A
    counting operator whose subformula is temporal or itself counting is
    rejected: it cannot be valued from a single neighborhood snapshot.
    """
    out: list[Formula] = []
    seen: set[Formula] = set()

    def walk(g: Formula) -> None:
        if isinstance(g, (TrueF, FalseF)):
            return
        if isinstance(g, (LabelProp, ValueProp)):
            if g not in seen:
                seen.add(g)
                out.append(g)
            return
        if isinstance(g, Exists):
            if not _is_static(g.sub):
                raise AutomataError(
                    "counting operator over a temporal or nested counting "
                    f"subformula is outside the automaton fragment: "
                    f"{format_formula(g)}"
                )
            if g not in seen:
                seen.add(g)
                out.append(g)
            return
        if isinstance(g, Not):
            walk(g.sub)
        elif isinstance(g, (And, Or)):
            for s in g.subs:
                walk(s)
        elif isinstance(g, (Next, Always, Eventually)):
            walk(g.sub)
        else:
            raise AutomataError(f"unknown formula node {g!r}")

    walk(f)
    return tuple(out)


@dataclass(frozen=True)
class GraphPredicate:
    """One alphabet bit: a node predicate at the owner, or a counting atom
    over the owner's neighborhood. Evaluable from a joint neighborhood state."""

    owner: int
    formula: Formula  # static node formula, or an Exists with static sub

    @property
    def kind(self) -> str:
        return "exists" if isinstance(self.formula, Exists) else "node"

    def evaluate(self, model, assignment) -> bool:
        """Truth under `assignment`: a mapping agent-index -> state-index that
        must cover every agent the predicate touches."""
        f = self.formula
        if not isinstance(f, Exists):
            return _eval_static(f, model.agents[self.owner].states[assignment[self.owner]])
        current = {self.owner}
        for prop in f.chain:
            nxt: set[int] = set()
            for u in current:
                for v in model.graph.neighbors(u):
                    if v not in assignment or u not in assignment:
                        raise AutomataError(
                            "counting chain reaches outside the provided "
                            f"neighborhood assignment (agent {v})"
                        )
                    y = model.edge_label_value(u, v, assignment[u], assignment[v])
                    if prop.holds(y):
                        nxt.add(v)
            current = nxt
            if not current:
                break
        hits = 0
        for u in current:
            if _eval_static(f.sub, model.agents[u].states[assignment[u]]):
                hits += 1
        return hits >= f.count


def _eval_static(f: Formula, statedef) -> bool:
    if isinstance(f, TrueF):
        return True
    if isinstance(f, FalseF):
        return False
    if isinstance(f, LabelProp):
        return f.name in statedef.labels
    if isinstance(f, ValueProp):
        x = statedef.value
        if x is None:
            raise AutomataError(
                f"state {statedef.name!r} has no declared value for {format_formula(f)}"
            )
        if f.op == ">=":
            return x >= f.bound
        if f.op == "<=":
            return x <= f.bound
        return x == f.bound
    if isinstance(f, Not):
        return not _eval_static(f.sub, statedef)
    if isinstance(f, And):
        return all(_eval_static(g, statedef) for g in f.subs)
    if isinstance(f, Or):
        return any(_eval_static(g, statedef) for g in f.subs)
    raise AutomataError(f"non-static formula {format_formula(f)} inside an atom")


def extract_predicates(f: Formula, owner: int, graph) -> list[GraphPredicate]:
    """Ordered, duplicate-free predicate list for f at `owner`, with the
    containment check: every counting chain must stay inside N(owner)."""
    preds = []
    members = set(graph.closed(owner))
    for atom in syntactic_atoms(f):
        if isinstance(atom, Exists):
            current = {owner}
            touched = set(current)
            for _ in atom.chain:
                current = {v for u in current for v in graph.neighbors(u)}
                touched |= current
            if not touched <= members:
                escaped = sorted(touched - members)
                raise AutomataError(
                    f"counting chain of {format_formula(atom)} escapes the "
                    f"closed neighborhood of agent {owner} (reaches {escaped})"
                )
        preds.append(GraphPredicate(owner, atom))
    return preds


def touched_agents(f: Formula, owner: int, graph) -> tuple[int, ...]:
    """Every agent any of f's counting chains can reach from `owner`, owner
    included — the syntactic over-approximation that ignores edge predicates,
    so any state assignment covering this set decides every atom of f."""
    touched = {owner}
    for atom in syntactic_atoms(f):
        if isinstance(atom, Exists):
            current = {owner}
            for _ in atom.chain:
                current = {v for u in current for v in graph.neighbors(u)}
                touched |= current
    return tuple(sorted(touched))


# ---------------------------------------------------------------------------
# Progression
# ---------------------------------------------------------------------------

_fmt_cache: dict[Formula, str] = {}


def _key(f: Formula) -> str:
    s = _fmt_cache.get(f)
    if s is None:
        s = format_formula(f)
        _fmt_cache[f] = s
    return s


def _not(f: Formula) -> Formula:
    if isinstance(f, TrueF):
        return FALSE
    if isinstance(f, FalseF):
        return TRUE
    if isinstance(f, Not):
        return f.sub
    return Not(f)


def _and(subs) -> Formula:
    flat: list[Formula] = []
    seen = set()
    for g in subs:
        if isinstance(g, FalseF):
            return FALSE
        if isinstance(g, TrueF):
            continue
        parts = g.subs if isinstance(g, And) else (g,)
        for p in parts:
            if p not in seen:
                seen.add(p)
                flat.append(p)
    if not flat:
        return TRUE
    if len(flat) == 1:
        return flat[0]
    return And(tuple(sorted(flat, key=_key)))


def _or(subs) -> Formula:
    flat: list[Formula] = []
    seen = set()
    for g in subs:
        if isinstance(g, TrueF):
            return TRUE
        if isinstance(g, FalseF):
            continue
        parts = g.subs if isinstance(g, Or) else (g,)
        for p in parts:
            if p not in seen:
                seen.add(p)
                flat.append(p)
    if not flat:
        return FALSE
    if len(flat) == 1:
        return flat[0]
    return Or(tuple(sorted(flat, key=_key)))


def progress(f: Formula, valuation) -> Formula:
    """One progression step: the residual after observing `valuation`,
    a mapping atom-formula -> bool."""
    if isinstance(f, (TrueF, FalseF)):
        return f
    if isinstance(f, (LabelProp, ValueProp, Exists)):
        return TRUE if valuation[f] else FALSE
    if isinstance(f, Not):
        return _not(progress(f.sub, valuation))
    if isinstance(f, And):
        return _and(progress(g, valuation) for g in f.subs)
    if isinstance(f, Or):
        return _or(progress(g, valuation) for g in f.subs)
    if isinstance(f, Next):
        return f.sub
    if isinstance(f, Eventually):
        if f.lo > 0:
            return Eventually(f.lo - 1, f.hi - 1, f.sub)
        now = progress(f.sub, valuation)
        if f.hi == 0:
            return now
        return _or((now, Eventually(0, f.hi - 1, f.sub)))
    if isinstance(f, Always):
        if f.lo > 0:
            return Always(f.lo - 1, f.hi - 1, f.sub)
        now = progress(f.sub, valuation)
        if f.hi == 0:
            return now
        return _and((now, Always(0, f.hi - 1, f.sub)))
    raise AutomataError(f"unknown formula node {f!r}")


# ---------------------------------------------------------------------------
# DFA
# ---------------------------------------------------------------------------

MAX_ATOMS = 16


@dataclass
class Dfa:
    """Deterministic automaton over valuations of `atoms`.

    Letters are integers whose bit j is the truth of atoms[j]. States are the
    residual formulas; state 0 is the initial residual (the formula itself).
    """

    atoms: tuple[Formula, ...]
    states: list[Formula]
    delta: np.ndarray  # (|Q|, 2^k) int32
    initial: int
    accepting: frozenset[int]

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_letters(self) -> int:
        return self.delta.shape[1]

    def letter_index(self, bits) -> int:
        letter = 0
        for j, b in enumerate(bits):
            if b:
                letter |= 1 << j
        return letter

    def step(self, q: int, letter: int) -> int:
        return int(self.delta[q, letter])

    def accepts_word(self, letters) -> bool:
        """Run the full word (length horizon+1) and test acceptance."""
        q = self.initial
        for letter in letters:
            q = int(self.delta[q, letter])
        return q in self.accepting

    def format_table(self) -> str:
        lines = [f"atoms ({len(self.atoms)}):"]
        for j, a in enumerate(self.atoms):
            lines.append(f"  bit {j}: {format_formula(a)}")
        lines.append(f"states ({self.n_states}):")
        for qid, residual in enumerate(self.states):
            tag = " (accepting)" if qid in self.accepting else ""
            init = " (initial)" if qid == self.initial else ""
            lines.append(f"  q{qid}{init}{tag}: {format_formula(residual)}")
        lines.append("transitions:")
        k = len(self.atoms)
        for qid in range(self.n_states):
            for letter in range(self.n_letters):
                bits = "".join("1" if letter >> j & 1 else "0" for j in range(k))
                lines.append(f"  q{qid} --{bits or 'e'}--> q{int(self.delta[qid, letter])}")
        return "\n".join(lines)


def compile_dfa(f: Formula, cap: int = 100_000) -> Dfa:
    """Compile a bounded formula to its progression DFA.

    Raises AutomataError if the formula has more than MAX_ATOMS atomic
    predicates or more than `cap` reachable residuals.
    """
    atoms = syntactic_atoms(f)
    if len(atoms) > MAX_ATOMS:
        raise AutomataError(
            f"formula has {len(atoms)} atomic predicates; alphabet 2^k is "
            f"capped at k={MAX_ATOMS}"
        )
    n_letters = 1 << len(atoms)
    state_ids: dict[Formula, int] = {f: 0}
    states: list[Formula] = [f]
    rows: list[np.ndarray] = []
    frontier = [f]
    while frontier:
        nxt_frontier = []
        for q in frontier:
            row = np.empty(n_letters, dtype=np.int32)
            for letter in range(n_letters):
                valuation = {a: bool(letter >> j & 1) for j, a in enumerate(atoms)}
                residual = progress(q, valuation)
                qid = state_ids.get(residual)
                if qid is None:
                    qid = len(states)
                    if qid >= cap:
                        raise AutomataError(
                            f"automaton exceeded the {cap}-state cap while "
                            f"compiling {format_formula(f)[:80]}"
                        )
                    state_ids[residual] = qid
                    states.append(residual)
                    nxt_frontier.append(residual)
                row[letter] = qid
            rows.append(row)
        frontier = nxt_frontier
    delta = np.vstack(rows) if rows else np.zeros((1, n_letters), dtype=np.int32)
    accepting = frozenset(qid for qid, g in enumerate(states) if isinstance(g, TrueF))
    return Dfa(atoms=atoms, states=states, delta=delta, initial=0, accepting=accepting)
