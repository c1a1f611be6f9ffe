"""Factored MDP model: per-agent kernels over neighborhood context, rewards,
state labels/values/coordinates, edge-label functions, and the JSON schema.

Each agent has its own finite state and action sets. Its transition kernel
conditions on the states of a ``depends_on`` subset of its closed graph
neighborhood (plus its own action only); the joint process is the product of
the per-agent kernels, i.e. a dynamic Bayesian network. An agent whose
``depends_on`` is just itself has a *local-form* kernel; otherwise the kernel
is *neighborhood-form*.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import AgentGraph

_RESERVED_LABELS = {"G", "F", "X", "E", "O", "label", "true", "false", "x", "y"}

STOCHASTIC_TOL = 1e-9


class ModelError(ValueError):
    """Raised when a model document or in-memory model is invalid."""


@dataclass(frozen=True)
class StateDef:
    name: str
    value: float | None = None
    coords: tuple[float, ...] | None = None
    labels: frozenset[str] = frozenset()


def _strides(sizes) -> tuple[int, ...]:
    strides = []
    acc = 1
    for size in reversed(sizes):
        strides.append(acc)
        acc *= size
    return tuple(reversed(strides))


class KernelTable:
    """Dense per-agent kernel P[ctx, a, s'] with ctx ranging over the states
    of the ``depends_on`` agents in index order (row-major)."""

    def __init__(self, depends_on, ctx_sizes, n_actions, n_states):
        self.depends_on = tuple(depends_on)
        self.ctx_sizes = tuple(ctx_sizes)
        self.strides = _strides(self.ctx_sizes)
        self.n_ctx = int(np.prod(self.ctx_sizes)) if self.ctx_sizes else 1
        self.probs = np.zeros((self.n_ctx, n_actions, n_states))

    def ctx_index(self, ctx_states) -> int:
        """Flat context index from per-depends_on state indices (in order)."""
        return int(sum(s * st for s, st in zip(ctx_states, self.strides)))

    def dist(self, ctx_states, action: int):
        """Support and probabilities of the successor distribution."""
        row = self.probs[self.ctx_index(ctx_states), action]
        support = np.nonzero(row)[0]
        return support, row[support]

    def row(self, ctx_flat: int, action: int) -> np.ndarray:
        return self.probs[ctx_flat, action]


class RewardTable:
    """Per-agent reward R[ctx, a] >= 0 with the same context layout as the kernel."""

    def __init__(self, depends_on, ctx_sizes, n_actions):
        self.depends_on = tuple(depends_on)
        self.ctx_sizes = tuple(ctx_sizes)
        self.strides = _strides(self.ctx_sizes)
        self.n_ctx = int(np.prod(self.ctx_sizes)) if self.ctx_sizes else 1
        self.values = np.zeros((self.n_ctx, n_actions))

    def ctx_index(self, ctx_states) -> int:
        return int(sum(s * st for s, st in zip(ctx_states, self.strides)))

    def value(self, ctx_states, action: int) -> float:
        return float(self.values[self.ctx_index(ctx_states), action])


@dataclass
class AgentDef:
    name: str
    states: list[StateDef]
    actions: list[str]
    initial: int
    depends_on: tuple[int, ...]  # agent indices, sorted, contains self
    kernel: KernelTable
    reward: RewardTable

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def state_index(self, name: str) -> int:
        for k, s in enumerate(self.states):
            if s.name == name:
                return k
        raise ModelError(f"agent {self.name!r} has no state {name!r}")


@dataclass
class EdgeLabelSpec:
    """How the numeric label of an edge is computed from its endpoint states.

    kind 'manhattan-distance' uses state coordinates, 'constant' a fixed
    value, and 'table' an explicit (u, v, s_u, s_v) -> value map keyed with
    u < v.
    """

    kind: str
    value: float = 0.0
    table: dict = field(default_factory=dict)


class FactoredMdp:
    def __init__(self, graph: AgentGraph, agents: list[AgentDef],
                 edge_label: EdgeLabelSpec):
        self.graph = graph
        self.agents = agents
        self.edge_label = edge_label
        self.names = [a.name for a in agents]
        self.name_to_idx = {a.name: i for i, a in enumerate(agents)}

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def initial_states(self) -> tuple[int, ...]:
        return tuple(a.initial for a in self.agents)

    def form(self, i: int) -> str:
        """'local' if agent i's kernel conditions only on itself."""
        return "local" if self.agents[i].depends_on == (i,) else "neighborhood"

    def edge_label_value(self, u: int, v: int, su: int, sv: int) -> float:
        """Numeric label of edge {u,v} when u is in state su and v in sv."""
        if u > v:
            u, v, su, sv = v, u, sv, su
        spec = self.edge_label
        if spec.kind == "constant":
            return spec.value
        if spec.kind == "manhattan-distance":
            cu = self.agents[u].states[su].coords
            cv = self.agents[v].states[sv].coords
            if cu is None or cv is None:
                raise ModelError(
                    f"edge ({self.names[u]},{self.names[v]}): state without "
                    "coordinates under manhattan-distance labels"
                )
            return float(sum(abs(a - b) for a, b in zip(cu, cv)))
        try:
            return spec.table[(u, v, su, sv)]
        except KeyError:
            raise ModelError(
                f"edge-label table has no entry for ({self.names[u]},"
                f"{self.names[v]}) states ({su},{sv})"
            ) from None

    def trajectory(self, states) -> "GraphTrajectory":
        return GraphTrajectory(self, np.asarray(states, dtype=np.int64))


class GraphTrajectory:
    """A finite run: per-agent state indices for t = 0..T, with label/value
    and edge-label lookups delegated to the model's state tables."""

    def __init__(self, model: FactoredMdp, states: np.ndarray):
        states = np.asarray(states, dtype=np.int64)
        if states.ndim != 2 or states.shape[1] != model.n_agents:
            raise ModelError(
                f"trajectory must be (T+1, {model.n_agents}), got {states.shape}"
            )
        self.model = model
        self.states = states
        self.graph = model.graph

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def state(self, v: int, t: int) -> int:
        return int(self.states[t, v])

    def labels(self, v: int, t: int) -> frozenset[str]:
        return self.model.agents[v].states[self.states[t, v]].labels

    def value(self, v: int, t: int):
        return self.model.agents[v].states[self.states[t, v]].value

    def edge_label(self, u: int, v: int, t: int) -> float:
        return self.model.edge_label_value(
            u, v, int(self.states[t, u]), int(self.states[t, v])
        )


# ---------------------------------------------------------------------------
# Sub-models
# ---------------------------------------------------------------------------


def dependency_closure(model: FactoredMdp, seeds) -> tuple[int, ...]:
    """Smallest agent set containing `seeds` whose members' kernels and
    rewards condition on members alone. On local-form models this is just
    the seed set; on neighborhood-form models it can grow along dependency
    edges up to a whole connected component."""
    closed = {int(i) for i in seeds}
    frontier = list(closed)
    while frontier:
        agent = model.agents[frontier.pop()]
        for dep in (*agent.kernel.depends_on, *agent.reward.depends_on):
            if dep not in closed:
                closed.add(dep)
                frontier.append(dep)
    return tuple(sorted(closed))


def restrict_to_members(model: FactoredMdp,
                        members) -> tuple[FactoredMdp, dict[int, int]]:
    """Sub-model over `members`, renumbered in sorted order; also returns the
    old-index -> new-index map.

    `members` must be dependency-closed (see :func:`dependency_closure`) —
    every member's kernel and reward condition on members alone — so that
    under any per-member local policies the sub-model's closed-loop law is
    exactly the members' marginal law in the full model: non-members never
    enter a member's transition. State definitions (labels, values,
    coordinates), initial states, induced graph edges, and the edge-label
    rule all carry over, so graph predicates whose counting chains stay
    inside `members` evaluate identically. Kernel and reward arrays are
    shared with the original model, not copied.
    """
    members = tuple(sorted({int(i) for i in members}))
    remap = {k: pos for pos, k in enumerate(members)}
    sub_agents = []
    for k in members:
        a = model.agents[k]
        outside = sorted(
            (set(a.kernel.depends_on) | set(a.reward.depends_on)) - remap.keys()
        )
        if outside:
            raise ModelError(
                f"agent {a.name!r} conditions on non-members "
                f"{[model.names[d] for d in outside]}; restricting would "
                "change its law (take the dependency_closure first)"
            )
        kernel = KernelTable(
            tuple(remap[d] for d in a.kernel.depends_on),
            a.kernel.ctx_sizes, a.n_actions, a.n_states,
        )
        kernel.probs = a.kernel.probs
        reward = RewardTable(
            tuple(remap[d] for d in a.reward.depends_on),
            a.reward.ctx_sizes, a.n_actions,
        )
        reward.values = a.reward.values
        sub_agents.append(
            AgentDef(
                name=a.name,
                states=a.states,
                actions=a.actions,
                initial=a.initial,
                depends_on=tuple(remap[d] for d in a.depends_on),
                kernel=kernel,
                reward=reward,
            )
        )
    graph = AgentGraph(
        len(members),
        [(remap[u], remap[v]) for u, v in model.graph.edges
         if u in remap and v in remap],
    )
    spec = model.edge_label
    if spec.kind == "table":
        spec = EdgeLabelSpec(
            "table",
            table={
                (remap[u], remap[v], su, sv): val
                for (u, v, su, sv), val in spec.table.items()
                if u in remap and v in remap
            },
        )
    return FactoredMdp(graph, sub_agents, spec), remap


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------


def build_model(document) -> FactoredMdp:
    """Build and validate a FactoredMdp from a schema document.

    Accepts a JSON string or an already-parsed dict. Raises ModelError listing
    every detected issue when the document is invalid.
    """
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as e:
            raise ModelError(f"document is not valid JSON: {e}") from None
    else:
        doc = document
    model = _model_from_dict(doc)
    issues = validate(model)
    if issues:
        raise ModelError("invalid model:\n  " + "\n  ".join(issues))
    return model


def _model_from_dict(doc: dict) -> FactoredMdp:
    if not isinstance(doc, dict) or "agents" not in doc:
        raise ModelError("document must be an object with an 'agents' list")
    agent_docs = doc["agents"]
    names = []
    for i, adoc in enumerate(agent_docs):
        name = adoc.get("name")
        if not name:
            raise ModelError(f"agent #{i} has no name")
        names.append(name)
    if len(set(names)) != len(names):
        raise ModelError("duplicate agent names")
    name_to_idx = {n: i for i, n in enumerate(names)}

    edges = []
    for e in doc.get("edges", []):
        try:
            edges.append((name_to_idx[e[0]], name_to_idx[e[1]]))
        except KeyError as k:
            raise ModelError(f"edge references unknown agent {k}") from None
    graph = AgentGraph(len(agent_docs), edges)

    # pass 1: states / actions / initial / depends_on for every agent
    agents: list[AgentDef] = []
    for i, adoc in enumerate(agent_docs):
        states = []
        for sdoc in adoc.get("states", []):
            coords = sdoc.get("coords")
            states.append(
                StateDef(
                    name=sdoc["name"],
                    value=None if sdoc.get("value") is None else float(sdoc["value"]),
                    coords=None if coords is None else tuple(float(c) for c in coords),
                    labels=frozenset(sdoc.get("labels", [])),
                )
            )
        if not states:
            raise ModelError(f"agent {names[i]!r} has no states")
        if len({s.name for s in states}) != len(states):
            raise ModelError(f"agent {names[i]!r} has duplicate state names")
        actions = list(adoc.get("actions", []))
        if not actions:
            raise ModelError(f"agent {names[i]!r} has no actions")
        state_idx = {s.name: k for k, s in enumerate(states)}
        initial = adoc.get("initial")
        if initial not in state_idx:
            raise ModelError(f"agent {names[i]!r}: unknown initial state {initial!r}")
        deps_names = adoc.get("depends_on", [names[i]])
        try:
            deps = tuple(sorted(name_to_idx[d] for d in deps_names))
        except KeyError as k:
            raise ModelError(
                f"agent {names[i]!r}: depends_on references unknown agent {k}"
            ) from None
        if len(set(deps)) != len(deps):
            raise ModelError(f"agent {names[i]!r}: duplicate entries in depends_on")
        agents.append(
            AgentDef(
                name=names[i], states=states, actions=actions,
                initial=state_idx[initial], depends_on=deps,
                kernel=None, reward=None,  # filled in pass 2
            )
        )

    # pass 2: kernel and reward tables (needs all agents' state counts)
    for i, (agent, adoc) in enumerate(zip(agents, agent_docs)):
        ctx_sizes = tuple(agents[k].n_states for k in agent.depends_on)
        kernel = KernelTable(agent.depends_on, ctx_sizes, agent.n_actions, agent.n_states)
        seen = set()
        for ent in adoc.get("kernel", []):
            ctx, a = _entry_ctx_action(ent, agent, agents, names, kernel, "kernel")
            nxt = agent.state_index(ent["next"])
            if (ctx, a, nxt) in seen:
                raise ModelError(
                    f"agent {agent.name!r}: duplicate kernel entry for "
                    f"condition={ent.get('condition')} action={ent.get('action')!r} "
                    f"next={ent.get('next')!r}"
                )
            seen.add((ctx, a, nxt))
            p = float(ent["prob"])
            if not (0.0 <= p <= 1.0):
                raise ModelError(f"agent {agent.name!r}: probability {p} outside [0,1]")
            kernel.probs[ctx, a, nxt] = p
        agent.kernel = kernel

        reward = RewardTable(agent.depends_on, ctx_sizes, agent.n_actions)
        seen_r = set()
        for ent in adoc.get("reward", []):
            ctx, a = _entry_ctx_action(ent, agent, agents, names, reward, "reward")
            if (ctx, a) in seen_r:
                raise ModelError(
                    f"agent {agent.name!r}: duplicate reward entry for "
                    f"condition={ent.get('condition')} action={ent.get('action')!r}"
                )
            seen_r.add((ctx, a))
            reward.values[ctx, a] = float(ent["value"])
        agent.reward = reward

    el_doc = doc.get("edge_label", {"kind": "constant", "value": 1.0})
    kind = el_doc.get("kind")
    if kind == "constant":
        spec = EdgeLabelSpec("constant", value=float(el_doc.get("value", 1.0)))
    elif kind == "manhattan-distance":
        spec = EdgeLabelSpec("manhattan-distance")
    elif kind == "table":
        table = {}
        for ent in el_doc.get("entries", []):
            try:
                u = name_to_idx[ent["edge"][0]]
                v = name_to_idx[ent["edge"][1]]
            except KeyError as k:
                raise ModelError(
                    f"edge-label entry references unknown agent {k}"
                ) from None
            su = agents[u].state_index(ent["su"])
            sv = agents[v].state_index(ent["sv"])
            if u > v:
                u, v, su, sv = v, u, sv, su
            table[(u, v, su, sv)] = float(ent["value"])
        spec = EdgeLabelSpec("table", table=table)
    else:
        raise ModelError(f"unknown edge_label kind {kind!r}")

    return FactoredMdp(graph, agents, spec)


def _entry_ctx_action(ent, agent, agents, names, table, what):
    """Resolve one kernel/reward entry's condition and action to indices."""
    dep_names = [names[k] for k in agent.depends_on]
    cond = ent.get("condition", {})
    if set(cond) != set(dep_names):
        raise ModelError(
            f"agent {agent.name!r}: {what} condition must name exactly "
            f"{dep_names}, got {sorted(cond)}"
        )
    ctx_states = [agents[k].state_index(cond[names[k]]) for k in agent.depends_on]
    try:
        a = agent.actions.index(ent["action"])
    except ValueError:
        raise ModelError(
            f"agent {agent.name!r}: unknown action {ent.get('action')!r} in {what}"
        ) from None
    return table.ctx_index(ctx_states), a


def validate(model: FactoredMdp) -> list[str]:
    """Structural and stochasticity checks; returns a list of issue strings."""
    issues: list[str] = []
    for i, agent in enumerate(model.agents):
        closed = set(model.graph.closed(i))
        if i not in agent.depends_on:
            issues.append(f"agent {agent.name!r}: depends_on must include the agent itself")
        if not set(agent.depends_on) <= closed:
            bad = [model.names[k] for k in set(agent.depends_on) - closed]
            issues.append(
                f"agent {agent.name!r}: depends_on reaches outside the closed "
                f"neighborhood: {bad}"
            )
        for s in agent.states:
            bad_labels = s.labels & _RESERVED_LABELS
            if bad_labels:
                issues.append(
                    f"agent {agent.name!r} state {s.name!r}: reserved label "
                    f"names {sorted(bad_labels)}"
                )
        sums = agent.kernel.probs.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        for ctx, a in bad[:5]:
            issues.append(
                f"agent {agent.name!r}: kernel row (ctx={ctx}, action="
                f"{agent.actions[a]!r}) sums to {sums[ctx, a]:.12f}, not 1"
            )
        if len(bad) > 5:
            issues.append(
                f"agent {agent.name!r}: ... and {len(bad) - 5} more non-stochastic rows"
            )
        if (agent.reward.values < 0).any():
            issues.append(f"agent {agent.name!r}: negative reward entries")
        if not np.isfinite(agent.kernel.probs).all():
            issues.append(f"agent {agent.name!r}: non-finite kernel probabilities")
        if not np.isfinite(agent.reward.values).all():
            issues.append(f"agent {agent.name!r}: non-finite rewards")
    if model.edge_label.kind == "manhattan-distance":
        for u, v in model.graph.edges:
            for j in (u, v):
                dims = {
                    None if s.coords is None else len(s.coords)
                    for s in model.agents[j].states
                }
                if None in dims or len(dims) != 1:
                    issues.append(
                        f"agent {model.names[j]!r}: every state needs coords of "
                        "one common dimension under manhattan-distance edge labels"
                    )
                    break
    elif model.edge_label.kind == "table":
        for u, v in model.graph.edges:
            for su in range(model.agents[u].n_states):
                for sv in range(model.agents[v].n_states):
                    if (u, v, su, sv) not in model.edge_label.table:
                        issues.append(
                            f"edge ({model.names[u]},{model.names[v]}): label table "
                            f"missing state pair ({su},{sv})"
                        )
    return issues


def model_to_dict(model: FactoredMdp) -> dict:
    """Canonical schema dict (deterministic entry order)."""
    agents = []
    for agent in model.agents:
        states = []
        for s in agent.states:
            sdoc: dict = {"name": s.name}
            if s.value is not None:
                sdoc["value"] = s.value
            if s.coords is not None:
                sdoc["coords"] = list(s.coords)
            if s.labels:
                sdoc["labels"] = sorted(s.labels)
            states.append(sdoc)
        kernel_entries = []
        K = agent.kernel
        for ctx in range(K.n_ctx):
            cond = _ctx_to_condition(model, agent, ctx)
            for a, act in enumerate(agent.actions):
                for nxt in np.nonzero(K.probs[ctx, a])[0]:
                    kernel_entries.append(
                        {
                            "condition": cond,
                            "action": act,
                            "next": agent.states[int(nxt)].name,
                            "prob": float(K.probs[ctx, a, nxt]),
                        }
                    )
        reward_entries = []
        R = agent.reward
        for ctx in range(R.n_ctx):
            cond = _ctx_to_condition(model, agent, ctx)
            for a, act in enumerate(agent.actions):
                if R.values[ctx, a] != 0.0:
                    reward_entries.append(
                        {
                            "condition": cond,
                            "action": act,
                            "value": float(R.values[ctx, a]),
                        }
                    )
        agents.append(
            {
                "name": agent.name,
                "states": states,
                "actions": list(agent.actions),
                "initial": agent.states[agent.initial].name,
                "depends_on": [model.names[k] for k in agent.depends_on],
                "kernel": kernel_entries,
                "reward": reward_entries,
            }
        )
    doc: dict = {
        "agents": agents,
        "edges": [[model.names[u], model.names[v]] for u, v in model.graph.edges],
    }
    el = model.edge_label
    if el.kind == "constant":
        doc["edge_label"] = {"kind": "constant", "value": el.value}
    elif el.kind == "manhattan-distance":
        doc["edge_label"] = {"kind": "manhattan-distance"}
    else:
        entries = [
            {
                "edge": [model.names[u], model.names[v]],
                "su": model.agents[u].states[su].name,
                "sv": model.agents[v].states[sv].name,
                "value": val,
            }
            for (u, v, su, sv), val in sorted(el.table.items())
        ]
        doc["edge_label"] = {"kind": "table", "entries": entries}
    return doc


def _ctx_to_condition(model, agent, ctx_flat: int) -> dict:
    cond = {}
    rem = ctx_flat
    for k, stride in zip(agent.depends_on, agent.kernel.strides):
        s = rem // stride
        rem = rem % stride
        cond[model.names[k]] = model.agents[k].states[int(s)].name
    return cond


def model_to_json(model: FactoredMdp) -> str:
    """Byte-stable JSON export: same model -> identical text."""
    return json.dumps(model_to_dict(model), sort_keys=True, indent=2) + "\n"
