"""Benchmark scenario generators: crop-field disease control, urban patrol
assignment, and a multi-robot search-and-rescue drill.

Each generator builds a :class:`~gtlsynth.model.FactoredMdp` together with the
per-agent GTL obligations that the synthesis pipeline should enforce, from a
single :class:`ScenarioConfig`. Generation is deterministic: the same config
(seed included) produces byte-identical ``model_to_json`` output, so a run can
be reproduced from its manifest alone.

The three families stress different parts of the pipeline:

* ``crop`` — fields on a torus, neighborhood-form kernels (infection pressure
  from adjacent fields), tunable dynamics, and a safety obligation against
  sustained infection. Scales from 4 to hundreds of fields.
* ``urban`` — patrol officers on overlapping 3x3 windows of a fixed 5x7
  intersection map with empirical incident counts as rewards; a recurring
  coverage deadline on three marked intersections. Local-form kernels.
* ``rescue`` — robots shuttling between colored staging areas with
  distance-labeled coordination edges and an each-agent obligation that
  enough neighbors stand by in green and blue areas whenever the robot
  works a red one. The neighboring formulation is expected to exhaust the
  variable cap here; the local one is sized to stay inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .graph import AgentGraph
from .gtl import Formula, parse_gtl
from .model import (
    AgentDef,
    EdgeLabelSpec,
    FactoredMdp,
    KernelTable,
    RewardTable,
    StateDef,
    validate,
)

__all__ = [
    "ScenarioError",
    "ScenarioConfig",
    "resolve_config",
    "generate",
    "gen_crop",
    "gen_urban",
    "gen_rescue",
    "crop_escalation",
    "URBAN_CRIME_COUNTS",
    "URBAN_CRITICAL",
    "RESCUE_AREAS",
]


class ScenarioError(ValueError):
    """Raised for configs that cannot be realized as a scenario."""


KINDS = ("crop", "urban", "rescue")

# Per-kind defaults for the fields left as None in ScenarioConfig.
_KIND_DEFAULTS = {
    "crop": dict(n_agents=100, window=30, threshold=0.9, constrained_fraction=0.5),
    "urban": dict(n_agents=15, window=20, threshold=0.9, constrained_fraction=1.0),
    "rescue": dict(n_agents=50, window=20, threshold=0.95, constrained_fraction=1.0),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a generator needs, in one reproducible record.

    Fields left as ``None`` take kind-specific defaults (see
    :func:`resolve_config`). ``epsilon``, ``infect``, ``recover`` and
    ``top_reward`` only drive the crop dynamics; the other kinds carry fixed
    fixture dynamics. ``threshold`` is not used during generation — it rides
    along so manifests capture the synthesis target next to the scenario.
    """

    kind: str
    n_agents: int | None = None
    window: int | None = None
    epsilon: float = 0.05
    infect: float = 0.1
    recover: float = 0.1
    top_reward: float = 10.0
    threshold: float | None = None
    constrained_fraction: float | None = None
    initial_infected: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        for name in ("epsilon", "infect", "recover"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ScenarioError(f"{name} must lie in [0,1], got {v}")
        for name in ("threshold", "constrained_fraction"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ScenarioError(f"{name} must lie in [0,1], got {v}")
        if self.n_agents is not None and self.n_agents < 1:
            raise ScenarioError("n_agents must be at least 1")
        if self.window is not None and self.window < 0:
            raise ScenarioError("window must not be negative")
        if self.top_reward <= 0:
            raise ScenarioError("top_reward must be positive")
        if self.seed < 0:
            raise ScenarioError("seed must not be negative")
        object.__setattr__(
            self, "initial_infected", tuple(int(k) for k in self.initial_infected)
        )


def resolve_config(config: ScenarioConfig) -> ScenarioConfig:
    """Fill the None fields with the kind's defaults; idempotent."""
    fills = {
        k: v
        for k, v in _KIND_DEFAULTS[config.kind].items()
        if getattr(config, k) is None
    }
    return replace(config, **fills) if fills else config


def generate(config: ScenarioConfig) -> tuple[FactoredMdp, dict[int, Formula]]:
    """Dispatch on ``config.kind``."""
    return {"crop": gen_crop, "urban": gen_urban, "rescue": gen_rescue}[config.kind](
        config
    )


def _finish(model: FactoredMdp) -> FactoredMdp:
    issues = validate(model)
    if issues:  # a generator bug, not a user error — but surface it readably
        raise ScenarioError("generated model failed validation: " + "; ".join(issues))
    return model


def _constrained_subset(rng: np.random.Generator, n: int, fraction: float) -> list[int]:
    count = int(round(fraction * n))
    if count >= n:
        return list(range(n))
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


# ---------------------------------------------------------------------------
# Crop fields
# ---------------------------------------------------------------------------

def crop_escalation(epsilon: float, p: float, n_infected: int) -> float:
    """Chance that a cultivated field's infection worsens one level, given
    ``n_infected`` infected neighbors: spontaneous floor plus independent
    per-neighbor pressure."""
    return epsilon + (1.0 - epsilon) * (1.0 - (1.0 - p) ** n_infected)


def _torus_dims(n: int) -> tuple[int, int]:
    r = math.isqrt(n)
    while r >= 2 and n % r:
        r -= 1
    if n < 4 or r < 2:
        raise ScenarioError(
            f"cannot lay out {n} fields on a torus grid: need a composite "
            "count R*C with both sides at least 2"
        )
    return r, n // r


def gen_crop(config: ScenarioConfig) -> tuple[FactoredMdp, dict[int, Formula]]:
    """Disease management across a torus of crop fields.

    Each field is healthy (``s1``), infected (``s2``), or badly infected
    (``s3``); the latter two carry the ``d`` label. Cultivating escalates the
    infection one level with probability ``crop_escalation(epsilon, infect,
    n)`` where ``n`` counts infected fields among the torus neighbors, and a
    badly infected field stays that way. Leaving a field fallow ignores the
    neighbors and resets it to healthy with probability ``recover``.
    Cultivation yields ``top_reward`` down to ``1 + top_reward/10`` linearly
    in the infection level; fallow fields yield 1.

    A seeded fraction of the fields must each satisfy

        ``G[0,W]( !(F G<=2 d) & !(F G<=3 E^2 d) )``

    — never three consecutive infected steps, and never four consecutive
    steps with two or more infected neighbors.
    """
    cfg = resolve_config(config)
    if cfg.kind != "crop":
        raise ScenarioError(f"gen_crop got kind {cfg.kind!r}")
    n_fields = cfg.n_agents
    rows, cols = _torus_dims(n_fields)
    bad = [k for k in cfg.initial_infected if not 0 <= k < n_fields]
    if bad:
        raise ScenarioError(f"initial_infected indices out of range: {bad}")

    def idx(r: int, c: int) -> int:
        return (r % rows) * cols + (c % cols)

    edges = set()
    for r in range(rows):
        for c in range(cols):
            me = idx(r, c)
            for other in (idx(r - 1, c), idx(r + 1, c), idx(r, c - 1), idx(r, c + 1)):
                if other != me:
                    edges.add((min(me, other), max(me, other)))
    graph = AgentGraph(n_fields, edges)

    states = [
        StateDef("s1", value=1.0),
        StateDef("s2", value=2.0, labels=frozenset({"d"})),
        StateDef("s3", value=3.0, labels=frozenset({"d"})),
    ]
    actions = ["cultivate", "fallow"]
    low = 1.0 + cfg.top_reward / 10.0
    yields = (cfg.top_reward, (cfg.top_reward + low) / 2.0, low)

    infected_start = set(cfg.initial_infected)
    agents = []
    for i in range(n_fields):
        deps = tuple(sorted({i, *graph.neighbors(i)}))
        own = deps.index(i)
        kernel = KernelTable(deps, (3,) * len(deps), 2, 3)
        for ctx in np.ndindex(*kernel.ctx_sizes):
            flat = kernel.ctx_index(ctx)
            s = ctx[own]
            n_inf = sum(1 for k, v in enumerate(ctx) if k != own and v >= 1)
            esc = crop_escalation(cfg.epsilon, cfg.infect, n_inf)
            if s == 2:
                kernel.probs[flat, 0, 2] = 1.0
            else:
                kernel.probs[flat, 0, s + 1] = esc
                kernel.probs[flat, 0, s] = 1.0 - esc
            kernel.probs[flat, 1, 0] += cfg.recover
            kernel.probs[flat, 1, s] += 1.0 - cfg.recover
        reward = RewardTable((i,), (3,), 2)
        for s in range(3):
            reward.values[s, 0] = yields[s]
            reward.values[s, 1] = 1.0
        agents.append(
            AgentDef(
                name=f"field_{i}",
                states=states,
                actions=actions,
                initial=1 if i in infected_start else 0,
                depends_on=deps,
                kernel=kernel,
                reward=reward,
            )
        )

    model = _finish(FactoredMdp(graph, agents, EdgeLabelSpec("constant", 1.0)))
    rng = np.random.default_rng(cfg.seed)
    chosen = _constrained_subset(rng, n_fields, cfg.constrained_fraction)
    spec = parse_gtl(f"G[0,{cfg.window}](!(F G<=2 d) & !(F G<=3 E^2 d))")
    return model, {i: spec for i in chosen}


# ---------------------------------------------------------------------------
# Urban patrol
# ---------------------------------------------------------------------------

# Incident counts per intersection of the 5x7 map, keyed (x1, x2) with
# x1 in 1..5 (west to east) and x2 in 1..7 (south to north). Transcribed
# static fixture; the three starred entries are the critical intersections.
URBAN_CRIME_COUNTS: dict[tuple[int, int], int] = {
    (x1, x2): count
    for x2, row in enumerate(
        [
            (17, 26, 33, 23, 14),  # x2 = 1
            (2, 25, 7, 5, 12),
            (5, 7, 10, 12, 7),
            (17, 19, 2, 11, 8),
            (17, 9, 2, 36, 8),
            (43, 19, 15, 23, 21),
            (17, 25, 48, 69, 80),  # x2 = 7
        ],
        start=1,
    )
    for x1, count in enumerate(row, start=1)
}

URBAN_CRITICAL: tuple[tuple[int, int], ...] = ((3, 7), (4, 5), (3, 1))

_URBAN_MOVES = {"stay": (0, 0), "east": (1, 0), "west": (-1, 0),
                "north": (0, 1), "south": (0, -1)}


def _urban_windows() -> list[tuple[int, int]]:
    """All 3x3 window origins in snake order (south rows first, alternating
    direction) so that consecutive officers overlap heavily."""
    out = []
    for x2lo in range(1, 6):
        xs = range(1, 4) if x2lo % 2 else range(3, 0, -1)
        out.extend((x1lo, x2lo) for x1lo in xs)
    return out


def gen_urban(config: ScenarioConfig) -> tuple[FactoredMdp, dict[int, Formula]]:
    """Patrol officers over a fixed 5x7 intersection map.

    Officer ``k`` patrols the ``k``-th 3x3 window (snake order over window
    origins), moving one intersection per step in the four compass
    directions or staying put; moves off the window are absorbed as a stay.
    Monitoring an intersection earns its incident count. For each critical
    intersection the best-placed officer must satisfy

        ``G[0,W] F<=3 (crit | E^1 crit)``

    — every three steps either that officer or a patrol neighbor covers it.
    ``n_agents`` below 15 keeps a prefix of the snake order (useful for desk
    runs); the map itself is fixed.
    """
    cfg = resolve_config(config)
    if cfg.kind != "urban":
        raise ScenarioError(f"gen_urban got kind {cfg.kind!r}")
    windows = _urban_windows()
    if cfg.n_agents > len(windows):
        raise ScenarioError(
            f"the map supports at most {len(windows)} officers, got {cfg.n_agents}"
        )
    windows = windows[: cfg.n_agents]

    crit_label = {cell: f"crit_x{cell[0]}y{cell[1]}" for cell in URBAN_CRITICAL}

    def cells_of(win: tuple[int, int]) -> list[tuple[int, int]]:
        x1lo, x2lo = win
        return [(x1, x2) for x1 in range(x1lo, x1lo + 3) for x2 in range(x2lo, x2lo + 3)]

    graph = AgentGraph(
        len(windows), [(k, k + 1) for k in range(len(windows) - 1)]
    )

    agents = []
    for k, win in enumerate(windows):
        cells = cells_of(win)
        cell_pos = {c: j for j, c in enumerate(cells)}
        states = [
            StateDef(
                f"x{x1}y{x2}",
                value=float(URBAN_CRIME_COUNTS[(x1, x2)]),
                coords=(float(x1), float(x2)),
                labels=frozenset(
                    {crit_label[(x1, x2)]} if (x1, x2) in crit_label else ()
                ),
            )
            for x1, x2 in cells
        ]
        actions = list(_URBAN_MOVES)
        kernel = KernelTable((k,), (9,), len(actions), 9)
        reward = RewardTable((k,), (9,), len(actions))
        for j, (x1, x2) in enumerate(cells):
            for a, (dx1, dx2) in enumerate(_URBAN_MOVES.values()):
                dest = cell_pos.get((x1 + dx1, x2 + dx2), j)
                kernel.probs[j, a, dest] = 1.0
                reward.values[j, a] = float(URBAN_CRIME_COUNTS[(x1, x2)])
        center = cell_pos[(win[0] + 1, win[1] + 1)]
        agents.append(
            AgentDef(
                name=f"officer_{k}",
                states=states,
                actions=actions,
                initial=center,
                depends_on=(k,),
                kernel=kernel,
                reward=reward,
            )
        )

    model = _finish(FactoredMdp(graph, agents, EdgeLabelSpec("constant", 1.0)))

    specs: dict[int, Formula] = {}
    for cell in URBAN_CRITICAL:
        holders = [
            (abs(win[0] + 1 - cell[0]) + abs(win[1] + 1 - cell[1]), k)
            for k, win in enumerate(windows)
            if cell in cells_of(win)
        ]
        if not holders:  # possible when n_agents trims the snake order
            continue
        _, owner = min(holders)
        label = crit_label[cell]
        specs[owner] = parse_gtl(f"G[0,{cfg.window}] F<=3 ({label} | E^1 {label})")
    return model, specs


# ---------------------------------------------------------------------------
# Search and rescue
# ---------------------------------------------------------------------------

def _rescue_areas() -> list[tuple[tuple[int, int], str]]:
    """The 25 staging areas: coordinates on a 5x5 grid and a color. The
    center is a dual green+blue staging point (within distance 4 of every
    area), the outer ring is red (where the work and the rewards are), and
    the middle rings split into blue (distance 1) and green (distance 2)."""
    out = []
    for y in range(5):
        for x in range(5):
            d = abs(x - 2) + abs(y - 2)
            color = "staging" if d == 0 else "blue" if d == 1 else "green" if d == 2 else "red"
            out.append(((x, y), color))
    return out


RESCUE_AREAS = _rescue_areas()


def gen_rescue(config: ScenarioConfig) -> tuple[FactoredMdp, dict[int, Formula]]:
    """Search-and-rescue robots shuttling between colored areas.

    Each robot patrols four areas — its red home, the central staging area
    (labeled both green and blue), and its nearest green and blue areas —
    moving to any of them in one planning step. Coordination edges form a
    ring with cross bracing (neighbors ``i-1``, ``i+1`` and the antipodal
    robot), and edge labels report the Manhattan distance between the two
    robots' current areas. Robots start at their homes, earn reward only in
    red areas, and each constrained robot must satisfy

        ``G[0,W]( !red | F<=2 (E^3 O{y<=4} green & E^3 O{y<=4} blue) )``

    — whenever it works a red area, within two steps all three coordination
    neighbors stand within distance 4 in green areas and in blue areas
    (simultaneously possible only at dual-labeled staging points).
    """
    cfg = resolve_config(config)
    if cfg.kind != "rescue":
        raise ScenarioError(f"gen_rescue got kind {cfg.kind!r}")
    n_robots = cfg.n_agents
    if n_robots < 4 or n_robots % 2:
        raise ScenarioError(
            "the rescue coordination graph (ring plus antipodal bracing) "
            f"needs an even robot count of at least 4, got {n_robots}"
        )

    coords = [c for c, _ in RESCUE_AREAS]
    color = {c: col for c, col in RESCUE_AREAS}
    reds = [c for c, col in RESCUE_AREAS if col == "red"]
    labels = {
        "staging": frozenset({"green", "blue"}),
        "green": frozenset({"green"}),
        "blue": frozenset({"blue"}),
        "red": frozenset({"red"}),
    }

    def nearest(home: tuple[int, int], col: str) -> tuple[int, int]:
        return min(
            (c for c in coords if color[c] == col),
            key=lambda c: (abs(c[0] - home[0]) + abs(c[1] - home[1]), coords.index(c)),
        )

    rng = np.random.default_rng(cfg.seed)
    shuffled = [reds[int(i)] for i in rng.permutation(len(reds))]
    homes = [shuffled[k % len(shuffled)] for k in range(n_robots)]

    edges = [(k, (k + 1) % n_robots) for k in range(n_robots)]
    edges += [(k, k + n_robots // 2) for k in range(n_robots // 2)]
    graph = AgentGraph(n_robots, edges)

    agents = []
    for k in range(n_robots):
        home = homes[k]
        stops = [home, (2, 2), nearest(home, "green"), nearest(home, "blue")]
        names = ["home", "staging", "green_stop", "blue_stop"]
        states = [
            StateDef(
                nm,
                coords=(float(c[0]), float(c[1])),
                labels=labels[color[c]],
            )
            for nm, c in zip(names, stops)
        ]
        kernel = KernelTable((k,), (4,), 4, 4)
        for s in range(4):
            for a in range(4):
                kernel.probs[s, a, a] = 1.0
        reward = RewardTable((k,), (4,), 4)
        reward.values[0, :] = 1.0  # the home area is the only red stop
        agents.append(
            AgentDef(
                name=f"robot_{k}",
                states=states,
                actions=[f"goto_{nm}" for nm in names],
                initial=0,
                depends_on=(k,),
                kernel=kernel,
                reward=reward,
            )
        )

    model = _finish(
        FactoredMdp(graph, agents, EdgeLabelSpec("manhattan-distance"))
    )
    chosen = _constrained_subset(rng, n_robots, cfg.constrained_fraction)
    spec = parse_gtl(
        f"G[0,{cfg.window}](!red | F<=2 (E^3 O{{y<=4}} green & E^3 O{{y<=4}} blue))"
    )
    return model, {i: spec for i in chosen}
