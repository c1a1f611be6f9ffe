"""Undirected agent interaction graphs and the neighborhood calculus used everywhere else.

Agents are integer indices 0..n-1. All neighborhood sets are *closed* (they
contain the agent itself) unless a function says otherwise, and every set
returned is a sorted tuple so downstream code can rely on a deterministic
order.
"""

from __future__ import annotations


class GraphError(ValueError):
    """Raised for malformed graphs or out-of-range agent indices."""


class AgentGraph:
    """Finite undirected graph without self-loops.

    Parameters
    ----------
    n : int
        Number of agents (nodes).
    edges : iterable of (int, int)
        Undirected edges; duplicates and orientation are normalized away.
    """

    def __init__(self, n: int, edges) -> None:
        if n <= 0:
            raise GraphError("graph needs at least one agent")
        canon = set()
        for e in edges:
            u, v = int(e[0]), int(e[1])
            if u == v:
                raise GraphError(f"self-loop at agent {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u},{v}) out of range for n={n}")
            canon.add((min(u, v), max(u, v)))
        self.n = n
        self.edges = tuple(sorted(canon))
        adj: list[set[int]] = [set() for _ in range(n)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        self._adj = tuple(tuple(sorted(s)) for s in adj)
        self._edge_set = frozenset(self.edges)

    # -- basic queries ------------------------------------------------

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Open neighborhood: adjacent agents, excluding i."""
        self._check(i)
        return self._adj[i]

    def closed(self, i: int) -> tuple[int, ...]:
        """Closed neighborhood: i together with its adjacent agents."""
        self._check(i)
        return tuple(sorted((i, *self._adj[i])))

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edge_set

    # -- derived sets ---------------------------------------------------

    def shared(self, i: int, j: int) -> tuple[int, ...]:
        """Intersection of the two closed neighborhoods."""
        return tuple(sorted(set(self.closed(i)) & set(self.closed(j))))

    def exclusive(self, i: int, j: int) -> tuple[int, ...]:
        """Members of i's closed neighborhood not in j's."""
        return tuple(sorted(set(self.closed(i)) - set(self.closed(j))))

    def _check(self, i: int) -> None:
        if not (0 <= i < self.n):
            raise GraphError(f"agent index {i} out of range for n={self.n}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AgentGraph)
            and self.n == other.n
            and self.edges == other.edges
        )

    def __hash__(self) -> int:
        return hash((self.n, self.edges))

    def __repr__(self) -> str:
        return f"AgentGraph(n={self.n}, edges={list(self.edges)})"


def neighborhoods(graph: AgentGraph, i: int, j: int):
    """Return (closed N(i), N(i,j) = N(i)∩N(j), N(i\\j) = N(i)∖N(j))."""
    return graph.closed(i), graph.shared(i, j), graph.exclusive(i, j)
