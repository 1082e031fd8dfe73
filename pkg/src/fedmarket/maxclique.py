"""Exact maximum-weight-clique solver plus a brute-force verification oracle.

The solver is branch-and-bound with a greedy weighted-coloring upper bound;
weights are positive integers so all comparisons are exact. Ties between
maximum cliques resolve to the lexicographically smallest sorted node set.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BRUTE_FORCE_MAX_NODES = 25


@dataclass
class WeightedGraph:
    """Undirected graph with positive integer node weights and no self-loops."""

    weights: list[int]
    adj: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.weights)
        self.adj = np.asarray(self.adj, dtype=bool)
        if self.adj.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adj.shape} does not match {n} nodes")
        if not (self.adj == self.adj.T).all():
            raise ValueError("adjacency must be symmetric")
        if self.adj.diagonal().any():
            raise ValueError("self-loops are not allowed")
        if any((not isinstance(w, (int, np.integer))) or w < 1 for w in self.weights):
            raise ValueError("node weights must be integers >= 1")
        self.weights = [int(w) for w in self.weights]

    @property
    def n(self) -> int:
        return len(self.weights)


def _neighbor_masks(g: WeightedGraph) -> list[int]:
    masks = []
    for v in range(g.n):
        m = 0
        for u in np.flatnonzero(g.adj[v]):
            m |= 1 << int(u)
        masks.append(m)
    return masks


def solve(g: WeightedGraph) -> tuple[set[int], int]:
    """Maximum-weight clique and its total weight, found exactly.

    Branch-and-bound over vertices ordered by descending weight; a candidate
    set is bounded by greedy weighted coloring (any clique takes at most the
    heaviest vertex from each independent color class). Pruning is strict so
    equal-weight cliques survive for the lexicographic tie rule.
    """
    if g.n == 0:
        return set(), 0
    order = sorted(range(g.n), key=lambda v: (-g.weights[v], v))
    w = [g.weights[v] for v in order]
    # neighbor masks in the reordered index space
    pos = {v: i for i, v in enumerate(order)}
    nbr = [0] * g.n
    for v in range(g.n):
        for u in np.flatnonzero(g.adj[v]):
            nbr[pos[v]] |= 1 << pos[int(u)]

    best_w = 0
    best_key: tuple[int, ...] = ()

    def bound(candidates: int) -> int:
        total = 0
        class_masks: list[int] = []
        m = candidates
        while m:
            low = m & -m
            v = low.bit_length() - 1
            m ^= low
            for i, cm in enumerate(class_masks):
                if not (cm & nbr[v]):
                    class_masks[i] = cm | low
                    break
            else:
                class_masks.append(low)
                total += w[v]  # first member of a class is its heaviest
        return total

    def expand(clique: list[int], clique_w: int, candidates: int) -> None:
        nonlocal best_w, best_key
        key = tuple(sorted(order[v] for v in clique))
        if clique_w > best_w or (clique_w == best_w and key < best_key):
            best_w, best_key = clique_w, key
        m = candidates
        while m:
            if clique_w + bound(m) < best_w:
                return
            low = m & -m
            v = low.bit_length() - 1
            expand(clique + [v], clique_w + w[v], m & nbr[v])
            m ^= low

    expand([], 0, (1 << g.n) - 1)
    return set(best_key), best_w


def brute_force(g: WeightedGraph) -> tuple[set[int], int]:
    """Exhaustive subset scan; same tie rule as :func:`solve`."""
    if g.n > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute force is guarded at n <= {BRUTE_FORCE_MAX_NODES}")
    if g.n == 0:
        return set(), 0
    nbr = _neighbor_masks(g)
    best_w = 0
    best_key: tuple[int, ...] = ()
    for s in range(1, 1 << g.n):
        m = s
        weight = 0
        is_clique = True
        while m:
            low = m & -m
            v = low.bit_length() - 1
            m ^= low
            # v must be adjacent to every higher-indexed member left in m
            if (nbr[v] & m) != m:
                is_clique = False
                break
            weight += g.weights[v]
        if not is_clique:
            continue
        if weight > best_w:
            best_w = weight
            best_key = _bits(s)
        elif weight == best_w and _bits(s) < best_key:
            best_key = _bits(s)
    return set(best_key), best_w


def _bits(s: int) -> tuple[int, ...]:
    out = []
    while s:
        low = s & -s
        out.append(low.bit_length() - 1)
        s ^= low
    return tuple(out)


def is_clique(g: WeightedGraph, nodes: set[int]) -> bool:
    """Independent pairwise-adjacency check, used to verify solver output."""
    members = sorted(nodes)
    for i, u in enumerate(members):
        for v in members[i + 1 :]:
            if not g.adj[u, v]:
                return False
    return True


def write_dimacs(g: WeightedGraph, path: str | Path) -> None:
    """DIMACS-like text: ``p edge n m``, ``n <id> <weight>``, ``e <u> <v>`` (1-based ids)."""
    lines = []
    edges = [(u, v) for u in range(g.n) for v in range(u + 1, g.n) if g.adj[u, v]]
    lines.append(f"p edge {g.n} {len(edges)}")
    for v, w in enumerate(g.weights):
        lines.append(f"n {v + 1} {w}")
    for u, v in edges:
        lines.append(f"e {u + 1} {v + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dimacs(path: str | Path) -> WeightedGraph:
    """Parse the format written by :func:`write_dimacs`; missing weights default to 1."""
    n = -1
    weights: dict[int, int] = {}
    edges: list[tuple[int, int]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] == "c":
            continue
        if parts[0] == "p":
            if len(parts) != 4 or parts[1] != "edge":
                raise ValueError(f"line {lineno}: malformed problem line {line!r}")
            n = int(parts[2])
        elif parts[0] == "n":
            weights[int(parts[1]) - 1] = int(parts[2])
        elif parts[0] == "e":
            edges.append((int(parts[1]) - 1, int(parts[2]) - 1))
        else:
            raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
    if n < 0:
        raise ValueError(f"{path}: missing 'p edge' line")
    adj = np.zeros((n, n), dtype=bool)
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"edge ({u + 1}, {v + 1}) outside 1..{n}")
        adj[u, v] = adj[v, u] = True
    return WeightedGraph([weights.get(v, 1) for v in range(n)], adj)
