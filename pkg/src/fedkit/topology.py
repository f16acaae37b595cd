"""Hierarchical and decentralized training structures.

Two shapes beyond the plain star:

* :class:`TreeTopology` — leaves are clients, internal nodes are relay
  servers that pass sample-weighted averages upward.  One round of
  bottom-up aggregation is mathematically the flat weighted average over
  all leaves; the tree only changes who talks to whom.
* :class:`NeighborGraph` — serverless peer averaging.  Each round every
  node replaces its model with the weighted mean over its closed
  neighborhood (itself plus neighbors), all nodes stepping simultaneously
  from the pre-round snapshot.
"""
from __future__ import annotations

import warnings
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DisconnectedNodeWarning, InvalidTopology, MissingLeafUpdate
from .params import ModelUpdate, ParameterSet, weighted_sum


class TreeTopology:
    """Aggregation tree given as child -> parent links (root maps to None)."""

    def __init__(self, parent: Mapping[str, Optional[str]]):
        roots = [n for n, p in parent.items() if p is None]
        if len(roots) != 1:
            raise InvalidTopology(f"need exactly one root, found {sorted(roots)}")
        self.root = roots[0]
        self.parent = dict(parent)
        self.children: dict[str, list[str]] = {n: [] for n in parent}
        for node, par in parent.items():
            if par is None:
                continue
            if par not in parent:
                raise InvalidTopology(f"{node!r} points at unknown parent {par!r}")
            self.children[par].append(node)
        for kids in self.children.values():
            kids.sort()
        # cycles are exactly the nodes that never reach the root
        for node in parent:
            seen = set()
            cur: Optional[str] = node
            while cur is not None:
                if cur in seen:
                    raise InvalidTopology(f"cycle through {cur!r}")
                seen.add(cur)
                cur = self.parent[cur]
        self.leaves = tuple(sorted(n for n, kids in self.children.items() if not kids))

    @property
    def internal_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(n for n, kids in self.children.items() if kids))

    def depth(self) -> int:
        def down(node: str) -> int:
            kids = self.children[node]
            return 1 + max((down(k) for k in kids), default=0)

        return down(self.root)


def hier_round(tree: TreeTopology, leaf_updates: Mapping[str, ModelUpdate]) -> ParameterSet:
    """One bottom-up aggregation pass; returns the new root model.

    Each internal node forms the sample-weighted average of its children
    and forwards it upward with the summed count, so the root ends up with
    the flat weighted average over every leaf.
    """
    missing = [leaf for leaf in tree.leaves if leaf not in leaf_updates]
    if missing:
        raise MissingLeafUpdate(f"no update from {missing}")

    def combine(node: str) -> tuple[ParameterSet, int]:
        kids = tree.children[node]
        if not kids:
            u = leaf_updates[node]
            return u.params, u.sample_count
        parts = [combine(k) for k in kids]
        total = sum(c for _, c in parts)
        weights = [c / total for _, c in parts]
        return weighted_sum([p for p, _ in parts], weights), total

    return combine(tree.root)[0]


class NeighborGraph:
    """Undirected peer graph with optional per-edge mixing mass.

    Every node carries implicit self-mass 1.0; edge weights default to 1.0,
    giving the uniform closed-neighborhood average.
    """

    def __init__(
        self,
        nodes: Sequence[str],
        edges: Iterable[tuple[str, str]],
        edge_weights: Optional[Mapping[tuple[str, str], float]] = None,
    ):
        self.nodes = tuple(sorted(nodes))
        known = set(self.nodes)
        if len(known) != len(nodes):
            raise InvalidTopology("duplicate node ids")
        self.adjacency: dict[str, set] = {n: set() for n in self.nodes}
        self._weights: dict[tuple[str, str], float] = {}
        for a, b in edges:
            if a == b:
                raise InvalidTopology(f"self-loop at {a!r}")
            if a not in known or b not in known:
                raise InvalidTopology(f"edge ({a!r}, {b!r}) uses unknown node")
            self.adjacency[a].add(b)
            self.adjacency[b].add(a)
            key = (min(a, b), max(a, b))
            w = 1.0 if edge_weights is None else float(edge_weights.get((a, b), edge_weights.get((b, a), 1.0)))
            if w <= 0:
                raise InvalidTopology(f"edge weight for {key} must be positive")
            self._weights[key] = w
        for n in self.nodes:
            if not self.adjacency[n]:
                warnings.warn(f"node {n!r} has no neighbors", DisconnectedNodeWarning)

    @classmethod
    def complete(cls, nodes: Sequence[str]) -> "NeighborGraph":
        ns = sorted(nodes)
        return cls(ns, [(a, b) for i, a in enumerate(ns) for b in ns[i + 1 :]])

    @classmethod
    def ring(cls, nodes: Sequence[str]) -> "NeighborGraph":
        ns = sorted(nodes)
        if len(ns) < 3:
            raise InvalidTopology("ring needs at least 3 nodes")
        return cls(ns, [(ns[i], ns[(i + 1) % len(ns)]) for i in range(len(ns))])

    def degree(self, node: str) -> int:
        return len(self.adjacency[node])

    def edge_weight(self, a: str, b: str) -> float:
        return self._weights[(min(a, b), max(a, b))]

    def mixing_row(self, node: str) -> tuple[tuple[str, ...], np.ndarray]:
        """Normalized closed-neighborhood weights for one node, sorted by id."""
        members = sorted(self.adjacency[node] | {node})
        masses = np.array(
            [1.0 if m == node else self.edge_weight(node, m) for m in members], dtype=np.float64
        )
        return tuple(members), masses / masses.sum()


def dfl_round(graph: NeighborGraph, models: Mapping[str, ParameterSet]) -> dict[str, ParameterSet]:
    """One decentralized averaging round over the pre-round snapshot."""
    missing = [n for n in graph.nodes if n not in models]
    if missing:
        raise MissingLeafUpdate(f"no model for {missing}")
    out: dict[str, ParameterSet] = {}
    for node in graph.nodes:
        members, weights = graph.mixing_row(node)
        if len(members) == 1:
            out[node] = models[node]  # isolated node keeps its own model
            continue
        out[node] = weighted_sum([models[m] for m in members], weights)
    return out
