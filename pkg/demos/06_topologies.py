"""Aggregation beyond the star: relay trees and serverless peer graphs.

Part 1 builds a two-tier relay tree and shows that one bottom-up pass is
bit-for-bit the flat sample-weighted average over all leaves; the tree
changes who talks to whom, not the math.

Part 2 runs serverless neighbor averaging on a ring versus a complete
graph and tracks how fast the node models contract toward consensus.

    python demos/06_topologies.py
"""

import numpy as np

from fedkit.params import ModelUpdate, ParameterSet, weighted_sum
from fedkit.topology import NeighborGraph, TreeTopology, dfl_round, hier_round


def random_params(rng, scale=1.0) -> ParameterSet:
    return ParameterSet([
        ("w", rng.normal(0, scale, (6, 4))),
        ("b", rng.normal(0, scale, (4,))),
    ])


def spread(models) -> float:
    """Max pairwise L-inf distance across node models."""
    vals = list(models.values())
    worst = 0.0
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            for name in vals[i].names:
                worst = max(worst, float(np.max(np.abs(vals[i][name] - vals[j][name]))))
    return worst


def main():
    rng = np.random.default_rng(7)

    # -- relay tree -------------------------------------------------------
    tree = TreeTopology({
        "root": None,
        "relay_a": "root", "relay_b": "root",
        "c1": "relay_a", "c2": "relay_a",
        "c3": "relay_b", "c4": "relay_b", "c5": "relay_b",
    })
    counts = {"c1": 120, "c2": 60, "c3": 300, "c4": 40, "c5": 80}
    updates = {
        leaf: ModelUpdate(leaf, random_params(rng), False, counts[leaf], 10, 0)
        for leaf in tree.leaves
    }
    via_tree = hier_round(tree, updates)

    total = sum(counts.values())
    flat = weighted_sum(
        [updates[leaf].params for leaf in tree.leaves],
        [counts[leaf] / total for leaf in tree.leaves],
    )
    gap = max(
        float(np.max(np.abs(via_tree[n] - flat[n]))) for n in flat.names
    )
    print(f"tree depth {tree.depth()}, leaves {tree.leaves}")
    print(f"tree result vs flat weighted average: max |diff| = {gap:.2e}\n")

    # -- peer averaging ---------------------------------------------------
    nodes = [f"n{i}" for i in range(8)]
    start = {n: random_params(rng, scale=2.0) for n in nodes}

    print(f"{'round':>5s} {'ring spread':>12s} {'complete spread':>16s}")
    ring_models = dict(start)
    full_models = dict(start)
    ring = NeighborGraph.ring(nodes)
    full = NeighborGraph.complete(nodes)
    for r in range(6):
        print(f"{r:>5d} {spread(ring_models):>12.4f} {spread(full_models):>16.4f}")
        ring_models = dfl_round(ring, ring_models)
        full_models = dfl_round(full, full_models)
    print("\nthe complete graph reaches consensus in one round; the ring needs")
    print("many rounds because information travels one hop per round")


if __name__ == "__main__":
    main()
