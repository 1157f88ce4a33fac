"""Mine a top-K similarity graph and watch one propagation step smooth clustered vectors.

Entities are drawn around a few cluster centres. After mining and normalising the
graph, one propagation step pulls each vector towards its neighbours, and the blend
with the previous representation keeps part of the original signal.
Run: python3 demos/structure_migration.py
"""
import numpy as np

from cstwa.nn import make_rng
from cstwa.structure import ema_blend, graph_stats, normalize_graph, propagate, topk_similarity_graph

rng = make_rng(1, "demo")
centres = rng.standard_normal((4, 6))
labels = rng.integers(0, 4, 300)
reps = centres[labels] + 0.8 * rng.standard_normal((300, 6))

g = normalize_graph(topk_similarity_graph(reps, K=8))
print("graph:", graph_stats(g))

rows, cols = g.to_scipy().nonzero()
print(f"edges within a cluster: {np.mean(labels[rows] == labels[cols]):.3f} (chance is about 0.25)")


def spread(x):
    """Mean distance to own cluster centroid, relative to the overall scale."""
    cent = np.stack([x[labels == k].mean(0) for k in range(4)])
    return np.linalg.norm(x - cent[labels], axis=1).mean() / np.linalg.norm(x - x.mean(0), axis=1).mean()


fresh = propagate(g, reps, 1)
print(f"within-cluster spread: raw {spread(reps):.3f}, propagated {spread(fresh):.3f}, "
      f"blended (alpha 0.3) {spread(ema_blend(fresh, reps, 0.3)):.3f}")
