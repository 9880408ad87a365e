"""Hypothesis strategies for random dendrograms."""
import numpy as np
from hypothesis import strategies as st

from genlab.umspace import Dendrogram

masses = st.floats(min_value=0.01, max_value=5.0, allow_nan=False)
heights = st.sampled_from([0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0])


@st.composite
def dendrograms(draw, max_leaves: int = 7, dyadic: bool = False):
    n = draw(st.integers(1, max_leaves))
    if dyadic:
        m = [draw(st.integers(1, 16)) / 8.0 for _ in range(n)]
    else:
        m = [draw(masses) for _ in range(n)]
    g = [draw(heights) for _ in range(n - 1)]
    return Dendrogram(np.array(m), np.array(g))


def is_ultrametric(d: np.ndarray) -> bool:
    n = len(d)
    for k in range(n):
        if np.any(d > np.maximum(d[:, [k]], d[[k], :]) + 1e-12):
            return False
    return True


def canonical(tree: Dendrogram):
    """Isometry-class invariant: nested sorted (height, children) with leaf masses."""
    def rec(mass, gaps):
        if len(mass) == 1:
            return (0.0, round(float(mass[0]), 12))
        top = gaps.max()
        cuts = np.flatnonzero(gaps == top) + 1
        edges = np.concatenate([[0], cuts, [len(mass)]])
        kids = [rec(mass[a:b], gaps[a:b - 1]) for a, b in zip(edges[:-1], edges[1:])]
        return (float(top), tuple(sorted(kids, key=repr)))
    if tree.is_null:
        return ()
    return rec(np.asarray(tree.mass), np.asarray(tree.gaps))
