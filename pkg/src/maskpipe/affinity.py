"""Head-averaged affinity graphs between transformer tokens.

Two graphs are built from a feature pack: the vector of similarities
between the classification token and every patch token, and the dense
patch-to-patch similarity matrix. Both are raw dot products averaged
over attention heads - no softmax and no sqrt(d) scaling, because every
downstream decision is argmax / top-k / sign-based and therefore
invariant to positive scaling.

Dot products are accumulated in double precision: the sign fidelity of
near-zero sums is what the downstream thresholds depend on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import FeaturePack


@dataclass(frozen=True)
class AffinityGraph:
    """``a_cls``: length-N vector; ``a_patch``: symmetric N x N matrix."""

    a_cls: np.ndarray
    a_patch: np.ndarray


def cls_affinity(pack: FeaturePack) -> np.ndarray:
    """Mean over heads of <q_cls(h), k_patch(h, j)> for every patch j."""
    q = pack.q_cls.astype(np.float64)
    k = pack.k_patch.astype(np.float64)
    # [heads, N] per-head dots, then head average
    per_head = np.einsum("hd,hnd->hn", q, k)
    return per_head.mean(axis=0)


def patch_affinity(pack: FeaturePack) -> np.ndarray:
    """Mean over heads of the per-head key Gram matrices, exactly symmetric."""
    k = pack.k_patch.astype(np.float64)
    # summing the per-head Grams equals one Gram over the stacked
    # (head, dim) axis, which BLAS handles in a single product
    stacked = k.transpose(1, 0, 2).reshape(pack.n_patches, -1)
    gram = stacked @ stacked.T / pack.heads
    # matmul may break symmetry in the last ulp; the mean with the
    # transpose restores it without moving any value past a sign boundary
    return (gram + gram.T) / 2.0


def build_affinity_graph(pack: FeaturePack) -> AffinityGraph:
    return AffinityGraph(a_cls=cls_affinity(pack), a_patch=patch_affinity(pack))
