"""Distill one object mask per image from its affinity graphs.

The chain: pick the most discriminative patches by their similarity to
the classification token, seed from the single best patch, keep only
proposals with positive similarity to the seed, then mark every patch
whose summed similarity to the kept proposals is positive. The patch
mask is restricted to the seed's connected component by default and
upsampled to pixel resolution by block replication.

All tie-breaks are lowest-index and all thresholds use strict ``> 0``,
so the result is bit-for-bit deterministic.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .affinity import cls_affinity, patch_affinity
from .errors import EmptyMaskError, ParameterError, ValidationError
from .formats import FeaturePack, ObjectCandidate, candidate_from_mask
from .validation import check_fraction

COMPONENT_MODES = ("source-component", "all")


@dataclass
class PatchMask:
    """Binary mask over the patch grid plus the sets that produced it."""

    grid_h: int
    grid_w: int
    bits: np.ndarray
    source: int
    proposals: frozenset[int] = field(default_factory=frozenset)
    refined: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        n = self.grid_h * self.grid_w
        if self.bits.shape != (n,):
            raise ValidationError(f"bits must have length {n}, got {self.bits.shape}")
        if not (0 <= self.source < n):
            raise ValidationError(f"source {self.source} outside [0, {n})")
        if self.bits[self.source] != 1:
            raise ValidationError("the source patch must be part of the mask")
        if self.refined:
            if self.source not in self.refined:
                raise ValidationError("the source patch must be among the refined proposals")
            if not self.refined <= self.proposals | {self.source}:
                raise ValidationError("refined proposals must come from the proposal set")
            if not all(0 <= p < n for p in self.proposals):
                raise ValidationError("proposal indices outside the patch grid")

    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid_h, self.grid_w)


def select_top_k(a_cls: np.ndarray, k_fraction: float) -> np.ndarray:
    """Indices of the ``max(1, floor(k_fraction * N))`` largest affinities.

    Ties go to the lower index. Returned sorted ascending.
    """
    check_fraction(k_fraction, "k_fraction")
    a = np.asarray(a_cls, dtype=np.float64)
    n = a.shape[0]
    count = max(1, math.floor(k_fraction * n))
    # stable sort on the negated values keeps lower indices first on ties
    order = np.argsort(-a, kind="stable")
    return np.sort(order[:count])


def find_source(a_cls: np.ndarray) -> int:
    """Index of the largest affinity; ties go to the lowest index."""
    return int(np.argmax(np.asarray(a_cls, dtype=np.float64)))


def refine_proposals(proposals, source: int, a_patch: np.ndarray) -> np.ndarray:
    """Keep proposals with strictly positive similarity to the source.

    The source itself is always included, even when its self-similarity
    is zero (degenerate all-zero features).
    """
    a_patch = np.asarray(a_patch, dtype=np.float64)
    proposals = np.asarray(sorted(int(p) for p in proposals), dtype=np.intp)
    kept = proposals[a_patch[source, proposals] > 0.0]
    if source not in kept:
        kept = np.sort(np.append(kept, source))
    return kept


def build_patch_mask(refined, a_patch: np.ndarray, source: int) -> np.ndarray:
    """Mark patch j when its summed similarity to the refined set is > 0.

    The source patch is forced on. Rows are accumulated in ascending
    index order so the sums are reproducible bit-for-bit.
    """
    a_patch = np.asarray(a_patch, dtype=np.float64)
    refined = sorted(int(p) for p in refined)
    if not refined:
        raise ValidationError("refined proposal set must not be empty")
    totals = np.zeros(a_patch.shape[1], dtype=np.float64)
    for i in refined:
        totals += a_patch[i]
    bits = (totals > 0.0).astype(np.uint8)
    bits[source] = 1
    return bits


def extract_component(mask: PatchMask, mode: str = "source-component") -> PatchMask:
    """Optionally keep only the 4-connected component containing the source."""
    if mode not in COMPONENT_MODES:
        raise ParameterError(f"component mode must be one of {COMPONENT_MODES}, got {mode!r}")
    if mode == "all":
        return mask
    grid = mask.grid()
    gh, gw = grid.shape
    sr, sc = divmod(mask.source, gw)
    kept = np.zeros_like(grid)
    queue = deque([(sr, sc)])
    kept[sr, sc] = 1
    while queue:
        r, c = queue.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < gh and 0 <= nc < gw and grid[nr, nc] and not kept[nr, nc]:
                kept[nr, nc] = 1
                queue.append((nr, nc))
    return PatchMask(grid_h=gh, grid_w=gw, bits=kept.ravel(), source=mask.source,
                     proposals=mask.proposals, refined=mask.refined)


def upsample_mask(mask: PatchMask, patch_size: int) -> np.ndarray:
    """Nearest-neighbor upsampling: each patch becomes an S x S pixel block."""
    grid = mask.grid()
    return np.repeat(np.repeat(grid, patch_size, axis=0), patch_size, axis=1)


def mask_to_bbox(pixel_mask) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) box of the set pixels."""
    arr = np.asarray(pixel_mask)
    rows = np.flatnonzero(arr.any(axis=1))
    cols = np.flatnonzero(arr.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("cannot compute a bounding box of an empty mask")
    return (int(cols[0]), int(rows[0]),
            int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def distill(pack: FeaturePack, k_fraction: float = 0.4,
            component_mode: str = "source-component") -> ObjectCandidate:
    """Full per-image chain from feature pack to one mask candidate.

    Stage-1 masks carry no confidence of their own, so the score is
    fixed at 1.0 and the label is left unset.
    """
    a_cls = cls_affinity(pack)
    a_patch = patch_affinity(pack)
    proposals = select_top_k(a_cls, k_fraction)
    source = find_source(a_cls)
    refined = refine_proposals(proposals, source, a_patch)
    bits = build_patch_mask(refined, a_patch, source)
    patch_mask = PatchMask(
        grid_h=pack.grid_h, grid_w=pack.grid_w, bits=bits, source=source,
        proposals=frozenset(int(p) for p in proposals),
        refined=frozenset(int(p) for p in refined),
    )
    patch_mask = extract_component(patch_mask, component_mode)
    pixel_mask = upsample_mask(patch_mask, pack.patch_size)
    return candidate_from_mask(pack.image_id, pixel_mask, score=1.0, label=None)


class MaskDistiller(BaseEstimator, TransformerMixin):
    """Stateless transformer: feature packs in, one mask candidate each.

    Parameters mirror :func:`distill`; ``fit`` is a no-op so the class
    slots into sklearn pipelines and grid-search tooling.
    """

    def __init__(self, k_fraction: float = 0.4, component_mode: str = "source-component"):
        self.k_fraction = k_fraction
        self.component_mode = component_mode

    def fit(self, X=None, y=None):
        check_fraction(self.k_fraction, "k_fraction")
        if self.component_mode not in COMPONENT_MODES:
            raise ParameterError(
                f"component mode must be one of {COMPONENT_MODES}, got {self.component_mode!r}"
            )
        return self

    def transform(self, X) -> list[ObjectCandidate]:
        self.fit()
        return [distill(pack, self.k_fraction, self.component_mode) for pack in X]
