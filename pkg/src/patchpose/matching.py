"""Patch nearest-neighbor matching, template scoring, and top-K retrieval.

Scoring model: every masked query patch is matched to its highest-cosine
masked template patch; matches scoring below the threshold are discarded;
a template's similarity is the sum of kept scores divided by the number of
masked query patches, which lands in [0, 1] for a positive threshold.

The single-pair operations (nearest_patch, template_similarity) compute in
float64. Collection retrieval packs every template's masked descriptors
into one float32 matrix so all templates are scored with a single matrix
product per query; rankings are deterministic with ties broken by smallest
template id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NoCandidatesError
from .featuregrid import FeatureGrid

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class Correspondence:
    """A matched patch pair with its cosine score."""

    query_index: tuple[int, int]
    template_index: tuple[int, int]
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    """One ranked template: id, similarity, kept correspondences (by score)."""

    template_id: int
    similarity: float
    correspondences: tuple[Correspondence, ...]


def _order_correspondences(
    query_idx: np.ndarray, template_idx: np.ndarray, scores: np.ndarray, side: int
) -> tuple[Correspondence, ...]:
    """Sort by descending score, ties by query row-major index."""
    flat_q = query_idx[:, 0] * side + query_idx[:, 1]
    order = np.lexsort((flat_q, -scores))
    return tuple(
        Correspondence(
            (int(query_idx[i, 0]), int(query_idx[i, 1])),
            (int(template_idx[i, 0]), int(template_idx[i, 1])),
            float(scores[i]),
        )
        for i in order
    )


def nearest_patch(
    query_grid: FeatureGrid, i: tuple[int, int], template_grid: FeatureGrid
) -> tuple[tuple[int, int], float]:
    """Best-matching masked template patch for one masked query patch.

    Ties are broken by smallest row-major template index.
    """
    row, col = i
    if not query_grid.mask[row, col]:
        raise ValueError(f"query patch {i} is not masked")
    if not template_grid.mask.any():
        raise NoCandidatesError("template grid has an empty mask")
    if query_grid.dim != template_grid.dim:
        raise ValueError(
            f"descriptor dims differ: {query_grid.dim} vs {template_grid.dim}"
        )
    scores = template_grid.masked_matrix.astype(np.float64) @ query_grid.data[
        row, col
    ].astype(np.float64)
    best = int(np.argmax(scores))
    t_row, t_col = template_grid.masked_indices[best]
    return (int(t_row), int(t_col)), float(scores[best])


def template_similarity(
    query: FeatureGrid,
    template: FeatureGrid,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[float, tuple[Correspondence, ...]]:
    """Score one template against a query and extract kept correspondences."""
    if not query.mask.any():
        raise NoCandidatesError("query grid has an empty mask")
    if not template.mask.any():
        raise NoCandidatesError("template grid has an empty mask")
    if query.dim != template.dim:
        raise ValueError(f"descriptor dims differ: {query.dim} vs {template.dim}")
    scores = query.masked_matrix.astype(np.float64) @ template.masked_matrix.astype(
        np.float64
    ).T
    best_idx = np.argmax(scores, axis=1)
    best = scores[np.arange(len(best_idx)), best_idx]
    kept = best >= threshold
    similarity = float(np.where(kept, best, 0.0).sum() / len(best))
    corrs = _order_correspondences(
        query.masked_indices[kept],
        template.masked_indices[best_idx[kept]],
        best[kept],
        query.width,
    )
    return similarity, corrs


class TemplateIndex:
    """Packed masked descriptors of a template collection for batched scoring."""

    def __init__(self, grids: Sequence[FeatureGrid]):
        grids = list(grids)
        if not grids:
            raise ValueError("template collection is empty")
        dim = grids[0].dim
        for tid, g in enumerate(grids):
            if g.dim != dim:
                raise ValueError(f"template {tid} has dim {g.dim}, expected {dim}")
            if not g.mask.any():
                raise ValueError(f"template {tid} has an empty mask")
        self.grids = grids
        counts = np.array([g.masked_matrix.shape[0] for g in grids])
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.packed = np.concatenate([g.masked_matrix for g in grids], axis=0)

    def __len__(self) -> int:
        return len(self.grids)

    @property
    def dim(self) -> int:
        return self.packed.shape[1]


def retrieve_topk(
    query: FeatureGrid,
    templates: Sequence[FeatureGrid] | TemplateIndex,
    k: int,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[RetrievalResult]:
    """Rank all templates against the query, return the top k.

    One float32 matrix product scores every template; k larger than the
    collection is clamped with a warning.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    index = templates if isinstance(templates, TemplateIndex) else TemplateIndex(templates)
    if not query.mask.any():
        raise NoCandidatesError("query grid has an empty mask")
    if query.dim != index.dim:
        raise ValueError(f"descriptor dims differ: {query.dim} vs {index.dim}")
    if k > len(index):
        logger.warning("k=%d exceeds collection size %d, clamping", k, len(index))
        k = len(index)

    q = query.masked_matrix  # (P, D) float32
    scores = q @ index.packed.T  # (P, total masked cells) float32
    best = np.maximum.reduceat(scores, index.starts, axis=1)  # (P, T)
    best64 = best.astype(np.float64)
    kept = best64 >= threshold
    sims = np.where(kept, best64, 0.0).sum(axis=0) / q.shape[0]

    order = np.lexsort((np.arange(len(index)), -sims))[:k]
    results = []
    for tid in order:
        tid = int(tid)
        grid = index.grids[tid]
        seg = scores[:, index.starts[tid] : index.starts[tid] + grid.masked_matrix.shape[0]]
        arg = np.argmax(seg, axis=1)
        keep = kept[:, tid]
        corrs = _order_correspondences(
            query.masked_indices[keep],
            grid.masked_indices[arg[keep]],
            best64[keep, tid],
            query.width,
        )
        results.append(RetrievalResult(tid, float(sims[tid]), corrs))
    return results
