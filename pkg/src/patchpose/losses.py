"""Training objectives, evaluated analytically: contrastive patch loss,
log-scale plus geodesic regression loss, and the geodesic angle distance.

No optimizer lives here. These functions score exported features or fitted
regressor weights, and every gradient is hand-derived so the module stands
alone without an autodiff dependency. Finite differences appear only in
tests, as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateBatchError
from .featuregrid import FeatureGrid

DEFAULT_TAU = 0.1
ACOS_CLAMP = 1.0 - 1e-7


# --- geodesic distance ----------------------------------------------------------


def geodesic(alpha1, alpha2):
    """Geodesic distance between two in-plane angles, in [0, pi].

    acos of the cosine of the difference, with the acos argument clamped
    1e-7 away from +/-1 so the gradient stays finite; the clamp makes
    geodesic(a, a) land near 4.5e-4 instead of exactly zero. Accepts
    scalars or broadcastable arrays, is symmetric, and is 2*pi-periodic
    in both arguments.
    """
    c = np.cos(alpha1) * np.cos(alpha2) + np.sin(alpha1) * np.sin(alpha2)
    out = np.arccos(np.clip(c, -ACOS_CLAMP, ACOS_CLAMP))
    if np.isscalar(alpha1) and np.isscalar(alpha2):
        return float(out)
    return out


# --- contrastive loss -----------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveBatch:
    """Aligned query/template grids with ground-truth patch correspondences.

    `correspondences[k]` lists (query_patch, template_patch) index pairs for
    pair k; every referenced patch must be masked in its grid.
    """

    queries: tuple[FeatureGrid, ...]
    templates: tuple[FeatureGrid, ...]
    correspondences: tuple[tuple[tuple[tuple[int, int], tuple[int, int]], ...], ...]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "templates", tuple(self.templates))
        object.__setattr__(
            self,
            "correspondences",
            tuple(tuple((tuple(q), tuple(t)) for q, t in pair) for pair in self.correspondences),
        )
        if not (len(self.queries) == len(self.templates) == len(self.correspondences)):
            raise ValueError(
                f"batch size mismatch: {len(self.queries)} queries, "
                f"{len(self.templates)} templates, {len(self.correspondences)} maps"
            )
        if not self.queries:
            raise ValueError("batch is empty")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        dim = self.queries[0].dim
        for k, (q, t) in enumerate(zip(self.queries, self.templates)):
            if q.dim != dim or t.dim != dim:
                raise ValueError(f"pair {k} mixes descriptor dims")
        for k, pair in enumerate(self.correspondences):
            for qi, ti in pair:
                if not self.queries[k].mask[qi]:
                    raise ValueError(f"pair {k}: query patch {qi} is not masked")
                if not self.templates[k].mask[ti]:
                    raise ValueError(f"pair {k}: template patch {ti} is not masked")


def infonce_from_descriptors(
    queries: Sequence[np.ndarray],
    templates: Sequence[np.ndarray],
    positives: Sequence[Sequence[tuple[int, int]]],
    tau: float = DEFAULT_TAU,
    *,
    strict: bool = False,
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Contrastive loss over raw descriptor matrices, with gradients.

    `positives[k]` holds (query_row, template_row) pairs into pair k's
    matrices. Each positive's denominator runs over every template
    descriptor in the whole batch (negatives from the same pair and from
    every other pair alike); by default the positive term is included,
    which keeps the loss non-negative. `strict=True` drops the positive
    from the denominator instead. Descriptors are cosine-normalized
    internally and the returned gradients (one array per input matrix,
    matching shapes) include that normalization chain.
    """
    queries = [np.asarray(q, dtype=np.float64) for q in queries]
    templates = [np.asarray(t, dtype=np.float64) for t in templates]
    if not (len(queries) == len(templates) == len(positives)):
        raise ValueError("queries, templates, and positives must align")
    pos_list = []
    for k, pair in enumerate(positives):
        if len(pair) == 0:
            raise ValueError(f"pair {k} has no correspondences")
        for qr, tr in pair:
            pos_list.append((k, int(qr), int(tr)))
    if len(pos_list) < 2:
        raise ValueError(f"need at least 2 positives in the batch, got {len(pos_list)}")

    t_all = np.concatenate(templates, axis=0)
    n_total = len(t_all)
    if n_total < 2:
        raise DegenerateBatchError(
            f"{n_total} template descriptor(s) leave no negative pairs"
        )
    t_offsets = np.cumsum([0] + [len(t) for t in templates[:-1]])

    q_rows = np.stack([queries[k][qr] for k, qr, _ in pos_list])
    q_norms = np.linalg.norm(q_rows, axis=1, keepdims=True)
    t_norms = np.linalg.norm(t_all, axis=1, keepdims=True)
    if np.any(q_norms == 0) or np.any(t_norms == 0):
        raise ValueError("zero descriptor has no direction")
    q_hat = q_rows / q_norms
    t_hat = t_all / t_norms
    cos = q_hat @ t_hat.T  # (P, N)
    logits = cos / tau
    pos_cols = np.array([t_offsets[k] + tr for k, _, tr in pos_list])

    p_idx = np.arange(len(pos_list))
    if strict:
        masked = logits.copy()
        masked[p_idx, pos_cols] = -np.inf
        peak = masked.max(axis=1, keepdims=True)
        expd = np.exp(masked - peak)
        lse = peak[:, 0] + np.log(expd.sum(axis=1))
        value = float(np.sum(lse - logits[p_idx, pos_cols]))
        g_logits = expd / expd.sum(axis=1, keepdims=True)
        g_logits[p_idx, pos_cols] = -1.0
    else:
        peak = logits.max(axis=1, keepdims=True)
        expd = np.exp(logits - peak)
        lse = peak[:, 0] + np.log(expd.sum(axis=1))
        value = float(np.sum(lse - logits[p_idx, pos_cols]))
        g_logits = expd / expd.sum(axis=1, keepdims=True)
        g_logits[p_idx, pos_cols] -= 1.0
    g_cos = g_logits / tau

    # cosine chain: dc/dq = (t_hat - c*q_hat)/|q|, dc/dt = (q_hat - c*t_hat)/|t|
    dq_rows = (g_cos @ t_hat - (g_cos * cos).sum(axis=1, keepdims=True) * q_hat) / q_norms
    dt_all = (g_cos.T @ q_hat - (g_cos * cos).sum(axis=0)[:, None] * t_hat) / t_norms

    q_grads = [np.zeros_like(q) for q in queries]
    for p, (k, qr, _) in enumerate(pos_list):
        q_grads[k][qr] += dq_rows[p]
    t_grads = []
    for k, t in enumerate(templates):
        lo = t_offsets[k]
        t_grads.append(dt_all[lo : lo + len(t)].copy())
    return value, (q_grads, t_grads)


def infonce_loss(
    batch: ContrastiveBatch, *, strict: bool = False
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Contrastive loss over a grid batch; gradients come back grid-shaped.

    Wraps infonce_from_descriptors over the masked cells of each grid. The
    returned gradient arrays have each grid's full (H, W, D) shape with
    zeros at unmasked cells.
    """
    q_mats, t_mats, positives = [], [], []
    for k, (q, t, pair) in enumerate(
        zip(batch.queries, batch.templates, batch.correspondences)
    ):
        q_rows = {tuple(idx): r for r, idx in enumerate(map(tuple, q.masked_indices))}
        t_rows = {tuple(idx): r for r, idx in enumerate(map(tuple, t.masked_indices))}
        q_mats.append(q.masked_matrix.astype(np.float64))
        t_mats.append(t.masked_matrix.astype(np.float64))
        positives.append([(q_rows[qi], t_rows[ti]) for qi, ti in pair])
    value, (dq_mats, dt_mats) = infonce_from_descriptors(
        q_mats, t_mats, positives, batch.tau, strict=strict
    )
    q_grads, t_grads = [], []
    for k, (q, t) in enumerate(zip(batch.queries, batch.templates)):
        gq = np.zeros(q.data.shape)
        gq[q.mask] = dq_mats[k]
        q_grads.append(gq)
        gt = np.zeros(t.data.shape)
        gt[t.mask] = dt_mats[k]
        t_grads.append(gt)
    return value, (q_grads, t_grads)


# --- scale / in-plane regression loss --------------------------------------------


@dataclass(frozen=True)
class ScaleInplaneGradients:
    """Partials w.r.t. the regressor's native output coordinates."""

    ln_s: np.ndarray
    cos_alpha: np.ndarray
    sin_alpha: np.ndarray


def scale_inplane_from_raw(
    ln_s: np.ndarray,
    cos_a: np.ndarray,
    sin_a: np.ndarray,
    s_star: float,
    alpha_star: float,
) -> tuple[float, ScaleInplaneGradients]:
    """Regression loss in the raw head coordinates (ln s, cos a, sin a).

    value = sum_i (ln s_i - ln s*)^2 + acos(clamp(cos_a_i cos a* + sin_a_i sin a*)).
    The angle term is linear in (cos_a, sin_a), so the partials treat the
    two as independent coordinates; where the clamp engages, the angle
    gradient is zero.
    """
    ln_s = np.atleast_1d(np.asarray(ln_s, dtype=np.float64))
    cos_a = np.atleast_1d(np.asarray(cos_a, dtype=np.float64))
    sin_a = np.atleast_1d(np.asarray(sin_a, dtype=np.float64))
    if not (len(ln_s) == len(cos_a) == len(sin_a)):
        raise ValueError("prediction arrays must align")
    if s_star <= 0:
        raise ValueError(f"ground-truth scale must be positive, got {s_star}")
    d_ln = ln_s - np.log(s_star)
    u = cos_a * np.cos(alpha_star) + sin_a * np.sin(alpha_star)
    clamped = np.clip(u, -ACOS_CLAMP, ACOS_CLAMP)
    value = float(np.sum(d_ln**2) + np.sum(np.arccos(clamped)))
    live = (u > -ACOS_CLAMP) & (u < ACOS_CLAMP)
    dacos = np.where(live, -1.0 / np.sqrt(1.0 - clamped**2), 0.0)
    return value, ScaleInplaneGradients(
        ln_s=2.0 * d_ln,
        cos_alpha=dacos * np.cos(alpha_star),
        sin_alpha=dacos * np.sin(alpha_star),
    )


def scale_inplane_loss(
    s_pred: Sequence[float],
    alpha_pred: Sequence[float],
    s_star: float,
    alpha_star: float,
) -> tuple[float, ScaleInplaneGradients]:
    """Summed log-scale squared error plus geodesic angle error.

    Gradients come back in the regressor's native coordinates
    (ln s, cos alpha, sin alpha) per prediction.
    """
    s_pred = np.atleast_1d(np.asarray(s_pred, dtype=np.float64))
    alpha_pred = np.atleast_1d(np.asarray(alpha_pred, dtype=np.float64))
    if len(s_pred) != len(alpha_pred):
        raise ValueError(
            f"{len(s_pred)} scales but {len(alpha_pred)} angles"
        )
    if np.any(s_pred <= 0):
        raise ValueError("predicted scales must be positive")
    return scale_inplane_from_raw(
        np.log(s_pred), np.cos(alpha_pred), np.sin(alpha_pred), s_star, alpha_star
    )
