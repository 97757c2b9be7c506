"""Dual-student distillation objective.

One linear head serves both roles: teacher logits are centered and sharpened
with an annealed temperature, entirely off-tape; student logits stay on tape
so gradients reach the encoder, head, offsets, and adapters.  Per-view loss
is the visibility-masked, size-normalized KL from the teacher distribution to
the student one.

The reported value is the true KL (teacher entropy included); since the
teacher side is constant, gradients equal those of plain cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numeric import ShapeError, Tensor, ops
from .numeric.tree import tree_map

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    n_prototypes: int = 256
    tau_s: float = 0.1
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_frac: float = 0.3     # fraction of training over which tau_T anneals
    lambda1_start: float = 0.5
    lambda1_end: float = 1.0
    lambda2_start: float = 1.0
    lambda2_end: float = 0.5
    lambda_g: float = 1.0       # weight of the swapped-Global student term
    w_agree: float = 0.0
    rho_center: float = 0.9
    m_start: float = 0.996
    m_end: float = 0.999


@dataclass(frozen=True)
class ScheduleValues:
    lambda1: float
    lambda2: float
    tau_t: float
    m: float


def schedule(step: int, total_steps: int, config: DistillConfig) -> ScheduleValues:
    """Progressive weights: Local emphasis early, Mid late; teacher sharpens
    over the first tau_t_frac of training; EMA momentum rises on a cosine."""
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    lam1 = config.lambda1_start + (config.lambda1_end - config.lambda1_start) * frac
    lam2 = config.lambda2_start + (config.lambda2_end - config.lambda2_start) * frac
    tfrac = min(frac / config.tau_t_frac, 1.0) if config.tau_t_frac > 0 else 1.0
    tau_t = config.tau_t_start + (config.tau_t_end - config.tau_t_start) * tfrac
    m = config.m_end - (config.m_end - config.m_start) * (np.cos(np.pi * frac) + 1.0) / 2.0
    return ScheduleValues(lam1, lam2, tau_t, float(m))


# -- distributions -----------------------------------------------------------

def head_logits(z, head: Tensor) -> Tensor:
    """Per-token prototype logits l = Z H^T; taped iff the inputs are."""
    if head.ndim != 2:
        raise ShapeError(f"head must be (K, d), got {head.shape}")
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if z.shape[-1] != head.shape[1]:
        raise ShapeError(f"features {z.shape} vs head {head.shape}")
    return ops.matmul(z, ops.transpose(head, (1, 0)))


def teacher_distribution(logits: np.ndarray, center: np.ndarray,
                         tau_t: float) -> np.ndarray:
    """Centered, sharpened teacher targets; plain arrays, never taped."""
    if tau_t <= 0:
        raise ValueError(f"tau_t must be > 0, got {tau_t}")
    z = (np.asarray(logits) - np.asarray(center)) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_distribution(logits: Tensor, tau_s: float) -> Tensor:
    return ops.softmax_tempered(logits, tau_s, axis=-1)


# -- losses ------------------------------------------------------------------

def masked_kl(q: np.ndarray, p: Tensor, mask_bits: np.ndarray) -> Tensor:
    """Size-normalized sum_i m_i KL(q_i || p_i) over one view's tokens.

    q rows with zero entries contribute nothing there; logs are floored at
    1e-12.  An all-zero mask is a caller error: such views must be skipped.
    """
    q = np.asarray(q, dtype=np.float64)
    mask = np.asarray(mask_bits, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("masked_kl: empty visibility mask, exclude this view")
    if q.shape != p.shape or q.shape[:-1] != mask.shape:
        raise ShapeError(f"masked_kl: q {q.shape}, p {p.shape}, mask {mask.shape}")
    log_q = np.log(np.maximum(q, _LOG_FLOOR))
    weighted_q = q * (mask / count)[..., None]
    log_p = ops.log(ops.maximum_const(p, _LOG_FLOOR))
    const_part = np.asarray((weighted_q * log_q).sum())
    return ops.sub(Tensor(const_part), ops.tsum(ops.mul(Tensor(weighted_q), log_p)))


def masked_kl_group(q: np.ndarray, p: Tensor, masks: np.ndarray) -> Tensor:
    """Mean of per-view masked KL over a (V, N, K) group; every view in the
    group must have a nonempty mask (callers filter first)."""
    q = np.asarray(q, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    counts = masks.sum(axis=-1)
    if (counts == 0).any():
        raise ValueError("masked_kl_group: empty mask in group")
    v = q.shape[0]
    weights = masks / counts[:, None] / v
    log_q = np.log(np.maximum(q, _LOG_FLOOR))
    weighted_q = q * weights[..., None]
    log_p = ops.log(ops.maximum_const(p, _LOG_FLOOR))
    const_part = np.asarray((weighted_q * log_q).sum())
    return ops.sub(Tensor(const_part), ops.tsum(ops.mul(Tensor(weighted_q), log_p)))


def masked_kl_visible(q_vis: np.ndarray, p_vis: Tensor, row_of: np.ndarray,
                      counts: np.ndarray, n_rows: int) -> Tensor:
    """masked_kl_group restricted to the visible tokens, pre-gathered.

    q_vis, p_vis: (Nv, K) teacher and student rows for every visible
    (view, position) pair; row_of maps each pair to its view; counts holds
    each view's visible-position count.  Same value as masked_kl_group on
    the dense layout (masked-out terms are exact zeros there), at the cost
    of the visible subset only.
    """
    q_vis = np.asarray(q_vis, dtype=np.float64)
    if q_vis.shape != p_vis.shape:
        raise ShapeError(f"masked_kl_visible: q {q_vis.shape} vs p {p_vis.shape}")
    if (np.asarray(counts) == 0).any():
        raise ValueError("masked_kl_visible: empty view in group")
    w = 1.0 / (np.asarray(counts, dtype=np.float64)[row_of] * n_rows)
    log_q = np.log(np.maximum(q_vis, _LOG_FLOOR))
    weighted_q = q_vis * w[:, None]
    log_p = ops.log(ops.maximum_const(p_vis, _LOG_FLOOR))
    const_part = np.asarray((weighted_q * log_q).sum())
    return ops.sub(Tensor(const_part), ops.tsum(ops.mul(Tensor(weighted_q), log_p)))


def symmetric_agreement(p_a: Tensor, p_b: Tensor,
                        overlap_bits: np.ndarray) -> Tensor:
    """Half of each direction's masked KL with the target stop-gradded;
    empty overlap contributes an exact zero."""
    if int(np.asarray(overlap_bits).sum()) == 0:
        return Tensor(np.asarray(0.0))
    kl_ab = masked_kl(p_a.data, p_b, overlap_bits)
    kl_ba = masked_kl(p_b.data, p_a, overlap_bits)
    return ops.mul(ops.add(kl_ab, kl_ba), 0.5)


def total_loss(loss_gg: Optional[Tensor], loss_gm: Optional[Tensor],
               loss_gl: Optional[Tensor], loss_agree: Optional[Tensor],
               sched: ScheduleValues, config: DistillConfig) -> Tensor:
    """Weighted combination; absent groups simply drop out."""
    total = None
    for term, weight in ((loss_gg, config.lambda_g),
                         (loss_gm, sched.lambda1),
                         (loss_gl, sched.lambda2),
                         (loss_agree, config.w_agree)):
        if term is None:
            continue
        piece = ops.mul(term, float(weight))
        total = piece if total is None else ops.add(total, piece)
    if total is None:
        raise ValueError("total_loss: no view contributed")
    return total


# -- running state -----------------------------------------------------------

def update_center(center: np.ndarray, teacher_logits: np.ndarray,
                  rho_center: float) -> np.ndarray:
    """EMA of the batch-token mean of teacher logits."""
    if not 0.0 <= rho_center <= 1.0:
        raise ValueError(f"rho_center out of range: {rho_center}")
    flat = np.asarray(teacher_logits).reshape(-1, center.shape[0])
    return rho_center * center + (1.0 - rho_center) * flat.mean(axis=0)


def ema_update(teacher, student, m: float):
    """Elementwise EMA over mirrored parameter trees; m=0 copies the student,
    m=1 leaves the teacher untouched."""
    if m == 1.0:
        return teacher
    if m == 0.0:
        return tree_map(lambda s: Tensor(s.data.copy()), student)
    return tree_map(lambda t, s: Tensor(m * t.data + (1.0 - m) * s.data),
                    teacher, student)
