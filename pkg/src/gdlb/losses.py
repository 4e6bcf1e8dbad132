"""Distillation and language-model losses over masked positions."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

WARNINGS: Counter = Counter()


def _rows(logits: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Select the masked rows of ``logits[..., V]`` as ``[n, V]``."""
    V = logits.shape[-1]
    lead = logits.shape[:-1]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ContractError(f"mask {mask.shape} does not align with logits {logits.shape}")
    idx = np.flatnonzero(mask.reshape(-1))
    flat = T.reshape(logits, (-1, V))
    return flat[idx], idx


def _zero(like: Tensor, what: str) -> Tensor:
    WARNINGS[what] += 1
    return T.scale(T.sum(like), 0.0)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def kd_loss(teacher_logits, student_logits: Tensor, loss_mask: np.ndarray, temperature: float = 1.0,
            top_k: int | None = None, alpha_ce: float = 0.0, labels: np.ndarray | None = None) -> Tensor:
    """Mean over masked positions of ``KL(teacher || student)`` at temperature
    ``tau`` (no ``tau**2`` factor), plus ``alpha_ce`` times label cross-entropy.

    With ``top_k`` the teacher is truncated to its ``k`` most likely tokens and
    renormalized; the student's full-vocabulary log-probs are read on that
    support.  An empty mask gives 0 and bumps ``WARNINGS['kd_empty_mask']``.
    """
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    tl = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if tl.shape != student_logits.shape:
        raise ContractError(f"teacher logits {tl.shape} vs student {student_logits.shape}")
    rows, idx = _rows(student_logits, loss_mask)
    n = len(idx)
    if n == 0:
        return _zero(student_logits, "kd_empty_mask")
    V = tl.shape[-1]
    t = tl.reshape(-1, V)[idx].astype(np.float64) / temperature
    logq = T.log_softmax(rows, temperature)
    if top_k is not None and top_k < V:
        sup = np.argsort(-t, axis=-1, kind="stable")[:, :top_k]
        p = _softmax_np(np.take_along_axis(t, sup, -1))
        logq_s = T.take_last(logq, sup)
    else:
        p = _softmax_np(t)
        logq_s = logq
    with np.errstate(divide="ignore"):
        plogp = float(np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))
    cross = T.sum(T.mul(logq_s, T.tensor(p.astype(logq.dtype))))
    loss = T.scale(T.sub(plogp, cross), 1.0 / n)
    if alpha_ce:
        if labels is None:
            raise ContractError("alpha_ce > 0 requires labels")
        loss = T.add(loss, T.scale(sft_loss(student_logits, labels, loss_mask), alpha_ce))
    return loss


def sft_loss(student_logits: Tensor, labels: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Masked mean cross-entropy against hard ``labels`` (same shape as mask)."""
    rows, idx = _rows(student_logits, loss_mask)
    if len(idx) == 0:
        return _zero(student_logits, "sft_empty_mask")
    lab = np.asarray(labels).reshape(-1)[idx]
    logq = T.log_softmax(rows)
    picked = T.take_last(logq, lab[:, None])
    return T.scale(T.sum(picked), -1.0 / len(idx))


def masked_mse(student: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over the selected positions of ``[..., d]`` features."""
    d = student.shape[-1]
    target = np.asarray(target, dtype=student.dtype)
    if mask is None:
        mask = np.ones(student.shape[:-1], dtype=bool)
    rows, idx = _rows(student, mask)
    if len(idx) == 0:
        return _zero(student, "mse_empty_mask")
    diff = T.sub(rows, T.tensor(target.reshape(-1, d)[idx]))
    return T.scale(T.sum(T.mul(diff, diff)), 1.0 / (len(idx) * d))


def lm_targets(tokens: np.ndarray, target_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and mask aligned with logits ``[B, T]``: logit ``t`` predicts
    ``tokens[t+1]``; the final position never counts."""
    B, Tn = tokens.shape
    labels = np.zeros((B, Tn), dtype=np.int64)
    labels[:, :-1] = tokens[:, 1:]
    mask = np.zeros((B, Tn), dtype=bool)
    mask[:, :-1] = target_mask
    return labels, mask
