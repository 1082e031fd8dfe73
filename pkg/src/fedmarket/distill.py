"""Entropy-weighted ensemble distillation.

Student training against a frozen teacher ensemble on unlabeled public data.
Per sample, each teacher is weighted by exp(-entropy) of its predicted
distribution, so confident teachers dominate; teacher logits combine per
output position with weight renormalization over the teachers active there.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import UnlabeledDataset
from .nn import (
    MASK_SENTINEL,
    Mlp,
    PROB_FLOOR,
    _backward,
    _forward_cached,
    entropy,
    entropy_rows,
    forward,
    init_adam,
    adam_step,
    kl_div,
    softmax,
    softmax_rows,
)

# Positions below this threshold are treated as masked-out sentinel values.
_MASK_CUTOFF = MASK_SENTINEL / 2


@dataclass
class DistillConfig:
    alpha: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TeacherEnsemble:
    """Frozen teachers plus the student's active label set they must cover."""

    teachers: list[Mlp]
    target_active: frozenset[int]

    def __post_init__(self) -> None:
        if not self.teachers:
            raise ValueError("ensemble needs at least one teacher")
        for t in self.teachers:
            if not (t.active_labels & self.target_active):
                raise ValueError("a teacher shares no labels with the student")


def teacher_weights(teacher_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Per-teacher weights proportional to exp(-entropy) of each distribution.

    Each logit vector must already be masked (sentinel) outside the teacher's
    active positions intersected with the student's.
    """
    if not teacher_logits:
        raise ValueError("need at least one teacher logit vector")
    ents = []
    for z in teacher_logits:
        active = _unmasked(z)
        ents.append(entropy(softmax(z, active)))
    e = np.exp(-np.asarray(ents))
    return e / e.sum()


def ensemble_logits(
    teacher_logits: Sequence[np.ndarray],
    weights: np.ndarray,
    target_active: frozenset[int] | set[int],
) -> np.ndarray:
    """Weighted per-position combination of teacher logits.

    A teacher contributes to a position only where it is active; weights are
    renormalized per position over the contributing teachers. Positions
    outside ``target_active`` come back as the mask sentinel.
    """
    k = teacher_logits[0].shape[0]
    combined = np.full(k, MASK_SENTINEL)
    for pos in sorted(target_active):
        num = 0.0
        den = 0.0
        for z, w in zip(teacher_logits, weights):
            if z[pos] > _MASK_CUTOFF:
                num += w * z[pos]
                den += w
        if den == 0.0:
            raise ValueError(f"no teacher covers class {pos}")
        combined[pos] = num / den
    return combined


def distill_loss(
    student_logits: np.ndarray,
    teacher_logits: Sequence[np.ndarray],
    alpha: float,
) -> float:
    """Soft KL(student || combined teacher) blended with hard pseudo-label CE."""
    target = _unmasked(student_logits)
    weights = teacher_weights(teacher_logits)
    z_t = ensemble_logits(teacher_logits, weights, target)
    p_s = softmax(student_logits, target)
    p_t = softmax(z_t, target)
    soft = kl_div(p_s, p_t)
    pseudo = int(np.argmax(p_t))  # argmax ties resolve to the lowest class id
    hard = float(-np.log(max(p_s[pseudo], PROB_FLOOR)))
    return alpha * soft + (1.0 - alpha) * hard


def distill_train(
    student: Mlp,
    ensemble: TeacherEnsemble,
    public: UnlabeledDataset,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> Mlp:
    """Train the student against the ensemble on the public pool.

    Teacher weights are recomputed per sample (entropy is input-dependent);
    teachers are never touched. Runs ``cfg.epochs`` shuffled passes and
    returns the student, updated in place.
    """
    if len(public) == 0:
        raise ValueError("public distillation set is empty")
    if ensemble.target_active != student.active_labels:
        raise ValueError("ensemble target does not match the student's active set")
    if cfg.epochs == 0:
        return student
    weight_fn = _entropy_weight_rows
    _distill_epochs(
        student,
        ensemble.teachers,
        weight_fn,
        public,
        cfg.alpha,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        rng,
    )
    return student


def _unmasked(z: np.ndarray) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(z > _MASK_CUTOFF))


def _teacher_slices(
    teachers: Sequence[Mlp], target_index: np.ndarray
) -> list[np.ndarray]:
    """Boolean contributor masks over target positions, one per teacher."""
    slices = []
    for t in teachers:
        active = np.zeros(t.num_classes, dtype=bool)
        active[t.active_index] = True
        slices.append(active[target_index])
    cover = np.logical_or.reduce(slices)
    if not cover.all():
        orphan = int(target_index[np.flatnonzero(~cover)[0]])
        raise ValueError(f"no teacher covers class {orphan}")
    return slices


def _entropy_weight_rows(
    teacher_logits: list[np.ndarray],
    contrib: list[np.ndarray],
    target_index: np.ndarray,
) -> np.ndarray:
    """(n_teachers, batch) entropy-based weights, normalized per sample."""
    ents = []
    for z, mask in zip(teacher_logits, contrib):
        cols = target_index[mask]
        p = softmax_rows(z, cols)
        ents.append(entropy_rows(p[:, cols]))
    h = np.stack(ents)
    e = np.exp(-h)
    return e / e.sum(axis=0, keepdims=True)


def uniform_weight_rows(
    teacher_logits: list[np.ndarray],
    contrib: list[np.ndarray],
    target_index: np.ndarray,
) -> np.ndarray:
    """Uniform per-sample teacher weights (plain logit averaging)."""
    n_t = len(teacher_logits)
    batch = teacher_logits[0].shape[0]
    return np.full((n_t, batch), 1.0 / n_t)


def combine_teacher_rows(
    teacher_logits: list[np.ndarray],
    weights: np.ndarray,
    contrib: list[np.ndarray],
    target_index: np.ndarray,
) -> np.ndarray:
    """Batched per-position weighted combination over contributing teachers."""
    batch = teacher_logits[0].shape[0]
    num = np.zeros((batch, target_index.size))
    den = np.zeros((batch, target_index.size))
    for z, w, mask in zip(teacher_logits, weights, contrib):
        vals = z[:, target_index] * mask[None, :]
        num += w[:, None] * vals
        den += w[:, None] * mask[None, :]
    return num / den


def _distill_epochs(
    student: Mlp,
    teachers: Sequence[Mlp],
    weight_fn: Callable[[list[np.ndarray], list[np.ndarray], np.ndarray], np.ndarray],
    public: UnlabeledDataset,
    alpha: float,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> None:
    """Shared minibatch loop for both weighting schemes; mutates the student."""
    target_index = student.active_index
    contrib = _teacher_slices(teachers, target_index)
    opt = init_adam(student.parameters(), lr=lr)
    n = len(public)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            x = public.features[order[start : start + batch_size]]
            t_logits = [forward(t, x) for t in teachers]
            w = weight_fn(t_logits, contrib, target_index)
            z_t = combine_teacher_rows(t_logits, w, contrib, target_index)
            p_t = _softmax_dense(z_t)
            logits, acts = _forward_cached(student, x)
            p_s = _softmax_dense(logits[:, target_index])
            dz = _loss_grad_rows(p_s, p_t, alpha)
            dlogits = np.zeros_like(logits)
            dlogits[:, target_index] = dz / x.shape[0]
            grads = _backward(student, acts, dlogits)
            adam_step(opt, student.parameters(), grads)


def distill_loss_rows(
    student_logits_active: np.ndarray, teacher_probs: np.ndarray, alpha: float
) -> np.ndarray:
    """Per-sample losses on pre-sliced active columns; used for reporting."""
    p_s = _softmax_dense(student_logits_active)
    log_ratio = np.log(np.maximum(p_s, PROB_FLOOR)) - np.log(
        np.maximum(teacher_probs, PROB_FLOOR)
    )
    soft = (p_s * log_ratio).sum(axis=1)
    pseudo = np.argmax(teacher_probs, axis=1)
    rows = np.arange(p_s.shape[0])
    hard = -np.log(np.maximum(p_s[rows, pseudo], PROB_FLOOR))
    return alpha * soft + (1.0 - alpha) * hard


def _loss_grad_rows(p_s: np.ndarray, p_t: np.ndarray, alpha: float) -> np.ndarray:
    """d(loss)/d(student active logits), per row (not yet averaged)."""
    log_ratio = np.log(np.maximum(p_s, PROB_FLOOR)) - np.log(np.maximum(p_t, PROB_FLOOR))
    kl_row = (p_s * log_ratio).sum(axis=1, keepdims=True)
    grad = alpha * p_s * (log_ratio - kl_row)
    if alpha < 1.0:
        pseudo = np.argmax(p_t, axis=1)
        hard = p_s.copy()
        hard[np.arange(p_s.shape[0]), pseudo] -= 1.0
        grad = grad + (1.0 - alpha) * hard
    return grad


def _softmax_dense(z: np.ndarray) -> np.ndarray:
    zz = z - z.max(axis=1, keepdims=True)
    e = np.exp(zz)
    return e / e.sum(axis=1, keepdims=True)
