"""Minimal dense neural-network engine.

MLP forward/backward, masked softmax, entropy/KL/cross-entropy kernels and a
bias-corrected Adam optimizer. Every model predicts over a single global
K-way label universe; a per-model set of active labels masks the positions
the model actually serves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Large negative sentinel standing in for -inf at inactive output positions.
# Kept finite so downstream arithmetic never produces NaNs.
MASK_SENTINEL = -1e9

# Probabilities are clamped at this floor inside every log.
PROB_FLOOR = 1e-12


@dataclass
class Mlp:
    """Fully connected ReLU network over the global K-way output.

    ``dims`` is ``[input_dim, hidden..., K]``. ``active_labels`` is the set of
    output positions this model serves; :func:`forward` forces all other
    positions to ``MASK_SENTINEL`` and they carry exactly zero probability.
    """

    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    active_labels: frozenset[int]

    def __post_init__(self) -> None:
        if len(self.dims) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if not self.active_labels:
            raise ValueError("active_labels must be nonempty")
        k = self.dims[-1]
        bad = [c for c in self.active_labels if not 0 <= c < k]
        if bad:
            raise ValueError(f"active labels {sorted(bad)} outside output range [0, {k})")

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    @property
    def active_index(self) -> np.ndarray:
        """Sorted active label ids as an index array."""
        return np.array(sorted(self.active_labels), dtype=np.intp)

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


def init_mlp(
    input_dim: int,
    hidden: list[int],
    num_classes: int,
    active_labels: frozenset[int] | set[int],
    rng: np.random.Generator,
) -> Mlp:
    """He-initialized MLP with zero biases, deterministic per ``rng`` state."""
    dims = [input_dim, *hidden, num_classes]
    weights = []
    biases = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return Mlp(dims, weights, biases, frozenset(active_labels))


def clone_model(model: Mlp) -> Mlp:
    return Mlp(
        list(model.dims),
        [w.copy() for w in model.weights],
        [b.copy() for b in model.biases],
        model.active_labels,
    )


def forward(model: Mlp, batch: np.ndarray) -> np.ndarray:
    """Logits for a (batch, input_dim) matrix, masked at inactive positions."""
    logits, _ = _forward_cached(model, batch)
    return logits


def _forward_cached(model: Mlp, batch: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping post-activation layer inputs for backprop."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ValueError(
            f"batch shape {x.shape} incompatible with model input dim {model.dims[0]}"
        )
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    inactive = _inactive_index(model)
    if inactive.size:
        h[:, inactive] = MASK_SENTINEL
    return h, acts


def _inactive_index(model: Mlp) -> np.ndarray:
    mask = np.ones(model.num_classes, dtype=bool)
    mask[model.active_index] = False
    return np.flatnonzero(mask)


def _backward(model: Mlp, acts: list[np.ndarray], dlogits: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dL/dlogits.

    ``dlogits`` must already be zero at inactive columns; the mask is a
    constant substitution, so no gradient flows through those positions.
    """
    grads_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grads_b: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    return grads_w + grads_b


def softmax(logits: np.ndarray, active: frozenset[int] | set[int]) -> np.ndarray:
    """Stabilized softmax over the active positions of a single logit vector.

    Inactive positions come back as exactly 0.
    """
    if not active:
        raise ValueError("softmax needs at least one active position")
    z = np.asarray(logits, dtype=float)
    idx = np.array(sorted(active), dtype=np.intp)
    za = z[idx]
    za = za - za.max()
    ex = np.exp(za)
    out = np.zeros_like(z)
    out[idx] = ex / ex.sum()
    return out


def softmax_rows(logits: np.ndarray, active_index: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax for a (batch, K) logit matrix."""
    za = logits[:, active_index]
    za = za - za.max(axis=1, keepdims=True)
    ex = np.exp(za)
    probs = np.zeros_like(logits)
    probs[:, active_index] = ex / ex.sum(axis=1, keepdims=True)
    return probs


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with the 0*log(0) = 0 convention."""
    q = np.asarray(p, dtype=float)
    logs = np.log(np.maximum(q, PROB_FLOOR))
    return float(-(q * logs).sum())


def entropy_rows(p: np.ndarray) -> np.ndarray:
    logs = np.log(np.maximum(p, PROB_FLOOR))
    return -(p * logs).sum(axis=1)


def kl_div(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; q is clamped at the probability floor where p > 0."""
    pa = np.asarray(p, dtype=float)
    qa = np.maximum(np.asarray(q, dtype=float), PROB_FLOOR)
    support = pa > 0.0
    return float((pa[support] * np.log(pa[support] / qa[support])).sum())


@dataclass
class AdamState:
    """Per-parameter first/second moments plus hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: list[np.ndarray], lr: float = 0.001) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(grads) != len(params):
        raise ValueError("gradient count does not match parameter count")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


def cross_entropy_grad(
    model: Mlp, logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the masked softmax and its logit gradient."""
    idx = model.active_index
    probs = softmax_rows(logits, idx)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def train_step(
    model: Mlp, opt: AdamState, batch: np.ndarray, labels: np.ndarray
) -> float:
    """One Adam step on mean cross-entropy; returns the pre-step loss."""
    y = np.asarray(labels)
    outside = set(np.unique(y).tolist()) - set(model.active_labels)
    if outside:
        raise ValueError(f"labels {sorted(outside)} outside the model's active set")
    logits, acts = _forward_cached(model, batch)
    loss, dlogits = cross_entropy_grad(model, logits, y)
    grads = _backward(model, acts, dlogits)
    adam_step(opt, model.parameters(), grads)
    return loss


def save_model(model: Mlp, path: str | Path) -> None:
    """Write a checkpoint as self-describing JSON.

    Schema: ``{"format": "fedmarket-mlp", "version": 1, "dims": [...],
    "active_labels": [...], "layers": [{"w": flat list, "b": list}, ...]}``
    with weights flattened row-major.
    """
    doc = {
        "format": "fedmarket-mlp",
        "version": 1,
        "dims": list(model.dims),
        "active_labels": sorted(model.active_labels),
        "layers": [
            {"w": w.ravel().tolist(), "b": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path: str | Path) -> Mlp:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "fedmarket-mlp":
        raise ValueError(f"{path}: not a fedmarket-mlp checkpoint")
    dims = [int(d) for d in doc["dims"]]
    weights = []
    biases = []
    for (d_in, d_out), layer in zip(zip(dims[:-1], dims[1:]), doc["layers"]):
        weights.append(np.array(layer["w"], dtype=float).reshape(d_in, d_out))
        biases.append(np.array(layer["b"], dtype=float))
    return Mlp(dims, weights, biases, frozenset(int(c) for c in doc["active_labels"]))
