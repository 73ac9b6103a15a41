"""GRU encoder with additive attention pooling, linear heads, losses, and exact gradients.

Conventions fixed here so hand-written oracles can reproduce every number:

* GRU gates, stacked in the order update (z), reset (r), candidate (c):
      z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
      r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
      c_t = tanh(W_c x_t + U_c (r_t * h_{t-1}) + b_c)
      h_t = (1 - z_t) * h_{t-1} + z_t * c_t,   h_0 = 0
* Attention over hidden states with a single learned context vector p:
      e_t = p . tanh(W_alpha h_t),  alpha = softmax(e),  pooled = sum_t alpha_t h_t
* Outcome head: probs = softmax(pooled @ W_l + b_l), slot 0 = pass.
* Outcome loss per student (two-term form over the 2-way softmax):
      -(y . log probs + (1 - y) . log(1 - probs)),  y one-hot with pass in slot 0.
* Masked-activity head: softmax(pooled @ W_p + b_p) scored by mean squared error
  against the original activity vector.

Dropout (inverted scaling) is applied to the pooled vector before the outcome
head only, and only when a mask is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activity import EncodedActivity, sequence_matrix
from .params import Gradients, ModelParams

PROB_CLAMP = 1e-12


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    ex = np.exp(shifted)
    return ex / ex.sum()


def _as_matrix(sequence) -> np.ndarray:
    if isinstance(sequence, np.ndarray):
        return sequence
    if sequence and isinstance(sequence[0], EncodedActivity):
        return sequence_matrix(sequence)
    return np.asarray(sequence, dtype=np.float64)


@dataclass
class GruCache:
    """Per-timestep quantities retained for backpropagation through time."""

    X: np.ndarray       # (L, d) inputs
    Z: np.ndarray       # (L, k) update gates
    R: np.ndarray       # (L, k) reset gates
    C: np.ndarray       # (L, k) candidates
    H: np.ndarray       # (L, k) hidden states


@dataclass
class AttnCache:
    A: np.ndarray       # (L, k) tanh(H @ W_alpha^T)
    alpha: np.ndarray   # (L,) attention weights
    pooled: np.ndarray  # (k,)


@dataclass
class ForwardTrace:
    """Everything a forward pass computed, sufficient for an exact backward pass."""

    hidden_dim: int
    input_dim: int
    gru: GruCache
    attn: AttnCache
    dropout_mask: np.ndarray | None = None
    pooled_final: np.ndarray | None = None   # pooled after dropout (outcome path)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    pre_logits: np.ndarray | None = None     # masked-activity head (pretraining path)
    pre_probs: np.ndarray | None = None

    @property
    def hidden_states(self) -> np.ndarray:
        return self.gru.H

    @property
    def attention_weights(self) -> np.ndarray:
        return self.attn.alpha

    @property
    def pooled(self) -> np.ndarray:
        return self.attn.pooled


def _run_gru(params: ModelParams, X: np.ndarray) -> GruCache:
    k = params.hidden_dim
    W_in = params["gru.input_weights"]
    U = params["gru.recurrent_weights"]
    b = params["gru.biases"]
    L = X.shape[0]
    if X.shape[1] != params.input_dim:
        raise ValueError(f"input width {X.shape[1]} does not match model input_dim {params.input_dim}")
    XW = X @ W_in.T + b          # (L, 3k), biases folded in
    U_zr = U[: 2 * k]
    U_c = U[2 * k:]
    Z = np.empty((L, k))
    R = np.empty((L, k))
    C = np.empty((L, k))
    H = np.empty((L, k))
    h = np.zeros(k)
    for t in range(L):
        zr = _sigmoid(XW[t, : 2 * k] + U_zr @ h)
        z = zr[:k]
        r = zr[k:]
        c = np.tanh(XW[t, 2 * k:] + U_c @ (r * h))
        h = (1.0 - z) * h + z * c
        Z[t] = z
        R[t] = r
        C[t] = c
        H[t] = h
    return GruCache(X=X, Z=Z, R=R, C=C, H=H)


def gru_forward(params: ModelParams, sequence) -> np.ndarray:
    """Hidden states (L, k) for a non-empty encoded sequence."""
    X = _as_matrix(sequence)
    if X.shape[0] == 0:
        raise ValueError("sequence must be non-empty")
    return _run_gru(params, X).H


def _run_attention(params: ModelParams, H: np.ndarray) -> AttnCache:
    A = np.tanh(H @ params["attn.W_alpha"].T)
    e = A @ params["attn.p"]
    alpha = _softmax(e)
    pooled = alpha @ H
    return AttnCache(A=A, alpha=alpha, pooled=pooled)


def attention_pool(params: ModelParams, states) -> tuple[np.ndarray, np.ndarray]:
    """Pooled representation and attention weights over hidden states."""
    H = np.asarray(states, dtype=np.float64)
    if H.shape[0] == 0:
        raise ValueError("states must be non-empty")
    cache = _run_attention(params, H)
    return cache.pooled, cache.alpha


def predict_outcome(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    """Pass/fail probability pair from a pooled representation."""
    logits = pooled @ params["head.W_l"] + params["head.b_l"]
    return _softmax(logits)


def make_dropout_mask(rng: np.random.Generator, hidden_dim: int, rate: float) -> np.ndarray | None:
    """Inverted-scaling dropout mask; None when the rate is zero."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(hidden_dim) >= rate).astype(np.float64) / keep


def forward_outcome(
    params: ModelParams,
    sequence,
    dropout_mask: np.ndarray | None = None,
) -> ForwardTrace:
    """Full forward pass to outcome probabilities, caching intermediates."""
    X = _as_matrix(sequence)
    if X.shape[0] == 0:
        raise ValueError("sequence must be non-empty")
    gru = _run_gru(params, X)
    attn = _run_attention(params, gru.H)
    pooled = attn.pooled if dropout_mask is None else attn.pooled * dropout_mask
    logits = pooled @ params["head.W_l"] + params["head.b_l"]
    probs = _softmax(logits)
    return ForwardTrace(
        hidden_dim=params.hidden_dim,
        input_dim=params.input_dim,
        gru=gru,
        attn=attn,
        dropout_mask=dropout_mask,
        pooled_final=pooled,
        logits=logits,
        probs=probs,
    )


def forward_pretrain(params: ModelParams, masked_sequence) -> ForwardTrace:
    """Forward pass of the masked-activity prediction path (no dropout)."""
    X = _as_matrix(masked_sequence)
    if X.shape[0] == 0:
        raise ValueError("sequence must be non-empty")
    gru = _run_gru(params, X)
    attn = _run_attention(params, gru.H)
    pre_logits = attn.pooled @ params["pretrain.W_p"] + params["pretrain.b_p"]
    pre_probs = _softmax(pre_logits)
    return ForwardTrace(
        hidden_dim=params.hidden_dim,
        input_dim=params.input_dim,
        gru=gru,
        attn=attn,
        pre_logits=pre_logits,
        pre_probs=pre_probs,
    )


def _label_onehot(label: int) -> np.ndarray:
    # Slot 0 carries the pass class.
    return np.array([1.0, 0.0]) if label == 1 else np.array([0.0, 1.0])


def outcome_loss(probs: np.ndarray, label: int) -> float:
    """Two-term cross entropy of one probability pair against a binary label."""
    y = _label_onehot(label)
    pc = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(y @ np.log(pc) + (1.0 - y) @ np.log(1.0 - pc)))


def bce_loss(predictions, labels) -> float:
    """Sum of per-student outcome losses over a cohort."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels must have equal length")
    return sum(outcome_loss(np.asarray(p, dtype=np.float64), y) for p, y in zip(predictions, labels))


def pretrain_loss(pre_probs: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error between the predicted and original activity vector."""
    diff = pre_probs - target
    return float(diff @ diff) / diff.shape[0]


def _check_trace(trace: ForwardTrace, params: ModelParams, need: str) -> None:
    if trace.hidden_dim != params.hidden_dim or trace.input_dim != params.input_dim:
        raise ValueError("trace does not match the supplied parameters")
    if need == "outcome" and trace.probs is None:
        raise ValueError("trace was not produced by an outcome forward pass")
    if need == "pretrain" and trace.pre_probs is None:
        raise ValueError("trace was not produced by a masked-activity forward pass")


def _softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - float(grad_probs @ probs))


def _backward_shared(
    params: ModelParams,
    trace: ForwardTrace,
    grad_pooled: np.ndarray,
    grads: Gradients,
) -> None:
    """Backpropagate a gradient at the pooled vector through attention and the GRU."""
    k = params.hidden_dim
    gru = trace.gru
    attn = trace.attn
    H = gru.H
    L = H.shape[0]

    # Attention: pooled = alpha @ H with alpha = softmax(A @ p), A = tanh(H W_alpha^T).
    galpha = H @ grad_pooled
    ge = attn.alpha * (galpha - float(attn.alpha @ galpha))
    grads["attn.p"] += attn.A.T @ ge
    Gpre = (ge[:, None] * (1.0 - attn.A ** 2)) * params["attn.p"][None, :]
    grads["attn.W_alpha"] += Gpre.T @ H
    GH = attn.alpha[:, None] * grad_pooled[None, :] + Gpre @ params["attn.W_alpha"]

    # GRU backpropagation through time.
    U = params["gru.recurrent_weights"]
    U_zr = U[: 2 * k]
    U_c = U[2 * k:]
    dgates = np.empty((L, 3 * k))
    gh = np.zeros(k)
    for t in range(L - 1, -1, -1):
        gh = gh + GH[t]
        hp = H[t - 1] if t > 0 else np.zeros(k)
        z = gru.Z[t]
        r = gru.R[t]
        c = gru.C[t]
        dz_raw = gh * (c - hp) * z * (1.0 - z)
        dc_raw = gh * z * (1.0 - c * c)
        tmp = U_c.T @ dc_raw
        dr_raw = tmp * hp * r * (1.0 - r)
        dgates[t, :k] = dz_raw
        dgates[t, k: 2 * k] = dr_raw
        dgates[t, 2 * k:] = dc_raw
        gh = gh * (1.0 - z) + tmp * r + U_zr.T @ dgates[t, : 2 * k]

    Hprev = np.vstack([np.zeros((1, k)), H[:-1]])
    grads["gru.input_weights"] += dgates.T @ gru.X
    grads["gru.recurrent_weights"][: 2 * k] += dgates[:, : 2 * k].T @ Hprev
    grads["gru.recurrent_weights"][2 * k:] += dgates[:, 2 * k:].T @ (gru.R * Hprev)
    grads["gru.biases"] += dgates.sum(axis=0)


def backward(trace: ForwardTrace, label: int, params: ModelParams) -> Gradients:
    """Exact gradients of the per-student outcome loss with respect to every layer."""
    _check_trace(trace, params, "outcome")
    grads = params.zeros_like()
    y = _label_onehot(label)
    probs = trace.probs
    pc = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    grad_probs = -y / pc + (1.0 - y) / (1.0 - pc)
    grad_probs = np.where(probs == pc, grad_probs, 0.0)  # clamp region is flat
    g_logits = _softmax_backward(probs, grad_probs)
    grads["head.W_l"] += np.outer(trace.pooled_final, g_logits)
    grads["head.b_l"] += g_logits
    grad_pooled = params["head.W_l"] @ g_logits
    if trace.dropout_mask is not None:
        grad_pooled = grad_pooled * trace.dropout_mask
    _backward_shared(params, trace, grad_pooled, grads)
    return grads


def backward_pretrain(trace: ForwardTrace, target: np.ndarray, params: ModelParams) -> Gradients:
    """Exact gradients of the masked-activity MSE with respect to every layer."""
    _check_trace(trace, params, "pretrain")
    grads = params.zeros_like()
    d = target.shape[0]
    grad_probs = 2.0 * (trace.pre_probs - target) / d
    g_logits = _softmax_backward(trace.pre_probs, grad_probs)
    grads["pretrain.W_p"] += np.outer(trace.pooled, g_logits)
    grads["pretrain.b_p"] += g_logits
    grad_pooled = params["pretrain.W_p"] @ g_logits
    _backward_shared(params, trace, grad_pooled, grads)
    return grads
