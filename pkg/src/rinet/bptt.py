"""Unrolled sequence forward pass, losses, exact BPTT, and gradient clipping.

The sequence layout is (T, B, D): steps x batch x features.  A model is a
stack of identical-architecture cells (layer l feeds its per-step output to
layer l+1) topped by a linear head applied to the final step of the top
layer; classification heads append a row-wise softmax.  Losses read the
final step only, so the upstream gradient enters BPTT at t = T of the top
layer and every other step receives gradient solely through recurrence or
through the layer above.

The per-layer scans here are algebraically identical to chaining the step
functions in `cells`, but batch the input projections and the parameter-
gradient contractions over all T steps for speed.  Equality with the
step-by-step path is pinned by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cells as _cells
from .cells import (
    DeepTransitionParams,
    GatedCellParams,
    LstmCellParams,
    PlainCellParams,
)
from .errors import ConfigError, DomainError, ShapeError, StateError
from .numerics import sigmoid, softmax_rows

LOSS_KINDS = ("mse", "softmax_cross_entropy")
HEAD_KINDS = ("regression", "classification")


@dataclass
class SequenceBatch:
    """Inputs (T, B, D) with optional per-step mask (T, B) and one target per
    sequence: regression targets (B, 1) or integer class labels (B,)."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ShapeError(f"inputs must be (T, B, D), got {self.inputs.shape}")
        t, b, d = self.inputs.shape
        if t < 1 or b < 1 or d < 1:
            raise ShapeError(f"inputs dims must all be >= 1, got {self.inputs.shape}")
        if self.mask is not None:
            if self.mask.shape != (t, b):
                raise ShapeError(f"mask shape {self.mask.shape} != {(t, b)}")
            marks = (self.mask != 0).sum(axis=0)
            if not np.all(marks == 2):
                raise ShapeError("mask must have exactly two nonzero entries per batch element")
        if self.targets.shape[0] != b:
            raise ShapeError(f"targets batch {self.targets.shape[0]} != {b}")

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[1]


@dataclass
class Model:
    """A stack of same-architecture cells plus the task head."""

    arch: str
    cells: list
    head_w: np.ndarray  # (H, K)
    head_b: np.ndarray  # (1, K)
    head: str = "regression"

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if not self.cells:
            raise ConfigError("model needs at least one recurrent layer")

    @property
    def num_layers(self) -> int:
        return len(self.cells)

    @property
    def hidden_size(self) -> int:
        return self.cells[0].hidden_size

    @property
    def input_size(self) -> int:
        return self.cells[0].input_size

    @property
    def output_size(self) -> int:
        return self.head_w.shape[1]

    def param_blocks(self) -> dict[str, np.ndarray]:
        """Trainable blocks in a fixed deterministic order (the identity
        surrogate is not a block; it has no gradient)."""
        out = {}
        for idx, cell in enumerate(self.cells):
            for name, arr in cell.blocks().items():
                out[f"layer{idx}.{name}"] = arr
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


@dataclass
class GradientSet:
    """One gradient array per trainable block, keyed like Model.param_blocks."""

    blocks: dict[str, np.ndarray]
    clip_stat: Optional[float] = None

    def global_norm(self) -> float:
        total = 0.0
        for g in self.blocks.values():
            total += float(np.sum(g * g))
        return math.sqrt(total)

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({k: g * factor for k, g in self.blocks.items()}, self.clip_stat)


# ---------------------------------------------------------------------------
# layer caches
# ---------------------------------------------------------------------------


@dataclass
class PlainLayerCache:
    params: PlainCellParams
    inputs: np.ndarray  # (T, B, D)
    states: np.ndarray  # (T+1, B, H), states[0] = 0


@dataclass
class LstmLayerCache:
    params: LstmCellParams
    inputs: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray       # (T+1, B, H)
    h: np.ndarray       # (T+1, B, H)
    tanh_c: np.ndarray


@dataclass
class GatedLayerCache:
    params: GatedCellParams
    inputs: np.ndarray
    hidden: np.ndarray     # H_t, (T, B, H)
    transform: np.ndarray  # T_t
    carry: np.ndarray      # C_t
    states: np.ndarray     # (T+1, B, H)


@dataclass
class DtLayerCache:
    params: DeepTransitionParams
    inputs: np.ndarray
    h_mid: np.ndarray
    states: np.ndarray


@dataclass
class UnrollCache:
    """Forward intermediates for one unrolled pass (one batch, all layers)."""

    model: Model
    steps: int
    layer_caches: list
    top_final: np.ndarray          # h_T of top layer, (B, H)
    outputs: np.ndarray            # head outputs (B, K)
    probabilities: Optional[np.ndarray] = None  # classification only

    def __post_init__(self):
        for lc in self.layer_caches:
            states = lc.states if hasattr(lc, "states") else lc.h
            assert states.shape[0] == self.steps + 1
            assert not states[0].any(), "h_0 must be the zero void state"


def _forward_plain(params: PlainCellParams, inputs: np.ndarray) -> PlainLayerCache:
    t_steps, b, _ = inputs.shape
    hsz = params.hidden_size
    r = params.recurrent_matrix()
    xproj = inputs.reshape(t_steps * b, -1) @ params.W + params.b
    xproj = xproj.reshape(t_steps, b, hsz)
    states = np.zeros((t_steps + 1, b, hsz))
    for t in range(t_steps):
        states[t + 1] = np.maximum(xproj[t] + states[t] @ r, 0.0)
    return PlainLayerCache(params, inputs, states)


def _forward_lstm(params: LstmCellParams, inputs: np.ndarray) -> LstmLayerCache:
    t_steps, b, _ = inputs.shape
    hsz = params.hidden_size
    w_all, u_all, b_all = params.concat()
    base = (inputs.reshape(t_steps * b, -1) @ w_all + b_all).reshape(t_steps, b, 4 * hsz)
    i = np.empty((t_steps, b, hsz))
    f = np.empty_like(i)
    g = np.empty_like(i)
    o = np.empty_like(i)
    tanh_c = np.empty_like(i)
    c = np.zeros((t_steps + 1, b, hsz))
    h = np.zeros((t_steps + 1, b, hsz))
    for t in range(t_steps):
        a = base[t] + h[t] @ u_all
        i[t] = sigmoid(a[:, 0 * hsz : 1 * hsz])
        f[t] = sigmoid(a[:, 1 * hsz : 2 * hsz])
        g[t] = np.tanh(a[:, 2 * hsz : 3 * hsz])
        o[t] = sigmoid(a[:, 3 * hsz : 4 * hsz])
        c[t + 1] = f[t] * c[t] + i[t] * g[t]
        tanh_c[t] = np.tanh(c[t + 1])
        h[t + 1] = o[t] * tanh_c[t]
    return LstmLayerCache(params, inputs, i, f, g, o, c, h, tanh_c)


def _forward_gated(params: GatedCellParams, inputs: np.ndarray) -> GatedLayerCache:
    t_steps, b, _ = inputs.shape
    hsz = params.hidden_size
    flat = inputs.reshape(t_steps * b, -1)
    proj = {}
    for name in ("sigma", "tau", "phi"):
        br = getattr(params, name)
        proj[name] = (flat @ br.W + br.b).reshape(t_steps, b, hsz)
    hidden = np.empty((t_steps, b, hsz))
    transform = np.empty_like(hidden)
    carry = np.empty_like(hidden)
    states = np.zeros((t_steps + 1, b, hsz))
    for t in range(t_steps):
        h_prev = states[t]
        hidden[t] = _cells._branch_activation(
            params.sigma.activation, proj["sigma"][t] + h_prev @ params.sigma.U
        )
        if params.force_transform is not None:
            transform[t] = params.force_transform
        else:
            transform[t] = sigmoid(proj["tau"][t] + h_prev @ params.tau.U)
        if params.force_carry is not None:
            carry[t] = params.force_carry
        else:
            carry[t] = sigmoid(proj["phi"][t] + h_prev @ params.phi.U)
        states[t + 1] = hidden[t] * transform[t] + h_prev * carry[t]
    return GatedLayerCache(params, inputs, hidden, transform, carry, states)


def _forward_dt(params: DeepTransitionParams, inputs: np.ndarray) -> DtLayerCache:
    t_steps, b, _ = inputs.shape
    hsz = params.hidden_size
    r1 = params.stage1.recurrent_matrix()
    r2 = params.stage2_matrix()
    xproj = (inputs.reshape(t_steps * b, -1) @ params.stage1.W + params.stage1.b)
    xproj = xproj.reshape(t_steps, b, hsz)
    h_mid = np.empty((t_steps, b, hsz))
    states = np.zeros((t_steps + 1, b, hsz))
    for t in range(t_steps):
        h_mid[t] = np.maximum(xproj[t] + states[t] @ r1, 0.0)
        states[t + 1] = np.maximum(h_mid[t] @ r2 + params.b2, 0.0)
    return DtLayerCache(params, inputs, h_mid, states)


_LAYER_FORWARD = {
    "rin": _forward_plain,
    "irnn": _forward_plain,
    "lstm": _forward_lstm,
    "gated": _forward_gated,
    "rin_dt": _forward_dt,
}


def forward_sequence(model: Model, batch: SequenceBatch):
    """Run the full unrolled forward pass.

    Returns (outputs, cache): outputs are the head values at the final step,
    (B, 1) predictions for regression or (B, K) softmax probabilities for
    classification.
    """
    if batch.inputs.shape[2] != model.input_size:
        raise ShapeError(
            f"batch feature dim {batch.inputs.shape[2]} != model input {model.input_size}"
        )
    step_forward = _LAYER_FORWARD[model.arch]
    layer_caches = []
    inputs = batch.inputs
    for cell in model.cells:
        lc = step_forward(cell, inputs)
        layer_caches.append(lc)
        inputs = (lc.states if not isinstance(lc, LstmLayerCache) else lc.h)[1:]
    top_final = inputs[-1]
    logits = top_final @ model.head_w + model.head_b
    if model.head == "classification":
        probs = softmax_rows(logits)
        outputs = probs
    else:
        probs = None
        outputs = logits
    cache = UnrollCache(model, batch.steps, layer_caches, top_final, outputs, probs)
    return outputs, cache


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss(kind: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    """Scalar loss over one batch, computed from the head outputs.

    mse: mean over the batch of the squared error.
    softmax_cross_entropy: mean negative log-probability of the true class;
    `outputs` are the softmax probabilities, targets are integer labels.
    """
    if kind == "mse":
        o = np.asarray(outputs, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64).reshape(o.shape)
        return float(np.mean((o - t) ** 2))
    if kind == "softmax_cross_entropy":
        p = np.asarray(outputs, dtype=np.float64)
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != p.shape[0]:
            raise ShapeError(f"labels shape {labels.shape} incompatible with outputs {p.shape}")
        if labels.min() < 0 or labels.max() >= p.shape[1]:
            raise DomainError(f"label out of range [0, {p.shape[1]})")
        picked = p[np.arange(p.shape[0]), labels]
        return float(-np.mean(np.log(picked)))
    raise DomainError(f"unknown loss kind {kind!r}")


def loss_gradient(kind: str, outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of `loss` w.r.t. the head outputs (same shape as outputs)."""
    if kind == "mse":
        o = np.asarray(outputs, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64).reshape(o.shape)
        return 2.0 * (o - t) / o.size
    if kind == "softmax_cross_entropy":
        p = np.asarray(outputs, dtype=np.float64)
        labels = np.asarray(targets)
        if labels.min() < 0 or labels.max() >= p.shape[1]:
            raise DomainError(f"label out of range [0, {p.shape[1]})")
        grad = np.zeros_like(p)
        rows = np.arange(p.shape[0])
        grad[rows, labels] = -1.0 / (p[rows, labels] * p.shape[0])
        return grad
    raise DomainError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _backward_plain(lc: PlainLayerCache, g_ext: np.ndarray, need_dx: bool):
    p = lc.params
    t_steps, b, hsz = g_ext.shape
    r_t = p.recurrent_matrix().T
    da_all = np.empty((t_steps, b, hsz))
    dh = np.zeros((b, hsz))
    for t in range(t_steps - 1, -1, -1):
        da = (g_ext[t] + dh) * (lc.states[t + 1] > 0)
        da_all[t] = da
        dh = da @ r_t
    flat_da = da_all.reshape(t_steps * b, hsz)
    flat_x = lc.inputs.reshape(t_steps * b, -1)
    flat_h = lc.states[:-1].reshape(t_steps * b, hsz)
    grads = {
        "W": flat_x.T @ flat_da,
        "U": flat_h.T @ flat_da,
        "b": flat_da.sum(axis=0, keepdims=True),
    }
    dx = (flat_da @ p.W.T).reshape(lc.inputs.shape) if need_dx else None
    return grads, dx


def _backward_lstm(lc: LstmLayerCache, g_ext: np.ndarray, need_dx: bool):
    p = lc.params
    t_steps, b, hsz = g_ext.shape
    _, u_all, _ = p.concat()
    u_all_t = u_all.T
    da_all = np.empty((t_steps, b, 4 * hsz))
    dh = np.zeros((b, hsz))
    dc = np.zeros((b, hsz))
    for t in range(t_steps - 1, -1, -1):
        dh_t = g_ext[t] + dh
        dc_t = dh_t * lc.o[t] * (1.0 - lc.tanh_c[t] ** 2) + dc
        da = da_all[t]
        da[:, 0 * hsz : 1 * hsz] = dc_t * lc.g[t] * lc.i[t] * (1.0 - lc.i[t])
        da[:, 1 * hsz : 2 * hsz] = dc_t * lc.c[t] * lc.f[t] * (1.0 - lc.f[t])
        da[:, 2 * hsz : 3 * hsz] = dc_t * lc.i[t] * (1.0 - lc.g[t] ** 2)
        da[:, 3 * hsz : 4 * hsz] = dh_t * lc.tanh_c[t] * lc.o[t] * (1.0 - lc.o[t])
        dh = da @ u_all_t
        dc = dc_t * lc.f[t]
    flat_da = da_all.reshape(t_steps * b, 4 * hsz)
    flat_x = lc.inputs.reshape(t_steps * b, -1)
    flat_h = lc.h[:-1].reshape(t_steps * b, hsz)
    dw_all = flat_x.T @ flat_da
    du_all = flat_h.T @ flat_da
    db_all = flat_da.sum(axis=0, keepdims=True)
    grads = {}
    for k, gate in enumerate(_cells.GATE_ORDER):
        sl = slice(k * hsz, (k + 1) * hsz)
        grads[f"W_{gate}"] = dw_all[:, sl]
        grads[f"U_{gate}"] = du_all[:, sl]
        grads[f"b_{gate}"] = db_all[:, sl]
    dx = None
    if need_dx:
        w_all, _, _ = p.concat()
        dx = (flat_da @ w_all.T).reshape(lc.inputs.shape)
    return grads, dx


def _backward_gated(lc: GatedLayerCache, g_ext: np.ndarray, need_dx: bool):
    p = lc.params
    t_steps, b, hsz = g_ext.shape
    da_s = np.empty((t_steps, b, hsz))
    da_t = np.zeros((t_steps, b, hsz))
    da_c = np.zeros((t_steps, b, hsz))
    dh = np.zeros((b, hsz))
    free_t = p.force_transform is None
    free_c = p.force_carry is None
    for t in range(t_steps - 1, -1, -1):
        dh_t = g_ext[t] + dh
        da_s[t] = dh_t * lc.transform[t] * _cells._branch_derivative(
            p.sigma.activation, lc.hidden[t]
        )
        dh = dh_t * lc.carry[t] + da_s[t] @ p.sigma.U.T
        if free_t:
            da_t[t] = dh_t * lc.hidden[t] * lc.transform[t] * (1.0 - lc.transform[t])
            dh += da_t[t] @ p.tau.U.T
        if free_c:
            da_c[t] = dh_t * lc.states[t] * lc.carry[t] * (1.0 - lc.carry[t])
            dh += da_c[t] @ p.phi.U.T
    flat_x = lc.inputs.reshape(t_steps * b, -1)
    flat_h = lc.states[:-1].reshape(t_steps * b, hsz)
    grads = {}
    dx = np.zeros(lc.inputs.shape) if need_dx else None
    for name, da in (("sigma", da_s), ("tau", da_t), ("phi", da_c)):
        br = getattr(p, name)
        flat_da = da.reshape(t_steps * b, hsz)
        grads[f"{name}.W"] = flat_x.T @ flat_da
        grads[f"{name}.U"] = flat_h.T @ flat_da
        grads[f"{name}.b"] = flat_da.sum(axis=0, keepdims=True)
        if need_dx:
            dx += (flat_da @ br.W.T).reshape(lc.inputs.shape)
    return grads, dx


def _backward_dt(lc: DtLayerCache, g_ext: np.ndarray, need_dx: bool):
    p = lc.params
    t_steps, b, hsz = g_ext.shape
    r1_t = p.stage1.recurrent_matrix().T
    r2_t = p.stage2_matrix().T
    da1_all = np.empty((t_steps, b, hsz))
    da2_all = np.empty((t_steps, b, hsz))
    dh = np.zeros((b, hsz))
    for t in range(t_steps - 1, -1, -1):
        da2 = (g_ext[t] + dh) * (lc.states[t + 1] > 0)
        da1 = (da2 @ r2_t) * (lc.h_mid[t] > 0)
        da2_all[t] = da2
        da1_all[t] = da1
        dh = da1 @ r1_t
    flat_da1 = da1_all.reshape(t_steps * b, hsz)
    flat_da2 = da2_all.reshape(t_steps * b, hsz)
    flat_x = lc.inputs.reshape(t_steps * b, -1)
    flat_h = lc.states[:-1].reshape(t_steps * b, hsz)
    flat_mid = lc.h_mid.reshape(t_steps * b, hsz)
    grads = {
        "W1": flat_x.T @ flat_da1,
        "U1": flat_h.T @ flat_da1,
        "b1": flat_da1.sum(axis=0, keepdims=True),
        "U2": flat_mid.T @ flat_da2,
        "b2": flat_da2.sum(axis=0, keepdims=True),
    }
    dx = (flat_da1 @ p.stage1.W.T).reshape(lc.inputs.shape) if need_dx else None
    return grads, dx


_LAYER_BACKWARD = {
    PlainLayerCache: _backward_plain,
    LstmLayerCache: _backward_lstm,
    GatedLayerCache: _backward_gated,
    DtLayerCache: _backward_dt,
}


def backward_sequence(model: Model, cache: UnrollCache, d_outputs: np.ndarray) -> GradientSet:
    """Exact gradients of a scalar loss through the unrolled graph.

    `d_outputs` is the loss gradient w.r.t. the head outputs (as produced by
    `loss_gradient`).  Accumulation runs top layer to bottom, each layer in
    fixed reverse step order, so results are deterministic.
    """
    if cache.model is not model:
        raise StateError("cache was produced by a different model")
    if d_outputs.shape != cache.outputs.shape:
        raise ShapeError(f"d_outputs shape {d_outputs.shape} != {cache.outputs.shape}")
    if model.head == "classification":
        p = cache.probabilities
        inner = (d_outputs * p).sum(axis=1, keepdims=True)
        d_logits = p * (d_outputs - inner)
    else:
        d_logits = d_outputs
    grads: dict[str, np.ndarray] = {}
    d_top = d_logits @ model.head_w.T

    t_steps = cache.steps
    b = d_top.shape[0]
    g_ext = np.zeros((t_steps, b, model.hidden_size))
    g_ext[t_steps - 1] = d_top
    for idx in range(model.num_layers - 1, -1, -1):
        lc = cache.layer_caches[idx]
        if lc.params is not model.cells[idx]:
            raise StateError("stale cache: layer parameters do not match the model")
        layer_grads, dx = _LAYER_BACKWARD[type(lc)](lc, g_ext, need_dx=idx > 0)
        for name, g in layer_grads.items():
            grads[f"layer{idx}.{name}"] = g
        g_ext = dx
    grads["head.w"] = cache.top_final.T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0, keepdims=True)
    ordered = {name: grads[name] for name in model.param_blocks()}
    return GradientSet(ordered)


def clip_gradients(grads: GradientSet, threshold: float) -> GradientSet:
    """Global-norm clipping: if the L2 norm over all blocks exceeds the
    threshold, scale every block by threshold/norm.  Records the pre-clip
    norm in clip_stat either way."""
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    norm = grads.global_norm()
    if norm > threshold:
        clipped = grads.scaled(threshold / norm)
        clipped.clip_stat = norm
        return clipped
    return GradientSet(grads.blocks, clip_stat=norm)
