"""Recurrent cell step functions: forward passes and exact analytic backward passes.

Architectures
-------------
rin     h_t = ReLU(W x_t + (U + I) h_{t-1} + b), I fixed and non-trainable
        (the surrogate memory; gradients w.r.t. U never see I)
irnn    h_t = ReLU(W x_t + U h_{t-1} + b), U initialized to I but trainable
lstm    standard LSTM without peepholes; gate order (i, f, g, o)
gated   dual-gate form h_t = H_t*T_t + h_{t-1}*C_t with H_t, T_t, C_t each
        produced by its own recurrent sub-layer
rin_dt  two ReLU transitions per step, both with the identity surrogate

Conventions: x_t is (B, D), hidden states are (B, H), weights map
input->hidden as W (D, H) and hidden->hidden as U (H, H), biases are (1, H).
The ReLU subgradient at exactly 0 is taken to be 0.

Every forward returns (CellState, cache); `cell_backward` consumes the cache
and an upstream gradient and returns exact parameter gradients plus the
gradients flowing to the previous state and the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError

GATE_ORDER = ("i", "f", "g", "o")
BRANCH_ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def _check_2d(name: str, a: np.ndarray, shape=None) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array")
    if shape is not None and a.shape != shape:
        raise ShapeError(f"{name} has shape {a.shape}, expected {shape}")


@dataclass
class PlainCellParams:
    """Weights of a single-transition plain cell (rin or irnn)."""

    W: np.ndarray  # (D, H)
    U: np.ndarray  # (H, H)
    b: np.ndarray  # (1, H)
    use_identity_surrogate: bool = False

    def __post_init__(self):
        _check_2d("W", self.W)
        h = self.W.shape[1]
        _check_2d("U", self.U, (h, h))
        _check_2d("b", self.b, (1, h))

    @property
    def input_size(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W.shape[1]

    def recurrent_matrix(self) -> np.ndarray:
        """Effective hidden-to-hidden map: U + I when the surrogate is on."""
        if self.use_identity_surrogate:
            return self.U + np.eye(self.hidden_size)
        return self.U

    def blocks(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b}


@dataclass
class LstmCellParams:
    """Per-gate LSTM weights, gate order (input, forget, candidate, output)."""

    W_i: np.ndarray
    U_i: np.ndarray
    b_i: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_g: np.ndarray
    U_g: np.ndarray
    b_g: np.ndarray
    W_o: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        h = self.W_i.shape[1]
        d = self.W_i.shape[0]
        for gate in GATE_ORDER:
            _check_2d(f"W_{gate}", getattr(self, f"W_{gate}"), (d, h))
            _check_2d(f"U_{gate}", getattr(self, f"U_{gate}"), (h, h))
            _check_2d(f"b_{gate}", getattr(self, f"b_{gate}"), (1, h))

    @property
    def input_size(self) -> int:
        return self.W_i.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[1]

    def concat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fused (D,4H), (H,4H), (1,4H) views for batched gate pre-activations."""
        W = np.concatenate([getattr(self, f"W_{g}") for g in GATE_ORDER], axis=1)
        U = np.concatenate([getattr(self, f"U_{g}") for g in GATE_ORDER], axis=1)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATE_ORDER], axis=1)
        return W, U, b

    def blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for g in GATE_ORDER:
            for kind in ("W", "U", "b"):
                out[f"{kind}_{g}"] = getattr(self, f"{kind}_{g}")
        return out


@dataclass
class GatedBranchParams:
    """One recurrent sub-layer of the dual-gate cell with its activation."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in BRANCH_ACTIVATIONS:
            raise ShapeError(f"unknown branch activation {self.activation!r}")
        _check_2d("W", self.W)
        h = self.W.shape[1]
        _check_2d("U", self.U, (h, h))
        _check_2d("b", self.b, (1, h))


@dataclass
class GatedCellParams:
    """Dual-gate cell: hidden transform (sigma), transform gate (tau),
    carry gate (phi).  Gates must be sigmoidal so their values lie in [0,1].

    force_transform / force_carry pin the gate outputs to a constant, which
    turns the cell into the degenerate subcases used by the expansion
    diagnostics (transform=1, carry=0 is a plain recurrent network)."""

    sigma: GatedBranchParams
    tau: GatedBranchParams
    phi: GatedBranchParams
    force_transform: Optional[float] = None
    force_carry: Optional[float] = None

    def __post_init__(self):
        if self.tau.activation != "sigmoid" or self.phi.activation != "sigmoid":
            raise ShapeError("gate branches tau and phi must use sigmoid")

    @property
    def input_size(self) -> int:
        return self.sigma.W.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.sigma.W.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("sigma", "tau", "phi"):
            branch = getattr(self, name)
            out[f"{name}.W"] = branch.W
            out[f"{name}.U"] = branch.U
            out[f"{name}.b"] = branch.b
        return out


@dataclass
class DeepTransitionParams:
    """Two-transition cell: stage 1 consumes the input, stage 2 is
    hidden-to-hidden only; both stages carry the identity surrogate."""

    stage1: PlainCellParams  # W1, U1, b1 with surrogate on
    U2: np.ndarray           # (H, H)
    b2: np.ndarray           # (1, H)

    def __post_init__(self):
        if not self.stage1.use_identity_surrogate:
            raise ShapeError("deep-transition stage 1 requires the identity surrogate")
        h = self.stage1.hidden_size
        _check_2d("U2", self.U2, (h, h))
        _check_2d("b2", self.b2, (1, h))

    @property
    def input_size(self) -> int:
        return self.stage1.input_size

    @property
    def hidden_size(self) -> int:
        return self.stage1.hidden_size

    def stage2_matrix(self) -> np.ndarray:
        return self.U2 + np.eye(self.hidden_size)

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "W1": self.stage1.W,
            "U1": self.stage1.U,
            "b1": self.stage1.b,
            "U2": self.U2,
            "b2": self.b2,
        }


@dataclass
class CellState:
    """Hidden activation h (B, H); c is the LSTM memory cell, else None."""

    h: np.ndarray
    c: Optional[np.ndarray] = None


@dataclass
class GateSnapshot:
    """Realized dual-gate quantities at one step: hidden transform H_t,
    transform gate T_t, carry gate C_t (all (B, H))."""

    hidden: np.ndarray
    transform: np.ndarray
    carry: np.ndarray


def _check_step_shapes(arch: str, params, x: np.ndarray, h_prev: np.ndarray) -> None:
    _check_2d("x_t", x)
    _check_2d("h_prev", h_prev)
    if x.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"{arch}: batch mismatch, x {x.shape} vs h {h_prev.shape}")
    if x.shape[1] != params.input_size:
        raise ShapeError(f"{arch}: input dim {x.shape[1]} != W rows {params.input_size}")
    if h_prev.shape[1] != params.hidden_size:
        raise ShapeError(f"{arch}: hidden dim {h_prev.shape[1]} != {params.hidden_size}")


def _branch_activation(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "sigmoid":
        from .numerics import sigmoid

        return sigmoid(a)
    return a  # identity


def _branch_derivative(kind: str, y: np.ndarray) -> np.ndarray:
    """Activation derivative expressed through the activation output."""
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (y > 0).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


# ---------------------------------------------------------------------------
# forward steps
# ---------------------------------------------------------------------------


@dataclass
class PlainStepCache:
    arch: str
    params: PlainCellParams
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray


def rin_step(params: PlainCellParams, x_t: np.ndarray, h_prev: np.ndarray):
    """h_t = ReLU(W x_t + (U + I) h_{t-1} + b); requires the surrogate flag."""
    if not params.use_identity_surrogate:
        raise StateError("rin_step requires use_identity_surrogate=True")
    _check_step_shapes("rin", params, x_t, h_prev)
    a = x_t @ params.W + h_prev @ params.recurrent_matrix() + params.b
    h = np.maximum(a, 0.0)
    return CellState(h), PlainStepCache("rin", params, x_t, h_prev, h)


def irnn_step(params: PlainCellParams, x_t: np.ndarray, h_prev: np.ndarray):
    """h_t = ReLU(W x_t + U h_{t-1} + b); U is fully trainable."""
    if params.use_identity_surrogate:
        raise StateError("irnn_step requires use_identity_surrogate=False")
    _check_step_shapes("irnn", params, x_t, h_prev)
    a = x_t @ params.W + h_prev @ params.U + params.b
    h = np.maximum(a, 0.0)
    return CellState(h), PlainStepCache("irnn", params, x_t, h_prev, h)


@dataclass
class LstmStepCache:
    arch: str
    params: LstmCellParams
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_step(params: LstmCellParams, x_t: np.ndarray, state_prev: CellState):
    """Standard LSTM step.

    i, f, o = sigmoid gates; g = tanh candidate;
    c_t = f * c_{t-1} + i * g;  h_t = o * tanh(c_t).
    """
    if state_prev.c is None:
        raise StateError("lstm_step requires a previous memory cell state")
    h_prev, c_prev = state_prev.h, state_prev.c
    _check_step_shapes("lstm", params, x_t, h_prev)
    from .numerics import sigmoid

    W, U, b = params.concat()
    a = x_t @ W + h_prev @ U + b
    hsz = params.hidden_size
    i = sigmoid(a[:, 0 * hsz : 1 * hsz])
    f = sigmoid(a[:, 1 * hsz : 2 * hsz])
    g = np.tanh(a[:, 2 * hsz : 3 * hsz])
    o = sigmoid(a[:, 3 * hsz : 4 * hsz])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmStepCache("lstm", params, x_t, h_prev, c_prev, i, f, g, o, c, tanh_c)
    return CellState(h, c), cache


@dataclass
class GatedStepCache:
    arch: str
    params: GatedCellParams
    x: np.ndarray
    h_prev: np.ndarray
    gates: GateSnapshot


def gated_step(params: GatedCellParams, x_t: np.ndarray, h_prev: np.ndarray):
    """Dual-gate update h_t = H_t*T_t + h_{t-1}*C_t.

    Returns (state, snapshot, cache) so diagnostics can consume the realized
    gate values without recomputing them.
    """
    _check_step_shapes("gated", params, x_t, h_prev)
    s = params.sigma
    hidden = _branch_activation(s.activation, x_t @ s.W + h_prev @ s.U + s.b)
    if params.force_transform is not None:
        transform = np.full_like(hidden, float(params.force_transform))
    else:
        t = params.tau
        transform = _branch_activation("sigmoid", x_t @ t.W + h_prev @ t.U + t.b)
    if params.force_carry is not None:
        carry = np.full_like(hidden, float(params.force_carry))
    else:
        p = params.phi
        carry = _branch_activation("sigmoid", x_t @ p.W + h_prev @ p.U + p.b)
    h = hidden * transform + h_prev * carry
    snap = GateSnapshot(hidden, transform, carry)
    return CellState(h), snap, GatedStepCache("gated", params, x_t, h_prev, snap)


@dataclass
class DtStepCache:
    arch: str
    params: DeepTransitionParams
    x: np.ndarray
    h_prev: np.ndarray
    h_mid: np.ndarray
    h: np.ndarray


def rin_dt_step(params: DeepTransitionParams, x_t: np.ndarray, h_prev: np.ndarray):
    """Two chained surrogate transitions:
    h_mid = ReLU(W1 x_t + (U1 + I) h_{t-1} + b1);
    h_t   = ReLU((U2 + I) h_mid + b2).
    """
    _check_step_shapes("rin_dt", params, x_t, h_prev)
    s1 = params.stage1
    a1 = x_t @ s1.W + h_prev @ s1.recurrent_matrix() + s1.b
    h_mid = np.maximum(a1, 0.0)
    a2 = h_mid @ params.stage2_matrix() + params.b2
    h = np.maximum(a2, 0.0)
    return CellState(h), DtStepCache("rin_dt", params, x_t, h_prev, h_mid, h)


# ---------------------------------------------------------------------------
# backward steps
# ---------------------------------------------------------------------------


def _plain_backward(cache: PlainStepCache, grad_h: np.ndarray):
    p = cache.params
    da = grad_h * (cache.h > 0)
    grads = {
        "W": cache.x.T @ da,
        "U": cache.h_prev.T @ da,
        "b": da.sum(axis=0, keepdims=True),
    }
    grad_h_prev = da @ p.recurrent_matrix().T
    grad_x = da @ p.W.T
    return grads, grad_h_prev, None, grad_x


def _lstm_backward(cache: LstmStepCache, grad_h: np.ndarray, grad_c: Optional[np.ndarray]):
    p = cache.params
    i, f, g, o = cache.i, cache.f, cache.g, cache.o
    dc = grad_h * o * (1.0 - cache.tanh_c**2)
    if grad_c is not None:
        dc = dc + grad_c
    da_o = grad_h * cache.tanh_c * o * (1.0 - o)
    da_f = dc * cache.c_prev * f * (1.0 - f)
    da_i = dc * g * i * (1.0 - i)
    da_g = dc * i * (1.0 - g * g)
    das = {"i": da_i, "f": da_f, "g": da_g, "o": da_o}
    grads = {}
    grad_h_prev = np.zeros_like(cache.h_prev)
    grad_x = np.zeros_like(cache.x)
    for gate, da in das.items():
        grads[f"W_{gate}"] = cache.x.T @ da
        grads[f"U_{gate}"] = cache.h_prev.T @ da
        grads[f"b_{gate}"] = da.sum(axis=0, keepdims=True)
        grad_h_prev += da @ getattr(p, f"U_{gate}").T
        grad_x += da @ getattr(p, f"W_{gate}").T
    grad_c_prev = dc * f
    return grads, grad_h_prev, grad_c_prev, grad_x


def _gated_backward(cache: GatedStepCache, grad_h: np.ndarray):
    p = cache.params
    snap = cache.gates
    grads = {}
    grad_h_prev = grad_h * snap.carry
    grad_x = np.zeros_like(cache.x)

    def branch(name, params_b, out, upstream, forced):
        if forced:
            grads[f"{name}.W"] = np.zeros_like(params_b.W)
            grads[f"{name}.U"] = np.zeros_like(params_b.U)
            grads[f"{name}.b"] = np.zeros_like(params_b.b)
            return np.zeros_like(grad_h), np.zeros_like(cache.x)
        da = upstream * _branch_derivative(params_b.activation, out)
        grads[f"{name}.W"] = cache.x.T @ da
        grads[f"{name}.U"] = cache.h_prev.T @ da
        grads[f"{name}.b"] = da.sum(axis=0, keepdims=True)
        return da @ params_b.U.T, da @ params_b.W.T

    dh, dx = branch("sigma", p.sigma, snap.hidden, grad_h * snap.transform, False)
    grad_h_prev += dh
    grad_x += dx
    dh, dx = branch("tau", p.tau, snap.transform, grad_h * snap.hidden,
                    p.force_transform is not None)
    grad_h_prev += dh
    grad_x += dx
    dh, dx = branch("phi", p.phi, snap.carry, grad_h * cache.h_prev,
                    p.force_carry is not None)
    grad_h_prev += dh
    grad_x += dx
    return grads, grad_h_prev, None, grad_x


def _dt_backward(cache: DtStepCache, grad_h: np.ndarray):
    p = cache.params
    da2 = grad_h * (cache.h > 0)
    d_mid = da2 @ p.stage2_matrix().T
    da1 = d_mid * (cache.h_mid > 0)
    grads = {
        "W1": cache.x.T @ da1,
        "U1": cache.h_prev.T @ da1,
        "b1": da1.sum(axis=0, keepdims=True),
        "U2": cache.h_mid.T @ da2,
        "b2": da2.sum(axis=0, keepdims=True),
    }
    grad_h_prev = da1 @ p.stage1.recurrent_matrix().T
    grad_x = da1 @ p.stage1.W.T
    return grads, grad_h_prev, None, grad_x


def cell_backward(arch: str, cache, grad_h: np.ndarray, grad_c: Optional[np.ndarray] = None):
    """Exact gradients for one cell step.

    Returns (param_grads, grad_h_prev, grad_c_prev, grad_x).  param_grads is
    keyed like the params' `blocks()`; the identity surrogate contributes to
    the forward value only and never appears in the U gradient.
    """
    if getattr(cache, "arch", None) != arch:
        raise StateError(f"cache was produced by {getattr(cache, 'arch', None)!r}, not {arch!r}")
    if arch in ("rin", "irnn"):
        return _plain_backward(cache, grad_h)
    if arch == "lstm":
        return _lstm_backward(cache, grad_h, grad_c)
    if arch == "gated":
        return _gated_backward(cache, grad_h)
    if arch == "rin_dt":
        return _dt_backward(cache, grad_h)
    raise StateError(f"unknown architecture {arch!r}")
