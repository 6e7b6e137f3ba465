"""Dense numerical kernel: GRU cell with exact reverse-mode gradients, softmax,
Adam, and a finite-difference gradient oracle.

Parameters are plain numpy arrays grouped in dicts keyed by dotted names
(e.g. ``"gru.W_z"``).  Weights are stored as float32 at rest (checkpoints)
but every computation here upcasts to float64, so forward/backward results
are reproducible and finite-difference checks are clean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import DataError, NumericError, StenError

ParamDict = dict[str, np.ndarray]


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow on large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    require_finite("softmax input", v)
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """Weights of a single-layer GRU: input maps W_*, recurrent maps U_*, biases b_*."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

    @property
    def d_model(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1]

    def as_dict(self, prefix: str = "") -> ParamDict:
        return {prefix + name: getattr(self, name) for name in self.NAMES}

    @classmethod
    def from_dict(cls, d: ParamDict, prefix: str = "") -> "GruParams":
        return cls(**{name: d[prefix + name] for name in cls.NAMES})

    def astype(self, dtype) -> "GruParams":
        return GruParams(**{n: getattr(self, n).astype(dtype) for n in self.NAMES})

    def validate(self) -> None:
        d, d_in = self.d_model, self.d_in
        for n in ("W_z", "W_r", "W_h"):
            if getattr(self, n).shape != (d, d_in):
                raise DataError(f"{n} shape {getattr(self, n).shape} != {(d, d_in)}")
        for n in ("U_z", "U_r", "U_h"):
            if getattr(self, n).shape != (d, d):
                raise DataError(f"{n} shape {getattr(self, n).shape} != {(d, d)}")
        for n in ("b_z", "b_r", "b_h"):
            if getattr(self, n).shape != (d,):
                raise DataError(f"{n} shape {getattr(self, n).shape} != {(d,)}")
        for n in self.NAMES:
            require_finite(n, getattr(self, n))


def init_gru(d_in: int, d_model: int, rng: np.random.Generator) -> GruParams:
    """Uniform(-1/sqrt(d_model), +1/sqrt(d_model)) init for every weight and bias."""
    s = 1.0 / np.sqrt(d_model)

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    return GruParams(
        W_z=u(d_model, d_in), W_r=u(d_model, d_in), W_h=u(d_model, d_in),
        U_z=u(d_model, d_model), U_r=u(d_model, d_model), U_h=u(d_model, d_model),
        b_z=u(d_model), b_r=u(d_model), b_h=u(d_model),
    )


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, p: GruParams) -> np.ndarray:
    """One GRU step: h_t = (1 - z)*h_prev + z*h_tilde.

    Accepts a single vector (d_in,) with hidden (d_model,), or a batch
    (B, d_in) with hidden (B, d_model).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != p.d_in:
        raise DataError(f"input dim {x_t.shape[-1]} != GRU d_in {p.d_in}")
    if h_prev.shape[-1] != p.d_model:
        raise DataError(f"hidden dim {h_prev.shape[-1]} != GRU d_model {p.d_model}")
    W_z, W_r, W_h = (np.asarray(p.W_z, np.float64), np.asarray(p.W_r, np.float64),
                     np.asarray(p.W_h, np.float64))
    U_z, U_r, U_h = (np.asarray(p.U_z, np.float64), np.asarray(p.U_r, np.float64),
                     np.asarray(p.U_h, np.float64))
    z = sigmoid(x_t @ W_z.T + h_prev @ U_z.T + np.asarray(p.b_z, np.float64))
    r = sigmoid(x_t @ W_r.T + h_prev @ U_r.T + np.asarray(p.b_r, np.float64))
    hbar = np.tanh(x_t @ W_h.T + (r * h_prev) @ U_h.T + np.asarray(p.b_h, np.float64))
    return (1.0 - z) * h_prev + z * hbar


def gru_encode(seq: np.ndarray, p: GruParams, h0: np.ndarray | None = None) -> np.ndarray:
    """Run the GRU over a (T, d_in) sequence and return the final hidden state."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise DataError(f"expected a nonempty (T, d_in) sequence, got shape {seq.shape}")
    h = np.zeros(p.d_model) if h0 is None else np.asarray(h0, dtype=np.float64)
    for t in range(seq.shape[0]):
        h = gru_step(seq[t], h, p)
    return h


class GruCache:
    """Forward intermediates of a batched GRU pass, as needed for BPTT."""

    __slots__ = ("X", "H_prev", "Z", "R", "Hbar")

    def __init__(self, X, H_prev, Z, R, Hbar):
        self.X = X            # (B, T, d_in)
        self.H_prev = H_prev  # (T, B, d) hidden state entering each step
        self.Z = Z            # (T, B, d)
        self.R = R            # (T, B, d)
        self.Hbar = Hbar      # (T, B, d)


def gru_forward(X: np.ndarray, p: GruParams, want_cache: bool = False,
                want_all: bool = False):
    """Batched GRU over X of shape (B, T, d_in), zero initial hidden state.

    Returns the final hidden states (B, d_model).  With ``want_cache`` also
    returns a GruCache for gru_backward; with ``want_all`` also returns the
    full hidden trajectory (T, B, d_model).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] < 1:
        raise DataError(f"expected (B, T, d_in) with T >= 1, got shape {X.shape}")
    if X.shape[2] != p.d_in:
        raise DataError(f"input dim {X.shape[2]} != GRU d_in {p.d_in}")
    B, T, _ = X.shape
    d = p.d_model
    W_z, W_r, W_h = (np.asarray(p.W_z, np.float64), np.asarray(p.W_r, np.float64),
                     np.asarray(p.W_h, np.float64))
    U_z, U_r, U_h = (np.asarray(p.U_z, np.float64), np.asarray(p.U_r, np.float64),
                     np.asarray(p.U_h, np.float64))
    b_z, b_r, b_h = (np.asarray(p.b_z, np.float64), np.asarray(p.b_r, np.float64),
                     np.asarray(p.b_h, np.float64))

    # Input projections for all steps at once.
    AZx = X @ W_z.T + b_z
    ARx = X @ W_r.T + b_r
    AHx = X @ W_h.T + b_h

    H = np.zeros((B, d))
    H_prev = np.empty((T, B, d)) if want_cache else None
    Z = np.empty((T, B, d)) if want_cache else None
    Rg = np.empty((T, B, d)) if want_cache else None
    Hbar = np.empty((T, B, d)) if want_cache else None
    H_all = np.empty((T, B, d)) if want_all else None

    for t in range(T):
        z = sigmoid(AZx[:, t] + H @ U_z.T)
        r = sigmoid(ARx[:, t] + H @ U_r.T)
        hbar = np.tanh(AHx[:, t] + (r * H) @ U_h.T)
        if want_cache:
            H_prev[t] = H
            Z[t] = z
            Rg[t] = r
            Hbar[t] = hbar
        H = (1.0 - z) * H + z * hbar
        if want_all:
            H_all[t] = H

    out = [H]
    if want_cache:
        out.append(GruCache(X, H_prev, Z, Rg, Hbar))
    if want_all:
        out.append(H_all)
    return out[0] if len(out) == 1 else tuple(out)


def gru_backward(cache: GruCache, p: GruParams, grads: ParamDict, prefix: str,
                 d_h_final: np.ndarray | None = None,
                 d_h_all: np.ndarray | None = None) -> None:
    """Backpropagation through time over a cached batched forward pass.

    ``d_h_final`` is the loss gradient w.r.t. the final hidden state (B, d);
    ``d_h_all`` optionally injects gradients at every step (T, B, d).
    Parameter gradients are accumulated into ``grads`` under ``prefix``.
    """
    X = cache.X
    B, T, _ = X.shape
    d = p.d_model
    U_z = np.asarray(p.U_z, np.float64)
    U_r = np.asarray(p.U_r, np.float64)
    U_h = np.asarray(p.U_h, np.float64)

    g = {n: grads[prefix + n] for n in GruParams.NAMES}
    dh = np.zeros((B, d)) if d_h_final is None else np.array(d_h_final, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        if d_h_all is not None:
            dh = dh + d_h_all[t]
        h_prev, z, r, hbar = cache.H_prev[t], cache.Z[t], cache.R[t], cache.Hbar[t]
        x_t = X[:, t]

        dz = dh * (hbar - h_prev)
        dhbar = dh * z
        dh_prev = dh * (1.0 - z)

        da_h = dhbar * (1.0 - hbar * hbar)
        g["W_h"] += da_h.T @ x_t
        g["U_h"] += da_h.T @ (r * h_prev)
        g["b_h"] += da_h.sum(axis=0)
        drh = da_h @ U_h
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r

        da_r = dr * r * (1.0 - r)
        g["W_r"] += da_r.T @ x_t
        g["U_r"] += da_r.T @ h_prev
        g["b_r"] += da_r.sum(axis=0)
        dh_prev = dh_prev + da_r @ U_r

        da_z = dz * z * (1.0 - z)
        g["W_z"] += da_z.T @ x_t
        g["U_z"] += da_z.T @ h_prev
        g["b_z"] += da_z.sum(axis=0)
        dh = dh_prev + da_z @ U_z


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

class GradTape:
    """Backward program recorded during one scalar-loss forward pass.

    Holds the loss value, the shapes of every parameter touched, and a list
    of backward closures.  The tape pins the version counter of the parameter
    owner at build time; running backward after the parameters were mutated
    is an error because the recorded intermediates no longer match them.
    """

    def __init__(self, value: float, param_template: ParamDict, owner=None):
        self.value = float(value)
        self.otn = 0.0
        self.dsn = 0.0
        self._template = {k: v.shape for k, v in param_template.items()}
        self._fns: list[Callable[[float, ParamDict], None]] = []
        self._owner = owner
        self._owner_version = getattr(owner, "version", None)

    def record(self, fn: Callable[[float, ParamDict], None]) -> None:
        self._fns.append(fn)


def backward(tape: GradTape, loss_grad: float = 1.0) -> ParamDict:
    """Run the tape in reverse and return gradients for every parameter."""
    if tape._owner is not None and tape._owner.version != tape._owner_version:
        raise StenError("gradient tape is stale: parameters were mutated after forward")
    grads = {k: np.zeros(shape) for k, shape in tape._template.items()}
    for fn in reversed(tape._fns):
        fn(float(loss_grad), grads)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: ParamDict
    v: ParamDict
    t: int = 0


def init_adam_state(params: ParamDict) -> AdamState:
    return AdamState(
        m={k: np.zeros(v.shape) for k, v in params.items()},
        v={k: np.zeros(v.shape) for k, v in params.items()},
        t=0,
    )


def adam_update(params: ParamDict, grads: ParamDict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[ParamDict, AdamState]:
    """Bias-corrected Adam step.  Returns updated params and state."""
    if set(params) != set(grads):
        raise DataError("params and grads have different keys")
    for k, gv in grads.items():
        if gv.shape != params[k].shape:
            raise DataError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(gv)):
            raise NumericError(f"non-finite gradient for {k}; aborting step")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params: ParamDict = {}
    new_m: ParamDict = {}
    new_v: ParamDict = {}
    for k, pv in params.items():
        gv = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * state.m[k] + (1.0 - beta1) * gv
        v = beta2 * state.v[k] + (1.0 - beta2) * gv * gv
        new_m[k] = m
        new_v[k] = v
        new_params[k] = np.asarray(pv, dtype=np.float64) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[ParamDict], float], params: ParamDict,
                     h: float = 1e-5) -> ParamDict:
    """Central-difference gradient estimate of a deterministic scalar function.

    Evaluates (f(p + h*e_i) - f(p - h*e_i)) / (2h) per coordinate in float64.
    """
    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    grads = {k: np.zeros(v.shape) for k, v in work.items()}
    for name, arr in work.items():
        gflat = grads[name]
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            fp = float(f(work))
            arr.flat[i] = orig - h
            fm = float(f(work))
            arr.flat[i] = orig
            gflat.flat[i] = (fp - fm) / (2.0 * h)
    return grads
