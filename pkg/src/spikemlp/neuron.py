"""Leaky integrate-and-fire neurons with hard threshold, decay input and hard reset.

Dynamics per step (elementwise)::

    u_pre = u + (z - u) / tau
    y     = 1 if u_pre >= v_th else 0
    u     = (1 - y) * u_pre

The backward pass substitutes ``k * sig(k (u_pre - v_th)) * (1 - sig(...))`` for
the derivative of the step function.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

# Elementwise {0,1} check on every hard spike tensor; cheap next to the matmuls.
CHECK_BINARY = True


class NonBinarySpikeError(AssertionError):
    pass


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_th: float = 1.0
    surrogate_slope: float = 4.0
    detach_reset: bool = True

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError(f"tau must be > 1, got {self.tau}")
        if not self.v_th > 0.0:
            raise ValueError(f"v_th must be > 0, got {self.v_th}")
        if not self.surrogate_slope > 0.0:
            raise ValueError(f"surrogate_slope must be > 0, got {self.surrogate_slope}")


@dataclass
class LifState:
    u: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype), 0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def heaviside(u_pre: np.ndarray, v_th: float) -> np.ndarray:
    return (u_pre >= v_th).astype(u_pre.dtype)


def surrogate_factor(u_pre: np.ndarray, params: LifParams) -> np.ndarray:
    k = params.surrogate_slope
    s = _sigmoid(k * (u_pre - params.v_th))
    return k * s * (1.0 - s)


def lif_backward_rule(u_pre: np.ndarray, upstream: np.ndarray, params: LifParams) -> np.ndarray:
    """Gradient through the firing function: ``upstream * k sig'(k (u_pre - v_th))``."""
    if u_pre.shape != upstream.shape:
        raise ShapeError(f"lif_backward_rule shape mismatch: {u_pre.shape} vs {upstream.shape}")
    return upstream * surrogate_factor(u_pre, params)


def lif_step(state: LifState, z: np.ndarray, params: LifParams) -> tuple[np.ndarray, LifState]:
    z = np.asarray(z, dtype=state.u.dtype)
    if z.shape != state.u.shape:
        raise ShapeError(f"lif_step: input {z.shape} does not match membrane {state.u.shape}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("lif_step: non-finite synaptic input")
    u_pre = state.u + (z - state.u) / params.tau
    y = heaviside(u_pre, params.v_th)
    return y, LifState((1.0 - y) * u_pre, state.t + 1)


def run_unrolled(inputs: Sequence[np.ndarray], params: LifParams, T: int | None = None) -> list[np.ndarray]:
    """Run one LIF population over ``inputs`` (one array per step) starting from u = 0."""
    if T is not None and len(inputs) != T:
        raise ShapeError(f"run_unrolled: got {len(inputs)} steps, configured T={T}")
    if not inputs:
        return []
    state = LifState.zeros(np.shape(inputs[0]))
    spikes = []
    for z in inputs:
        y, state = lif_step(state, z, params)
        spikes.append(y)
    return spikes


# ---------------------------------------------------------------------------
# relaxed firing: the smooth twin used as a finite-difference oracle

_relaxed: contextvars.ContextVar[bool] = contextvars.ContextVar("spikemlp_relaxed", default=False)


@contextlib.contextmanager
def relaxed_firing():
    """Replace the hard threshold by ``sig(k (u_pre - v_th))`` and keep the reset differentiable.

    Inside this context the backward pass is the exact gradient of the forward,
    so central differences can check it.
    """
    token = _relaxed.set(True)
    try:
        yield
    finally:
        _relaxed.reset(token)


def is_relaxed() -> bool:
    return _relaxed.get()


def lif_sequence(z: Tensor, T: int, params: LifParams) -> Tensor:
    """LIF over a time-major stack ``z`` of shape [T*B, ...]; returns spikes of the same shape.

    Membranes start at zero. The backward pass is full BPTT over the T steps.
    """
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if z.shape[0] % T:
        raise ShapeError(f"leading axis {z.shape[0]} is not a multiple of T={T}")
    if not np.all(np.isfinite(z.data)):
        # a NaN would otherwise vanish silently behind the threshold
        raise FloatingPointError("lif_sequence: non-finite synaptic input")
    relaxed = is_relaxed()
    detach = params.detach_reset and not relaxed
    tau, v_th, k = params.tau, params.v_th, params.surrogate_slope
    Z = z.data.reshape((T, -1) + z.shape[1:])
    u = np.zeros_like(Z[0])
    u_pres = np.empty_like(Z)
    ys = np.empty_like(Z)
    for t in range(T):
        u_pre = u + (Z[t] - u) / tau
        if relaxed:
            y = _sigmoid(k * (u_pre - v_th))
        else:
            y = heaviside(u_pre, v_th)
        u = (1.0 - y) * u_pre
        u_pres[t] = u_pre
        ys[t] = y
    if CHECK_BINARY and not relaxed and not np.all((ys == 0.0) | (ys == 1.0)):
        raise NonBinarySpikeError("LIF produced a non-binary spike value")

    def bw(g):
        G = g.reshape(ys.shape)
        gz = np.empty_like(G)
        gu = np.zeros_like(G[0])
        decay = 1.0 - 1.0 / tau
        for t in range(T - 1, -1, -1):
            sg = surrogate_factor(u_pres[t], params)
            g_pre = G[t] * sg + gu * (1.0 - ys[t])
            if not detach:
                g_pre = g_pre - gu * u_pres[t] * sg
            gz[t] = g_pre / tau
            gu = g_pre * decay
        return (gz.reshape(z.shape),)

    return record(ys.reshape(z.shape), (z,), bw)


# ---------------------------------------------------------------------------
# named activation sites, observable by rate meters

Observer = Callable[[str, np.ndarray, int], None]
_observers: contextvars.ContextVar[tuple[Observer, ...]] = contextvars.ContextVar("spikemlp_observers", default=())


@contextlib.contextmanager
def observe_spikes(fn: Observer):
    """Call ``fn(site_name, spikes, T)`` for every LIF site evaluated inside the block."""
    token = _observers.set(_observers.get() + (fn,))
    try:
        yield
    finally:
        _observers.reset(token)


class LifSite:
    """One spiking activation site in a network; owns no state between forward calls."""

    def __init__(self, name: str, params: LifParams):
        self.name = name
        self.params = params

    def __call__(self, z: Tensor, T: int) -> Tensor:
        y = lif_sequence(z, T, self.params)
        for fn in _observers.get():
            fn(self.name, y.data, T)
        return y

    def __repr__(self) -> str:
        return f"LifSite({self.name!r})"
