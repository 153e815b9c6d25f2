"""Reference LSTM used as the timing and quality baseline.

Gate order in the stacked matrices is input, forget, candidate, output.
The hidden-to-hidden product runs once per time step, which is what makes
its cost quadratic in the hidden size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from srukit.exceptions import DimensionError
from srukit.tensor_core import SeededRng, gemm, stable_sigmoid, stream_id, uniform_fill


@dataclass
class LstmParams:
    W_x: np.ndarray  # (4d, d_in)
    W_h: np.ndarray  # (4d, d)
    b: np.ndarray    # (4d,)

    @property
    def d(self) -> int:
        return self.W_h.shape[1]

    @property
    def d_in(self) -> int:
        return self.W_x.shape[1]

    def named_arrays(self):
        return [("W_x", self.W_x), ("W_h", self.W_h), ("b", self.b)]

    def zeros_like(self) -> "LstmParams":
        return LstmParams(np.zeros_like(self.W_x), np.zeros_like(self.W_h), np.zeros_like(self.b))

    def astype(self, dtype) -> "LstmParams":
        return LstmParams(self.W_x.astype(dtype), self.W_h.astype(dtype), self.b.astype(dtype))


def lstm_param_count(d_in: int, d: int) -> int:
    return 4 * (d * d_in + d * d + d)


def init_lstm(d_in: int, d: int, rng: SeededRng, dtype=np.float64,
              forget_bias: float = 1.0) -> LstmParams:
    def fill(shape, fan_in, name):
        t = np.empty(shape, dtype=dtype)
        return uniform_fill(t, math.sqrt(3.0 / fan_in), rng.child(stream_id(f"{rng.stream}/{name}")))

    b = np.zeros(4 * d, dtype=dtype)
    b[d : 2 * d] = forget_bias
    return LstmParams(fill((4 * d, d_in), d_in, "W_x"), fill((4 * d, d), d, "W_h"), b)


@dataclass
class LstmTape:
    x: np.ndarray       # (L, B, d_in)
    gates: np.ndarray   # (L, B, 4d) post-activation i, f, g, o
    c: np.ndarray       # (L, B, d)
    h: np.ndarray       # (L, B, d)
    h0: np.ndarray
    c0: np.ndarray


def lstm_input_projection(params: LstmParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != params.d_in:
        raise DimensionError(f"input of shape {x.shape} does not match d_in={params.d_in}")
    L, B, _ = x.shape
    return (gemm(x.reshape(L * B, -1), params.W_x.T) + params.b).reshape(L, B, -1)


def lstm_recurrence(params: LstmParams, xw: np.ndarray, state=None):
    """Sequential part: one ``(B, d) x (d, 4d)`` gemm plus gate math per step.

    Returns ``(h, (h_T, c_T), gates, c)``.
    """
    L, B, _ = xw.shape
    d = params.d
    dtype = xw.dtype
    if state is None:
        h_prev = np.zeros((B, d), dtype=dtype)
        c_prev = np.zeros((B, d), dtype=dtype)
    else:
        h_prev, c_prev = state
        if h_prev.shape != (B, d) or c_prev.shape != (B, d):
            raise DimensionError(f"LSTM state must be two ({B}, {d}) arrays")
    wh_t = params.W_h.T
    gates = np.empty((L, B, 4 * d), dtype=dtype)
    cs = np.empty((L, B, d), dtype=dtype)
    hs = np.empty((L, B, d), dtype=dtype)
    for t in range(L):
        a = xw[t] + gemm(h_prev, wh_t)
        g = gates[t]
        g[:, : 2 * d] = stable_sigmoid(a[:, : 2 * d])
        g[:, 2 * d : 3 * d] = np.tanh(a[:, 2 * d : 3 * d])
        g[:, 3 * d :] = stable_sigmoid(a[:, 3 * d :])
        c_prev = g[:, d : 2 * d] * c_prev + g[:, :d] * g[:, 2 * d : 3 * d]
        h_prev = g[:, 3 * d :] * np.tanh(c_prev)
        cs[t] = c_prev
        hs[t] = h_prev
    return hs, (h_prev, c_prev), gates, cs


def lstm_forward(params: LstmParams, x: np.ndarray, state=None):
    """Returns ``(h, (h_T, c_T), tape)``."""
    xw = lstm_input_projection(params, x)
    L, B, _ = x.shape
    d = params.d
    h0 = np.zeros((B, d), dtype=xw.dtype) if state is None else state[0]
    c0 = np.zeros((B, d), dtype=xw.dtype) if state is None else state[1]
    hs, new_state, gates, cs = lstm_recurrence(params, xw, (h0, c0))
    return hs, new_state, LstmTape(x=x, gates=gates, c=cs, h=hs, h0=h0, c0=c0)


def lstm_reference_forward(params: LstmParams, x: np.ndarray, state=None):
    """Batched input projection followed by the per-step recurrence;
    returns ``(h, (h_T, c_T))``."""
    h, new_state, _ = lstm_forward(params, x, state)
    return h, new_state


def lstm_backward(params: LstmParams, tape: LstmTape, grad_h: np.ndarray, grad_state=None):
    """Backpropagation through time. Returns ``(grads, g_x, (g_h0, g_c0))``."""
    L, B, d = tape.h.shape
    g = tape.gates
    if grad_state is None:
        dh_next = np.zeros((B, d), dtype=grad_h.dtype)
        dc_next = np.zeros((B, d), dtype=grad_h.dtype)
    else:
        dh_next, dc_next = (np.array(a, copy=True) for a in grad_state)
    dA = np.empty((L, B, 4 * d), dtype=grad_h.dtype)
    W_h = params.W_h
    for t in range(L - 1, -1, -1):
        i, f = g[t, :, :d], g[t, :, d : 2 * d]
        cand, o = g[t, :, 2 * d : 3 * d], g[t, :, 3 * d :]
        c_prev = tape.c[t - 1] if t > 0 else tape.c0
        tc = np.tanh(tape.c[t])
        dh = grad_h[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = dA[t]
        da[:, :d] = dc * cand * i * (1.0 - i)
        da[:, d : 2 * d] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * d : 3 * d] = dc * i * (1.0 - cand * cand)
        da[:, 3 * d :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = gemm(da, W_h)
    dA2 = dA.reshape(L * B, 4 * d)
    h_prev = np.concatenate([tape.h0[None], tape.h[:-1]], axis=0).reshape(L * B, d)
    x2 = tape.x.reshape(L * B, -1)
    grads = LstmParams(gemm(dA2.T, x2), gemm(dA2.T, h_prev), dA2.sum(axis=0))
    gx = gemm(dA2, params.W_x).reshape(tape.x.shape)
    return grads, gx, (dh_next, dc_next)
