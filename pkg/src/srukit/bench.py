"""Timing harness for SRU (fused and unfused) and the LSTM baseline.

Passes:

* ``forward``: full layer forward (projection gemm plus recurrence).
* ``forward_backward``: forward followed by the complete backward pass.
* ``elementwise_only``: everything in the forward that is not a matrix
  product, run on precomputed projections.
* ``matmul_only``: every matrix product of the forward, nothing else. For
  the LSTM this includes the per-step hidden-to-hidden products.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from srukit.exceptions import ParameterError
from srukit.grad import backward_fused
from srukit.init_calib import init_layer
from srukit.layer import SruLayerConfig, forward_layer, fused_recurrence, project
from srukit.tensor_core import SeededRng, gemm, stable_sigmoid, stream_id
from srukit.training.lstm import (
    init_lstm,
    lstm_backward,
    lstm_forward,
    lstm_input_projection,
)

ARCHS = ("sru_fused", "sru_naive", "lstm")
PASSES = ("forward", "forward_backward", "elementwise_only", "matmul_only")
CSV_HEADER = ("arch", "pass", "L", "B", "d", "ms_mean", "ms_std")
WARMUP = 3
MIN_REPS = 20


@dataclass(frozen=True)
class BenchRecord:
    arch: str
    pass_: str
    L: int
    B: int
    d: int
    ms_mean: float
    ms_std: float
    reps: int = MIN_REPS
    warmup: int = WARMUP

    @property
    def skipped(self) -> bool:
        return math.isnan(self.ms_mean)

    def row(self) -> list:
        return [self.arch, self.pass_, self.L, self.B, self.d, self.ms_mean, self.ms_std]


def time_callable(fn: Callable[[], object], reps: int = MIN_REPS, warmup: int = WARMUP):
    """Mean and population std (ms) of ``reps`` timed calls after ``warmup``
    untimed ones, on the monotonic performance clock."""
    if reps < 1 or warmup < 0:
        raise ParameterError("reps must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = (time.perf_counter_ns() - t0) / 1e6
    return float(samples.mean()), float(samples.std())


# -- unfused SRU reference (one direction, per-step array operations) ------------

def unfused_elementwise_forward(U, x, vf, vr, bf, br, alpha, c0, use_state=True, use_highway=True):
    """Per-step recurrence where every operation is a separate array pass.

    ``U`` is ``(L, B, K, d)`` for one direction walking time forwards; the
    skip input is ``U[:, :, 3]`` when ``K == 4`` else ``x``. Returns
    ``(h, c)`` with ``c`` holding every step's state, ``(L, B, d)``.
    """
    L, B, K, d = U.shape
    h = np.empty((L, B, d))
    cs = np.empty((L, B, d))
    c = c0
    for t in range(L):
        zf = U[t, :, 1] + bf
        if use_state:
            zf = zf + vf * c
        f = stable_sigmoid(zf)
        c = f * c + (1.0 - f) * U[t, :, 0]
        zr = U[t, :, 2] + br
        if use_state:
            zr = zr + vr * c
        r = stable_sigmoid(zr)
        if use_highway:
            s = U[t, :, 3] if K == 4 else x[t]
            h[t] = r * c + (1.0 - r) * s * alpha
        else:
            h[t] = c
        cs[t] = c
    return h, cs


def unfused_elementwise_backward(U, x, vf, vr, bf, br, alpha, c0, cs, gh, gc_last=None,
                                 use_state=True, use_highway=True):
    """Reverse of :func:`unfused_elementwise_forward` with the same per-step
    structure. Returns ``(gU, g_skip, g_vf, g_vr, g_bf, g_br, g_c0)``."""
    L, B, K, d = U.shape
    gU = np.zeros_like(U)
    g_skip = np.zeros((L, B, d))
    g_vf, g_vr, g_bf, g_br = (np.zeros(d) for _ in range(4))
    gc = np.zeros((B, d)) if gc_last is None else np.array(gc_last, dtype=float)
    for t in range(L - 1, -1, -1):
        cp = c0 if t == 0 else cs[t - 1]
        ct = cs[t]
        f = stable_sigmoid(U[t, :, 1] + bf + (vf * cp if use_state else 0.0))
        r = stable_sigmoid(U[t, :, 2] + br + (vr * ct if use_state else 0.0))
        g = gh[t]
        if use_highway:
            s = U[t, :, 3] if K == 4 else x[t]
            dzr = g * (ct - alpha * s) * r * (1.0 - r)
            gs = g * (1.0 - r) * alpha
            if K == 4:
                gU[t, :, 3] = gs
            else:
                g_skip[t] = gs
            gc = gc + g * r
            if use_state:
                gc = gc + dzr * vr
                g_vr += (dzr * ct).sum(axis=0)
            g_br += dzr.sum(axis=0)
            gU[t, :, 2] = dzr
        else:
            gc = gc + g
        gU[t, :, 0] = gc * (1.0 - f)
        dzf = gc * (cp - U[t, :, 0]) * f * (1.0 - f)
        gU[t, :, 1] = dzf
        g_bf += dzf.sum(axis=0)
        if use_state:
            g_vf += (dzf * cp).sum(axis=0)
            gc = gc * f + dzf * vf
        else:
            gc = gc * f
    return gU, g_skip, g_vf, g_vr, g_bf, g_br, gc


# -- LSTM split passes --------------------------------------------------------------

def lstm_matmuls(params, x, hs):
    """Every gemm of an LSTM forward: the batched input projection and one
    hidden-to-hidden product per step (fed the supplied hidden states)."""
    xw = lstm_input_projection(params, x)
    wh_t = params.W_h.T
    for t in range(x.shape[0]):
        xw[t] += gemm(hs[t], wh_t)
    return xw


def lstm_gate_pass(pre, c0):
    """Every non-gemm operation of an LSTM forward on given pre-activations."""
    L, B, four_d = pre.shape
    d = four_d // 4
    c = c0
    hs = np.empty((L, B, d))
    for t in range(L):
        a = pre[t]
        i = stable_sigmoid(a[:, :d])
        f = stable_sigmoid(a[:, d : 2 * d])
        g = np.tanh(a[:, 2 * d : 3 * d])
        o = stable_sigmoid(a[:, 3 * d :])
        c = f * c + i * g
        hs[t] = o * np.tanh(c)
    return hs


# -- cell construction --------------------------------------------------------------

def _sru_setup(L, B, d, rng):
    cfg = SruLayerConfig(d_in=d, d_out=d)
    p = init_layer(cfg, rng)
    g = rng.child(stream_id("bench-data")).generator()
    x = g.standard_normal((L, B, d)) / math.sqrt(d)
    gh = g.standard_normal((L, B, d))
    return cfg, p, x, gh


def make_cell(arch: str, pass_: str, L: int, B: int, d: int, seed: int = 0) -> Callable[[], object]:
    """Zero-argument callable that performs one timed unit of work."""
    if arch not in ARCHS:
        raise ParameterError(f"unknown arch {arch!r}; valid: {', '.join(ARCHS)}")
    if pass_ not in PASSES:
        raise ParameterError(f"unknown pass {pass_!r}; valid: {', '.join(PASSES)}")
    rng = SeededRng(seed, stream_id(f"bench/{arch}/{L}/{B}/{d}"))
    if arch == "lstm":
        params = init_lstm(d, d, rng)
        g = rng.child(stream_id("bench-data")).generator()
        x = g.standard_normal((L, B, d)) / math.sqrt(d)
        gh = g.standard_normal((L, B, d))
        if pass_ == "forward":
            return lambda: lstm_forward(params, x)
        if pass_ == "forward_backward":
            return lambda: lstm_backward(params, lstm_forward(params, x)[2], gh)
        hs, _, _ = lstm_forward(params, x)
        if pass_ == "matmul_only":
            return lambda: lstm_matmuls(params, x, hs)
        pre = lstm_matmuls(params, x, np.concatenate([np.zeros((1, B, d)), hs[:-1]]))
        c0 = np.zeros((B, d))
        return lambda: lstm_gate_pass(pre, c0)

    cfg, p, x, gh = _sru_setup(L, B, d, rng)
    U, _ = project(cfg, [p], x)
    if pass_ == "matmul_only":
        return lambda: project(cfg, [p], x)
    if arch == "sru_fused":
        if pass_ == "forward":
            return lambda: forward_layer(cfg, p, x)
        if pass_ == "elementwise_only":
            return lambda: fused_recurrence(cfg, p, U, x)

        def fwd_bwd():
            _, _, tape = forward_layer(cfg, p, x)
            return backward_fused(cfg, p, tape, gh)

        return fwd_bwd

    vf, vr, bf, br, alpha = p.v_f, p.v_r, p.b_f, p.b_r, p.alpha
    c0 = np.zeros((B, d))
    u4 = U[:, :, 0]
    if pass_ == "elementwise_only":
        return lambda: unfused_elementwise_forward(u4, x, vf, vr, bf, br, alpha, c0)
    if pass_ == "forward":
        return lambda: unfused_elementwise_forward(project(cfg, [p], x)[0][:, :, 0], x,
                                                   vf, vr, bf, br, alpha, c0)

    def naive_fwd_bwd():
        u = project(cfg, [p], x)[0][:, :, 0]
        _, cs = unfused_elementwise_forward(u, x, vf, vr, bf, br, alpha, c0)
        gU, g_skip, *_ = unfused_elementwise_backward(u, x, vf, vr, bf, br, alpha, c0, cs, gh)
        gu2 = gU.reshape(L * B, -1)
        gemm(gu2.T, x.reshape(L * B, d))
        return gemm(gu2, p.stacked()) + g_skip.reshape(L * B, d)

    return naive_fwd_bwd


def run_sweep(Ls: Sequence[int], ds: Sequence[int], B: int = 32,
              archs: Iterable[str] = ARCHS, passes: Iterable[str] = ("forward", "forward_backward"),
              reps: int = MIN_REPS, warmup: int = WARMUP, seed: int = 0,
              on_record: Callable[[BenchRecord], None] | None = None) -> list[BenchRecord]:
    """Time every (arch, pass, L, d) cell serially. A cell that runs out of
    memory is recorded with NaN timings and the sweep continues."""
    if reps < MIN_REPS:
        raise ParameterError(f"at least {MIN_REPS} timed repetitions are required, got {reps}")
    if B < 1 or not Ls or not ds or min(Ls) < 1 or min(ds) < 1:
        raise ParameterError("sweep needs positive B and non-empty positive L and d lists")
    records = []
    for arch in archs:
        for pass_ in passes:
            for L in Ls:
                for d in ds:
                    try:
                        fn = make_cell(arch, pass_, L, B, d, seed)
                        mean, std = time_callable(fn, reps, warmup)
                    except MemoryError:
                        mean, std = math.nan, math.nan
                    rec = BenchRecord(arch, pass_, L, B, d, mean, std, reps, warmup)
                    records.append(rec)
                    if on_record is not None:
                        on_record(rec)
    return records


def records_to_csv(records: Iterable[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def records_to_gnuplot(records: Sequence[BenchRecord]) -> str:
    """Whitespace-separated blocks, one per (arch, pass, L), two blank lines
    apart so gnuplot's ``index`` selects a series; rows are ``d ms_mean ms_std``."""
    out = [f"# reps={records[0].reps if records else MIN_REPS} warmup={WARMUP}"]
    series: dict[tuple, list[BenchRecord]] = {}
    for r in records:
        series.setdefault((r.arch, r.pass_, r.L, r.B), []).append(r)
    for (arch, pass_, L, B), rows in series.items():
        out.append(f"# arch={arch} pass={pass_} L={L} B={B}")
        out.append("# d ms_mean ms_std")
        for r in rows:
            out.append(f"{r.d} {r.ms_mean!r} {r.ms_std!r}")
        out.append("")
        out.append("")
    return "\n".join(out)
