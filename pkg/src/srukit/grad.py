"""Reverse-mode gradients of the SRU layer and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from srukit import kernels
from srukit.exceptions import DimensionError, NonFiniteError, ParameterError
from srukit.layer import (
    ParamsArg,
    SruLayerConfig,
    SruLayerParams,
    SruTape,
    _stack_weights,
    _vectors,
    _skip_source,
    as_dirs,
    check_tape,
    forward_layer,
)
from srukit.tensor_core import gemm


@dataclass
class SruGradients:
    """Gradients of one layer.

    ``params`` mirrors the parameter sets (one per direction), reusing
    :class:`SruLayerParams` so every learnable tensor has a slot of the same
    shape. ``x`` is ``(L, B, d_in)`` and ``c0`` is ``(B, D*d_out)``.
    """

    params: list[SruLayerParams]
    x: np.ndarray
    c0: np.ndarray

    def __getattr__(self, name):
        # g_W, g_v_f, ... address the first (or only) direction
        if name.startswith("g_") and "params" in self.__dict__:
            return getattr(self.__dict__["params"][0], name[2:])
        raise AttributeError(name)


def backward_fused(cfg: SruLayerConfig, params: ParamsArg, tape: SruTape,
                   grad_h: np.ndarray, grad_c_last: np.ndarray | None = None) -> SruGradients:
    """Gradients of ``sum(grad_h * h) + sum(grad_c_last * c_last)``.

    The elementwise part runs lane-parallel in reverse time; the projection
    gradients are then formed with one gemm over all ``L*B`` rows.
    """
    plist = as_dirs(cfg, params)
    check_tape(cfg, plist, tape)
    U, x = tape.U, tape.x
    L, B, D, K, d = U.shape
    if grad_h.shape != (L, B, D * d):
        raise DimensionError(f"grad_h has shape {grad_h.shape}, expected {(L, B, D * d)}")
    dtype = U.dtype
    if grad_c_last is None:
        grad_c_last = np.zeros((B, D * d), dtype=dtype)
    elif grad_c_last.shape != (B, D * d):
        raise DimensionError(f"grad_c_last has shape {grad_c_last.shape}, expected {(B, D * d)}")
    gcl = np.ascontiguousarray(grad_c_last.reshape(B, D, d).transpose(1, 0, 2), dtype=dtype)
    c0 = np.ascontiguousarray(tape.c0.reshape(B, D, d).transpose(1, 0, 2))
    vf, vr, bf, br, alpha = _vectors(cfg, plist, dtype)
    gu, gskip, gvf, gvr, gbf, gbr, gc0 = kernels.fused_backward(
        U, _skip_source(cfg, x), vf, vr, bf, br, alpha, c0, tape.c,
        cfg.use_state_in_gates, cfg.use_highway,
        np.ascontiguousarray(grad_h, dtype=dtype), gcl,
    )

    x2 = x.reshape(L * B, cfg.d_in)
    gu2 = gu.reshape(L * B, D * K * d)
    grads = [p.zeros_like() for p in plist]
    if not cfg.factorized:
        g_all = gemm(gu2.T, x2)
        gx = gemm(gu2, _stack_weights(cfg, plist)).reshape(L, B, cfg.d_in)
        for k, g in enumerate(grads):
            blk = g_all[k * K * d : (k + 1) * K * d]
            g.weight[...] = blk[: 3 * d]
            if K == 4:
                g.W_h[...] = blk[3 * d :]
    else:
        dp = cfg.projection_dim
        proj = tape.proj
        if proj is None:
            raise ParameterError("factorized backward needs the tape produced by forward_layer")
        g_proj = np.empty_like(proj)
        gu5 = gu.reshape(L * B, D, K, d)
        for k, (p, g) in enumerate(zip(plist, grads)):
            gU = np.ascontiguousarray(gu5[:, k, :3, :]).reshape(L * B, 3 * d)
            pk = proj[:, k * dp : (k + 1) * dp]
            g.P[...] = gemm(gU.T, pk)
            g_proj[:, k * dp : (k + 1) * dp] = gemm(gU, p.P)
        g_q = gemm(g_proj.T, x2)
        q_all = np.concatenate([p.Q for p in plist], axis=0)
        gx = gemm(g_proj, q_all)
        for k, g in enumerate(grads):
            g.Q[...] = g_q[k * dp : (k + 1) * dp]
        if K == 4:
            gs = np.ascontiguousarray(gu5[:, :, 3, :]).reshape(L * B, D * d)
            g_wh = gemm(gs.T, x2)
            wh_all = np.concatenate([p.W_h for p in plist], axis=0)
            gx += gemm(gs, wh_all)
            for k, g in enumerate(grads):
                g.W_h[...] = g_wh[k * d : (k + 1) * d]
        gx = gx.reshape(L, B, cfg.d_in)
    if K == 3 and cfg.use_highway:
        for k in range(D):
            gx += gskip[k]
    for k, g in enumerate(grads):
        g.v_f[...] = gvf[k].sum(axis=0)
        g.v_r[...] = gvr[k].sum(axis=0)
        g.b_f[...] = gbf[k].sum(axis=0)
        g.b_r[...] = gbr[k].sum(axis=0)
    g_c0 = gc0.transpose(1, 0, 2).reshape(B, D * d)
    return SruGradients(params=grads, x=gx, c0=np.ascontiguousarray(g_c0))


def fd_gradient_oracle(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray,
                       eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``theta``."""
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        lp = float(loss_fn(theta))
        theta[i] = old - eps
        lm = float(loss_fn(theta))
        theta[i] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"non-finite loss when perturbing coordinate {i}", index=i)
        grad[i] = (lp - lm) / (2.0 * eps)
    return grad


# -- flat views used by the certification suites ---------------------------

def param_groups(cfg: SruLayerConfig, plist: list[SruLayerParams]) -> list[tuple[str, np.ndarray]]:
    """Named learnable arrays across directions (``fwd.v_f``, ``bwd.weight``, ...)."""
    names = ("fwd", "bwd")
    out = []
    for k, p in enumerate(plist):
        for n, a in p.named_arrays():
            out.append((f"{names[k]}.{n}", a))
    return out


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.empty(0)


def unflatten_into(theta: np.ndarray, arrays: list[np.ndarray]) -> None:
    i = 0
    for a in arrays:
        n = a.size
        a[...] = theta[i : i + n].reshape(a.shape)
        i += n


def layer_objective(cfg: SruLayerConfig, plist, x, c0, grad_h, grad_c_last) -> float:
    h, c_last, _ = forward_layer(cfg, plist, x, c0)
    return float(np.sum(grad_h * h) + np.sum(grad_c_last * c_last))


def check_layer_gradients(cfg: SruLayerConfig, plist: list[SruLayerParams], x, c0, grad_h,
                          grad_c_last, eps: float = 1e-5,
                          corrupt: Callable[[SruGradients], None] | None = None):
    """Compare :func:`backward_fused` with central differences.

    Returns a dict mapping group name (``fwd.v_f``, ``x``, ``c0``, ...) to
    ``(analytic, numeric)`` flat arrays. ``corrupt`` lets tests tamper with
    the analytic gradients before comparison.
    """
    _, _, tape = forward_layer(cfg, plist, x, c0)
    grads = backward_fused(cfg, plist, tape, grad_h, grad_c_last)
    if corrupt is not None:
        corrupt(grads)
    groups = param_groups(cfg, plist) + [("x", x), ("c0", c0)]
    ggroups = param_groups(cfg, grads.params) + [("x", grads.x), ("c0", grads.c0)]
    arrays = [a for _, a in groups]
    theta0 = flatten(arrays)

    def loss(theta):
        unflatten_into(theta, arrays)
        return layer_objective(cfg, plist, x, c0, grad_h, grad_c_last)

    numeric = fd_gradient_oracle(loss, theta0.copy(), eps)
    unflatten_into(theta0, arrays)
    out = {}
    i = 0
    for (name, a), (_, g) in zip(groups, ggroups):
        out[name] = (g.ravel().copy(), numeric[i : i + a.size])
        i += a.size
    return out


def gradient_errors(analytic: np.ndarray, numeric: np.ndarray):
    """Elementwise ``(abs_err, rel_err)``."""
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > 0, abs_err / denom, 0.0)
    return abs_err, rel


def within_tolerance(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7) -> np.ndarray:
    abs_err, rel = gradient_errors(analytic, numeric)
    return (rel <= rtol) | (abs_err <= atol)
