"""The SRU layer: batched projection, fused recurrence and highway output."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence, Union

import numpy as np

from srukit import kernels
from srukit.exceptions import ConsistencyError, DimensionError, ParameterError
from srukit.tensor_core import gemm, stable_sigmoid


@dataclass(frozen=True)
class SruLayerConfig:
    d_in: int
    d_out: int
    bidirectional: bool = False
    highway_bias: float = 0.0
    use_state_in_gates: bool = True
    use_scaling_correction: bool = True
    use_highway: bool = True
    projection_dim: int | None = None

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ParameterError(f"d_in and d_out must be >= 1, got {self.d_in}, {self.d_out}")
        if self.projection_dim is not None:
            limit = min(self.d_in, 3 * self.d_out)
            if not 1 <= self.projection_dim < limit:
                raise ParameterError(
                    f"projection_dim must be in [1, {limit}), got {self.projection_dim}"
                )

    @property
    def dirs(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def skip_projection(self) -> bool:
        """True when the highway needs a learned ``W_h`` to match widths."""
        return self.use_highway and self.d_in != self.d_out

    @property
    def blocks(self) -> int:
        return 4 if self.skip_projection else 3

    @property
    def factorized(self) -> bool:
        return self.projection_dim is not None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SruLayerParams:
    """Learnable tensors of one direction.

    The input projection lives either in ``weight`` (the stacked
    ``[W; W_f; W_r]`` of shape ``(3*d_out, d_in)``) or in the factor pair
    ``P (3*d_out, d')`` and ``Q (d', d_in)`` with ``weight == P @ Q``.
    """

    v_f: np.ndarray
    v_r: np.ndarray
    b_f: np.ndarray
    b_r: np.ndarray
    weight: np.ndarray | None = None
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    W_h: np.ndarray | None = None
    alpha: float = 1.0

    def __post_init__(self):
        dense = self.weight is not None
        fact = self.P is not None or self.Q is not None
        if dense == fact or (fact and (self.P is None or self.Q is None)):
            raise ParameterError("exactly one of weight or the (P, Q) pair must be given")

    @property
    def d_out(self) -> int:
        return self.v_f.shape[0]

    @property
    def d_in(self) -> int:
        return (self.weight if self.weight is not None else self.Q).shape[1]

    def stacked(self) -> np.ndarray:
        if self.weight is not None:
            return self.weight
        return self.P @ self.Q

    @property
    def W(self) -> np.ndarray:
        return self.stacked()[: self.d_out]

    @property
    def W_f(self) -> np.ndarray:
        return self.stacked()[self.d_out : 2 * self.d_out]

    @property
    def W_r(self) -> np.ndarray:
        return self.stacked()[2 * self.d_out :]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Learnable tensors in declaration order."""
        out = []
        for name in ("weight", "P", "Q", "W_h", "v_f", "v_r", "b_f", "b_r"):
            arr = getattr(self, name)
            if arr is not None:
                out.append((name, arr))
        return out

    def copy(self) -> "SruLayerParams":
        kw = {n: (None if a is None else a.copy()) for n, a in
              ((f.name, getattr(self, f.name)) for f in fields(self) if f.name != "alpha")}
        return SruLayerParams(alpha=self.alpha, **kw)

    def astype(self, dtype) -> "SruLayerParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "alpha"}
        kw = {n: (None if a is None else a.astype(dtype)) for n, a in kw.items()}
        return SruLayerParams(alpha=self.alpha, **kw)

    def zeros_like(self) -> "SruLayerParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "alpha"}
        kw = {n: (None if a is None else np.zeros_like(a)) for n, a in kw.items()}
        return SruLayerParams(alpha=0.0, **kw)

    def materialized(self) -> "SruLayerParams":
        """Dense copy with ``weight = P @ Q`` when factorized."""
        if self.weight is not None:
            return self
        return replace(self, weight=self.P @ self.Q, P=None, Q=None)


ParamsArg = Union[SruLayerParams, Sequence[SruLayerParams]]


@dataclass
class SruTape:
    """Activations saved by the forward pass for :func:`srukit.grad.backward_fused`.

    ``U`` keeps the full projection ``(L, B, D, K, d)``; ``U_dir(k)`` gives the
    ``(L, B, 3*d)`` view of one direction. ``c`` is ``(D, L, B, d)`` and
    ``c0`` is ``(B, D*d)``. The gates ``f`` and ``r`` are not stored; they
    are recomputed (and cached) on first access.
    """

    cfg: SruLayerConfig
    x: np.ndarray
    U: np.ndarray
    c: np.ndarray
    c0: np.ndarray
    h: np.ndarray
    vectors: tuple = field(repr=False)
    proj: np.ndarray | None = None
    param_ids: tuple = field(default=(), repr=False)
    _gates: tuple | None = field(default=None, repr=False)

    def _gate_pair(self):
        if self._gates is None:
            D, L, B, d = self.c.shape
            c0 = np.ascontiguousarray(self.c0.reshape(B, D, d).transpose(1, 0, 2))
            vf, vr, bf, br = self.vectors
            self._gates = kernels.recompute_gates(self.U, vf, vr, bf, br, c0, self.c,
                                                  self.cfg.use_state_in_gates)
        return self._gates

    @property
    def f(self) -> np.ndarray:
        return self._gate_pair()[0]

    @property
    def r(self) -> np.ndarray:
        return self._gate_pair()[1]

    def U_dir(self, k: int = 0) -> np.ndarray:
        L, B, _, _, d = self.U.shape
        return self.U[:, :, k, :3, :].reshape(L, B, 3 * d)

    def validate(self) -> list[str]:
        """Problems found in the recorded values; empty when healthy."""
        issues = []
        for name in ("x", "U", "c", "h"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                issues.append(f"{name} contains non-finite values")
        for name in ("f", "r"):
            g = getattr(self, name)
            if np.any(np.isnan(g)):
                issues.append(f"gate {name} contains NaN")
            elif np.any((g <= 0.0) | (g >= 1.0)):
                issues.append(f"gate {name} saturated outside (0, 1)")
        return issues


def as_dirs(cfg: SruLayerConfig, params: ParamsArg) -> list[SruLayerParams]:
    plist = [params] if isinstance(params, SruLayerParams) else list(params)
    if len(plist) != cfg.dirs:
        raise DimensionError(f"expected {cfg.dirs} parameter set(s), got {len(plist)}")
    for p in plist:
        if p.d_in != cfg.d_in or p.d_out != cfg.d_out:
            raise DimensionError(
                f"parameters are {p.d_out}x{p.d_in}, config wants {cfg.d_out}x{cfg.d_in}"
            )
        if (p.weight is None) != cfg.factorized:
            raise ParameterError("projection source does not match config.projection_dim")
        if cfg.skip_projection and p.W_h is None:
            raise ParameterError("config needs W_h (d_in != d_out) but params have none")
    return plist


def _check_input(cfg: SruLayerConfig, x: np.ndarray) -> None:
    if x.ndim != 3:
        raise DimensionError(f"input must be (L, B, d_in), got shape {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("sequence length must be >= 1")
    if x.shape[2] != cfg.d_in:
        raise DimensionError(f"input feature size {x.shape[2]} != d_in {cfg.d_in}")


def _initial_state(cfg: SruLayerConfig, c0, B: int, dtype) -> np.ndarray:
    width = cfg.dirs * cfg.d_out
    if c0 is None:
        return np.zeros((B, width), dtype=dtype)
    c0 = np.asarray(c0, dtype=dtype)
    if c0.shape != (B, width):
        raise DimensionError(f"c0 must have shape {(B, width)}, got {c0.shape}")
    return c0


def compute_U(params: SruLayerParams, x: np.ndarray) -> np.ndarray:
    """``(L, B, 3*d_out)`` projection of every time step in one gemm.

    With factor matrices the product is taken as ``(x Q^T) P^T`` so the
    stacked matrix is never formed.
    """
    if x.ndim != 3 or x.shape[2] != params.d_in:
        raise DimensionError(f"input of shape {x.shape} does not match d_in={params.d_in}")
    L, B, _ = x.shape
    x2 = x.reshape(L * B, -1)
    if params.weight is not None:
        u = gemm(x2, params.weight.T)
    else:
        u = gemm(gemm(x2, params.Q.T), params.P.T)
    return u.reshape(L, B, 3 * params.d_out)


def _stack_weights(cfg: SruLayerConfig, plist: list[SruLayerParams]) -> np.ndarray:
    """Dense ``(D*K*d, d_in)`` matrix feeding the single projection gemm."""
    blocks = []
    for p in plist:
        blocks.append(p.weight)
        if cfg.skip_projection:
            blocks.append(p.W_h)
    return np.concatenate(blocks, axis=0)


def project(cfg: SruLayerConfig, plist: list[SruLayerParams], x: np.ndarray):
    """Projection for all directions; returns ``(U, proj)``.

    ``U`` has shape ``(L, B, D, K, d)``. ``proj`` is the low-rank activation
    ``x Q^T`` for all directions, ``(L*B, D*d')``, or None for dense layers.
    """
    L, B, _ = x.shape
    D, K, d = cfg.dirs, cfg.blocks, cfg.d_out
    x2 = x.reshape(L * B, cfg.d_in)
    if not cfg.factorized:
        u = gemm(x2, _stack_weights(cfg, plist).T)
        return u.reshape(L, B, D, K, d), None
    dp = cfg.projection_dim
    q_all = np.concatenate([p.Q for p in plist], axis=0)
    proj = gemm(x2, q_all.T)
    u = np.empty((L * B, D, K, d), dtype=proj.dtype)
    for k, p in enumerate(plist):
        u[:, k, :3, :] = gemm(proj[:, k * dp : (k + 1) * dp], p.P.T).reshape(L * B, 3, d)
    if cfg.skip_projection:
        wh = np.concatenate([p.W_h for p in plist], axis=0)
        u[:, :, 3, :] = gemm(x2, wh.T).reshape(L * B, D, d)
    return u.reshape(L, B, D, K, d), proj


def _vectors(cfg, plist, dtype):
    vf = np.stack([p.v_f for p in plist]).astype(dtype, copy=False)
    vr = np.stack([p.v_r for p in plist]).astype(dtype, copy=False)
    bf = np.stack([p.b_f for p in plist]).astype(dtype, copy=False)
    br = np.stack([p.b_r for p in plist]).astype(dtype, copy=False)
    alpha = np.array([p.alpha if cfg.use_scaling_correction else 1.0 for p in plist], dtype=dtype)
    return vf, vr, bf, br, alpha


def _skip_source(cfg: SruLayerConfig, x: np.ndarray) -> np.ndarray:
    if cfg.blocks == 3 and cfg.use_highway:
        return np.ascontiguousarray(x)
    return np.zeros((1, 1, 1), dtype=x.dtype)


def fused_recurrence(cfg: SruLayerConfig, params: ParamsArg, U: np.ndarray, x: np.ndarray,
                     c0: np.ndarray | None = None) -> SruTape:
    """Elementwise recurrence over precomputed projections, one pass per lane.

    ``U`` is either the 5-d layout from :func:`project` or, for a
    unidirectional layer without skip projection, ``(L, B, 3*d_out)``.
    """
    plist = as_dirs(cfg, params)
    _check_input(cfg, x)
    L, B, _ = x.shape
    D, K, d = cfg.dirs, cfg.blocks, cfg.d_out
    if U.ndim == 3:
        if U.shape[:2] != (L, B) or U.shape[2] != K * d or D != 1:
            raise DimensionError(f"U has shape {U.shape}, expected {(L, B, K * d)}")
        U = U.reshape(L, B, 1, K, d)
    if U.shape != (L, B, D, K, d):
        raise DimensionError(f"U has shape {U.shape}, expected {(L, B, D, K, d)}")
    U = np.ascontiguousarray(U)
    c0 = _initial_state(cfg, c0, B, U.dtype)
    c0_lanes = np.ascontiguousarray(c0.reshape(B, D, d).transpose(1, 0, 2))
    vf, vr, bf, br, alpha = _vectors(cfg, plist, U.dtype)
    h, c = kernels.fused_forward(
        U, _skip_source(cfg, x), vf, vr, bf, br, alpha, c0_lanes,
        cfg.use_state_in_gates, cfg.use_highway,
    )
    return SruTape(cfg=cfg, x=x, U=U, c=c, c0=c0, h=h, vectors=(vf, vr, bf, br),
                   param_ids=tuple(id(p) for p in plist))


def last_state(tape: SruTape) -> np.ndarray:
    """Final state per direction, ``(B, D*d)``: forward at the last step,
    backward at the first."""
    D, L, B, d = tape.c.shape
    parts = [tape.c[0, L - 1]]
    if D == 2:
        parts.append(tape.c[1, 0])
    return np.concatenate(parts, axis=1)


def forward_layer(cfg: SruLayerConfig, params: ParamsArg, x: np.ndarray,
                  c0: np.ndarray | None = None):
    """Full layer forward; returns ``(h, c_last, tape)``."""
    plist = as_dirs(cfg, params)
    _check_input(cfg, x)
    U, proj = project(cfg, plist, x)
    tape = fused_recurrence(cfg, plist, U, x, c0)
    tape.proj = proj
    return tape.h, last_state(tape), tape


def naive_reference_forward(cfg: SruLayerConfig, params: ParamsArg, x: np.ndarray,
                            c0: np.ndarray | None = None):
    """Step-by-step transcription of the layer equations; the oracle for the
    fused path. Returns ``(h, c_last)``."""
    plist = as_dirs(cfg, params)
    _check_input(cfg, x)
    L, B, _ = x.shape
    d = cfg.d_out
    c0 = _initial_state(cfg, c0, B, x.dtype)
    h = np.empty((L, B, cfg.dirs * d), dtype=x.dtype)
    finals = []
    for k, p in enumerate(plist):
        stacked = p.stacked()
        W, W_f, W_r = stacked[:d], stacked[d : 2 * d], stacked[2 * d :]
        alpha = p.alpha if cfg.use_scaling_correction else 1.0
        c = c0[:, k * d : (k + 1) * d].copy()
        order = range(L) if k == 0 else range(L - 1, -1, -1)
        for t in order:
            xt = x[t]
            f_pre = xt @ W_f.T + p.b_f
            if cfg.use_state_in_gates:
                f_pre = f_pre + p.v_f * c
            f = stable_sigmoid(f_pre)
            c = f * c + (1.0 - f) * (xt @ W.T)
            r_pre = xt @ W_r.T + p.b_r
            if cfg.use_state_in_gates:
                r_pre = r_pre + p.v_r * c
            r = stable_sigmoid(r_pre)
            if cfg.use_highway:
                skip = xt if cfg.d_in == cfg.d_out else xt @ p.W_h.T
                h[t, :, k * d : (k + 1) * d] = r * c + (1.0 - r) * skip * alpha
            else:
                h[t, :, k * d : (k + 1) * d] = c
        finals.append(c)
    return h, np.concatenate(finals, axis=1)


def check_tape(cfg: SruLayerConfig, plist: list[SruLayerParams], tape: SruTape) -> None:
    if tape.cfg != cfg:
        raise ConsistencyError("tape was recorded with a different layer config")
    if tape.param_ids and tape.param_ids != tuple(id(p) for p in plist):
        raise ConsistencyError("tape was recorded with different parameter objects")
    D, L, B, d = tape.c.shape
    if D != cfg.dirs or d != cfg.d_out or tape.x.shape != (L, B, cfg.d_in):
        raise ConsistencyError("tape shapes do not match the layer config")
