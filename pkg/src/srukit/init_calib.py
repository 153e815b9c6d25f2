"""Variance-calibrated initialization and the variance-ratio probe."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from srukit.exceptions import ParameterError
from srukit.layer import SruLayerConfig, SruLayerParams, forward_layer
from srukit.tensor_core import SeededRng, stream_id, uniform_fill

PROBE_MODES = ("iid", "correlated", "embedding-like")
PROBE_SEQ_LEN = 256
PROBE_BATCH = 64
PROBE_BURN_IN = 16
EMBEDDING_SHARED_FRACTION = 0.4


def alpha_for_bias(b: float) -> float:
    """Scaling constant that keeps Var[h] close to Var[x] for reset bias ``b``."""
    return math.sqrt(1.0 + 2.0 * math.exp(b))


def h_variance_bounds_check(b: float) -> tuple[float, float]:
    """Analytic ``(low, high)`` bounds on Var[h]/Var[x] with no scaling correction."""
    if b > 0:
        # divide through by e^{2b} so large biases do not overflow
        t = math.exp(-b)
        low = (1.0 + 3.0 * t * t) / (3.0 * (1.0 + t) ** 2)
        high = (1.0 + t * t) / (1.0 + t) ** 2
    else:
        e = math.exp(b)
        low = (e * e + 3.0) / (3.0 * (e + 1.0) ** 2)
        high = (e * e + 1.0) / (e + 1.0) ** 2
    return low, high


def _fill(shape, fan_in, rng, name, dtype):
    t = np.empty(shape, dtype=dtype)
    return uniform_fill(t, math.sqrt(3.0 / fan_in), rng.child(stream_id(f"{rng.stream}/{name}")))


def init_layer(cfg: SruLayerConfig, rng: SeededRng, dtype=np.float64):
    """Fresh parameters: matrices and ``v`` vectors uniform with variance
    ``1/fan_in``, ``b_f = 0`` and ``b_r = highway_bias``.

    Returns one :class:`SruLayerParams`, or a pair for bidirectional layers.
    """
    d, d_in = cfg.d_out, cfg.d_in
    if cfg.use_scaling_correction:
        alpha = alpha_for_bias(cfg.highway_bias)
    else:
        alpha = 1.0
    out = []
    for name in ("fwd", "bwd")[: cfg.dirs]:
        kw = {}
        if cfg.factorized:
            dp = cfg.projection_dim
            kw["P"] = _fill((3 * d, dp), dp, rng, f"{name}.P", dtype)
            kw["Q"] = _fill((dp, d_in), d_in, rng, f"{name}.Q", dtype)
        else:
            kw["weight"] = _fill((3 * d, d_in), d_in, rng, f"{name}.weight", dtype)
        if cfg.skip_projection:
            kw["W_h"] = _fill((d, d_in), d_in, rng, f"{name}.W_h", dtype)
        out.append(SruLayerParams(
            v_f=_fill((d,), d, rng, f"{name}.v_f", dtype),
            v_r=_fill((d,), d, rng, f"{name}.v_r", dtype),
            b_f=np.zeros(d, dtype=dtype),
            b_r=np.full(d, cfg.highway_bias, dtype=dtype),
            alpha=alpha,
            **kw,
        ))
    return out[0] if cfg.dirs == 1 else tuple(out)


@dataclass
class VarianceProfile:
    var_c_ratios: list[float]
    var_h_ratios: list[float]
    input_correlation_mode: str
    depth: int = field(init=False)

    def __post_init__(self):
        if len(self.var_c_ratios) != len(self.var_h_ratios):
            raise ParameterError("one c ratio and one h ratio per layer")
        self.depth = len(self.var_c_ratios)

    def rows(self) -> list[tuple[int, float, float, str]]:
        return [(i + 1, c, h, self.input_correlation_mode)
                for i, (c, h) in enumerate(zip(self.var_c_ratios, self.var_h_ratios))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "var_c_ratio", "var_h_ratio", "mode"])
        for layer, c, h, mode in self.rows():
            w.writerow([layer, repr(c), repr(h), mode])
        return buf.getvalue()


def probe_inputs(mode: str, d: int, rng: SeededRng, seq_len: int = PROBE_SEQ_LEN,
                 batch: int = PROBE_BATCH) -> np.ndarray:
    """Synthetic ``(L, B, d)`` inputs with per-entry variance about ``1/d``.

    ``iid`` draws every step independently; ``correlated`` repeats a single
    vector for the whole sequence; ``embedding-like`` mixes a per-sequence
    shared direction with per-token noise and normalizes each vector to unit
    length, so any two steps have cosine similarity near 0.4.
    """
    if mode not in PROBE_MODES:
        raise ParameterError(f"unknown probe mode {mode!r}; valid modes: {', '.join(PROBE_MODES)}")
    g = rng.child(stream_id(f"probe-input/{mode}")).generator()
    scale = 1.0 / math.sqrt(d)
    if mode == "iid":
        return g.standard_normal((seq_len, batch, d)) * scale
    if mode == "correlated":
        x = g.standard_normal((1, batch, d)) * scale
        return np.repeat(x, seq_len, axis=0)
    shared = EMBEDDING_SHARED_FRACTION
    topic = g.standard_normal((1, batch, d))
    noise = g.standard_normal((seq_len, batch, d))
    x = math.sqrt(shared) * topic + math.sqrt(1.0 - shared) * noise
    return x / np.linalg.norm(x, axis=2, keepdims=True)


def _var(a: np.ndarray) -> float:
    return float(np.var(a[PROBE_BURN_IN:]))


def variance_ratio_probe(depth: int, d: int, mode: str, rng: SeededRng, *,
                         highway_bias: float = 0.0, use_scaling_correction: bool = True,
                         seq_len: int = PROBE_SEQ_LEN, batch: int = PROBE_BATCH) -> VarianceProfile:
    """Measure Var[c]/Var[x] and Var[h]/Var[x] per layer of a freshly
    initialized stack. Each ratio is taken against that layer's own input;
    the first ``PROBE_BURN_IN`` steps are excluded so the zero initial state
    does not bias the second moments."""
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    if d < 64:
        raise ParameterError(f"d must be >= 64 for stable variance estimates, got {d}")
    if seq_len <= PROBE_BURN_IN:
        raise ParameterError(f"seq_len must exceed the burn-in of {PROBE_BURN_IN} steps")
    x = probe_inputs(mode, d, rng, seq_len, batch)
    cfg = SruLayerConfig(d_in=d, d_out=d, highway_bias=highway_bias,
                         use_scaling_correction=use_scaling_correction)
    c_ratios, h_ratios = [], []
    for layer in range(depth):
        params = init_layer(cfg, rng.child(stream_id(f"probe-layer/{layer}")))
        h, _, tape = forward_layer(cfg, params, x)
        vx = _var(x)
        c_ratios.append(_var(tape.c[0]) / vx)
        h_ratios.append(_var(h) / vx)
        x = h
    return VarianceProfile(c_ratios, h_ratios, mode)
