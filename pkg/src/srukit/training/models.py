"""Model stacks: SRU char-level LM, SRU sequence classifier, LSTM char-level LM.

Every model keeps its learnable arrays in an ordered name -> array mapping
(``model.params``); gradients come back under the same names, which is what
the optimizer, the clipping code and the checkpoint writer rely on.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from srukit.exceptions import DimensionError, ParameterError
from srukit.grad import backward_fused
from srukit.init_calib import init_layer
from srukit.layer import SruLayerConfig, SruLayerParams, forward_layer
from srukit.tensor_core import SeededRng, gemm, stream_id, uniform_fill
from srukit.training.lstm import (
    LstmParams,
    init_lstm,
    lstm_backward,
    lstm_forward,
    lstm_param_count,
)

MODEL_KINDS = ("char_lm", "classifier", "lstm_char_lm")
DIRECTION_NAMES = ("fwd", "bwd")
SRU_PARAM_NAMES = ("weight", "P", "Q", "W_h", "v_f", "v_r", "b_f", "b_r")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layers: int
    d_model: int
    vocab_size: int
    d_proj: int | None = None
    bidirectional: bool = False
    highway_bias: float = 0.0
    dropout_p: float = 0.0
    n_classes: int = 2
    use_state_in_gates: bool = True
    use_scaling_correction: bool = True
    use_highway: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ParameterError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.layers < 1 or self.d_model < 1 or self.vocab_size < 1:
            raise ParameterError("layers, d_model and vocab_size must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.bidirectional and self.kind != "classifier":
            raise ParameterError("language models must be unidirectional")
        if self.kind == "classifier" and self.n_classes < 2:
            raise ParameterError("a classifier needs at least two classes")

    def layer_configs(self) -> list[SruLayerConfig]:
        dirs = 2 if self.bidirectional else 1
        out = []
        for i in range(self.layers):
            d_in = self.d_model if i == 0 else dirs * self.d_model
            out.append(SruLayerConfig(
                d_in=d_in, d_out=self.d_model, bidirectional=self.bidirectional,
                highway_bias=self.highway_bias, use_state_in_gates=self.use_state_in_gates,
                use_scaling_correction=self.use_scaling_correction,
                use_highway=self.use_highway, projection_dim=self.d_proj,
            ))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def sru_layer_param_count(cfg: SruLayerConfig) -> int:
    d, d_in = cfg.d_out, cfg.d_in
    if cfg.factorized:
        proj = 3 * d * cfg.projection_dim + cfg.projection_dim * d_in
    else:
        proj = 3 * d * d_in
    skip = d * d_in if cfg.skip_projection else 0
    return cfg.dirs * (proj + skip + 4 * d)


def count_params(spec: ModelSpec, include_embeddings: bool = True) -> int:
    """Exact number of learnable scalars the model built from ``spec`` holds."""
    d, V = spec.d_model, spec.vocab_size
    total = V * d if include_embeddings else 0
    if spec.kind == "lstm_char_lm":
        total += sum(lstm_param_count(d, d) for _ in range(spec.layers))
        return total + (V * d + V if include_embeddings else 0)
    total += sum(sru_layer_param_count(c) for c in spec.layer_configs())
    if not include_embeddings:
        return total
    if spec.kind == "classifier":
        width = (2 if spec.bidirectional else 1) * d
        return total + spec.n_classes * width + spec.n_classes
    return total + V * d + V


def _uniform(shape, fan_in, rng, name):
    t = np.empty(shape)
    return uniform_fill(t, math.sqrt(3.0 / fan_in), rng.child(stream_id(name)))


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy (nats) and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), targets].mean())
    g = ez / s
    g[np.arange(n), targets] -= 1.0
    g /= n
    return loss, g


def _dropout_mask(shape, p: float, gen: np.random.Generator | None):
    if p <= 0.0 or gen is None:
        return None
    return (gen.random(shape) >= p) / (1.0 - p)


class _Model:
    spec: ModelSpec

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def zero_states(self, B: int):
        raise NotImplementedError


class SruModel(_Model):
    """Embedding -> stacked SRU layers -> linear head.

    For ``char_lm`` the head is applied at every position; for ``classifier``
    only the final time step's top-layer output is read out.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, alphas: list[float] | None = None):
        super().__init__()
        if spec.kind == "lstm_char_lm":
            raise ParameterError("use LstmModel for lstm_char_lm")
        self.spec = spec
        self.configs = spec.layer_configs()
        rng = SeededRng(seed)
        d, V = spec.d_model, spec.vocab_size
        self.params["embed"] = _uniform((V, d), d, rng, "embed")
        self.layers: list[list[SruLayerParams]] = []
        for i, cfg in enumerate(self.configs):
            p = init_layer(cfg, rng.child(stream_id(f"layers.{i}")))
            plist = [p] if isinstance(p, SruLayerParams) else list(p)
            if alphas is not None:
                for q in plist:
                    q.alpha = alphas[i]
            self.layers.append(plist)
            for k, q in enumerate(plist):
                for name, arr in q.named_arrays():
                    self.params[f"layers.{i}.{DIRECTION_NAMES[k]}.{name}"] = arr
        width = (2 if spec.bidirectional else 1) * d
        n_out = spec.n_classes if spec.kind == "classifier" else V
        self.params["out.W"] = _uniform((n_out, width), width, rng, "out.W")
        self.params["out.b"] = np.zeros(n_out)

    @property
    def alphas(self) -> list[float]:
        return [plist[0].alpha for plist in self.layers]

    def zero_states(self, B: int) -> list[np.ndarray]:
        return [np.zeros((B, c.dirs * c.d_out)) for c in self.configs]

    def _stack_forward(self, tokens, states, gen):
        x = self.params["embed"][tokens]
        caches, new_states = [], []
        for i, (cfg, plist) in enumerate(zip(self.configs, self.layers)):
            mask = _dropout_mask(x.shape, self.spec.dropout_p, gen)
            if mask is not None:
                x = x * mask
            c0 = states[i] if states is not None else None
            x, c_last, tape = forward_layer(cfg, plist, x, c0)
            caches.append((tape, mask))
            new_states.append(c_last)
        return x, new_states, caches

    def _stack_backward(self, gh, tokens, caches, grads):
        for i in range(len(self.layers) - 1, -1, -1):
            tape, mask = caches[i]
            g = backward_fused(self.configs[i], self.layers[i], tape, gh)
            for k, gp in enumerate(g.params):
                for name, arr in gp.named_arrays():
                    grads[f"layers.{i}.{DIRECTION_NAMES[k]}.{name}"] = arr
            gh = g.x if mask is None else g.x * mask
        g_embed = np.zeros_like(self.params["embed"])
        np.add.at(g_embed, tokens.ravel(), gh.reshape(-1, gh.shape[-1]))
        grads["embed"] = g_embed

    def _ordered(self, grads):
        return OrderedDict((k, grads[k]) for k in self.params)

    # -- language model -----------------------------------------------------

    def lm_loss_and_grad(self, inputs, targets, states=None, gen=None):
        """Mean next-token cross-entropy over an ``(L, B)`` window.

        ``states`` carries each layer's final ``c`` from the previous window;
        no gradient flows into it. Returns ``(loss, grads, new_states)``.
        """
        h, new_states, caches = self._stack_forward(inputs, states, gen)
        L, B, w = h.shape
        h2 = h.reshape(L * B, w)
        logits = gemm(h2, self.params["out.W"].T) + self.params["out.b"]
        loss, g = softmax_xent(logits, targets.reshape(-1))
        grads = {"out.W": gemm(g.T, h2), "out.b": g.sum(axis=0)}
        gh = gemm(g, self.params["out.W"]).reshape(L, B, w)
        self._stack_backward(gh, inputs, caches, grads)
        return loss, self._ordered(grads), new_states

    def lm_loss(self, inputs, targets, states=None):
        h, new_states, _ = self._stack_forward(inputs, states, None)
        L, B, w = h.shape
        logits = gemm(h.reshape(L * B, w), self.params["out.W"].T) + self.params["out.b"]
        loss, _ = softmax_xent(logits, targets.reshape(-1))
        return loss, new_states

    # -- classifier ---------------------------------------------------------

    def clf_logits(self, tokens):
        h, _, caches = self._stack_forward(tokens, None, None)
        return gemm(h[-1], self.params["out.W"].T) + self.params["out.b"]

    def clf_loss_and_grad(self, tokens, labels, gen=None):
        """Cross-entropy of the last-step readout; returns ``(loss, grads, logits)``."""
        h, _, caches = self._stack_forward(tokens, None, gen)
        last = h[-1]
        logits = gemm(last, self.params["out.W"].T) + self.params["out.b"]
        loss, g = softmax_xent(logits, labels)
        grads = {"out.W": gemm(g.T, last), "out.b": g.sum(axis=0)}
        gh = np.zeros_like(h)
        gh[-1] = gemm(g, self.params["out.W"])
        self._stack_backward(gh, tokens, caches, grads)
        return loss, self._ordered(grads), logits


class LstmModel(_Model):
    """Embedding -> stacked LSTM layers -> softmax head (char-level LM)."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        if spec.kind != "lstm_char_lm":
            raise ParameterError("LstmModel only builds lstm_char_lm specs")
        self.spec = spec
        rng = SeededRng(seed)
        d, V = spec.d_model, spec.vocab_size
        self.params["embed"] = _uniform((V, d), d, rng, "embed")
        self.layers: list[LstmParams] = []
        for i in range(spec.layers):
            p = init_lstm(d, d, rng.child(stream_id(f"layers.{i}")))
            self.layers.append(p)
            for name, arr in p.named_arrays():
                self.params[f"layers.{i}.{name}"] = arr
        self.params["out.W"] = _uniform((V, d), d, rng, "out.W")
        self.params["out.b"] = np.zeros(V)

    def zero_states(self, B: int):
        d = self.spec.d_model
        return [np.zeros((2, B, d)) for _ in self.layers]

    def _stack_forward(self, tokens, states, gen):
        x = self.params["embed"][tokens]
        caches, new_states = [], []
        for i, p in enumerate(self.layers):
            mask = _dropout_mask(x.shape, self.spec.dropout_p, gen)
            if mask is not None:
                x = x * mask
            st = None if states is None else (states[i][0], states[i][1])
            x, (hT, cT), tape = lstm_forward(p, x, st)
            caches.append((tape, mask))
            new_states.append(np.stack([hT, cT]))
        return x, new_states, caches

    def lm_loss_and_grad(self, inputs, targets, states=None, gen=None):
        h, new_states, caches = self._stack_forward(inputs, states, gen)
        L, B, w = h.shape
        h2 = h.reshape(L * B, w)
        logits = gemm(h2, self.params["out.W"].T) + self.params["out.b"]
        loss, g = softmax_xent(logits, targets.reshape(-1))
        grads = {"out.W": gemm(g.T, h2), "out.b": g.sum(axis=0)}
        gh = gemm(g, self.params["out.W"]).reshape(L, B, w)
        for i in range(len(self.layers) - 1, -1, -1):
            tape, mask = caches[i]
            gp, gx, _ = lstm_backward(self.layers[i], tape, gh)
            for name, arr in gp.named_arrays():
                grads[f"layers.{i}.{name}"] = arr
            gh = gx if mask is None else gx * mask
        g_embed = np.zeros_like(self.params["embed"])
        np.add.at(g_embed, inputs.ravel(), gh.reshape(-1, w))
        grads["embed"] = g_embed
        return loss, OrderedDict((k, grads[k]) for k in self.params), new_states

    def lm_loss(self, inputs, targets, states=None):
        h, new_states, _ = self._stack_forward(inputs, states, None)
        L, B, w = h.shape
        logits = gemm(h.reshape(L * B, w), self.params["out.W"].T) + self.params["out.b"]
        loss, _ = softmax_xent(logits, targets.reshape(-1))
        return loss, new_states


def build_model(spec: ModelSpec, seed: int = 0, alphas: list[float] | None = None):
    if spec.kind == "lstm_char_lm":
        return LstmModel(spec, seed)
    return SruModel(spec, seed, alphas)


def check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"token batch must be (L, B), got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ParameterError(f"token ids must lie in [0, {vocab_size})")
    return tokens
