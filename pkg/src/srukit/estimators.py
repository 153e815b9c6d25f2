"""scikit-learn compatible wrappers around the SRU models."""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from srukit.corpus import Corpus
from srukit.exceptions import CorpusError, DimensionError
from srukit.init_calib import init_layer
from srukit.layer import SruLayerConfig, forward_layer
from srukit.tensor_core import SeededRng, stream_id
from srukit.training.loop import TrainConfig, evaluate_lm, train_char_lm, train_classifier
from srukit.training.models import ModelSpec


def _as_sequences(X) -> list[np.ndarray]:
    seqs = []
    for i, s in enumerate(X):
        a = np.asarray(s)
        if a.ndim != 1:
            raise DimensionError(f"sample {i} must be a 1-D token sequence, got shape {a.shape}")
        if a.size and (not np.issubdtype(a.dtype, np.integer) or a.min() < 0):
            raise CorpusError(f"sample {i} must hold non-negative integer token ids")
        seqs.append(a.astype(np.int64))
    if not seqs:
        raise CorpusError("no samples given")
    return seqs


def _as_bytes(X) -> bytes:
    if isinstance(X, str):
        return X.encode("utf-8")
    if isinstance(X, (bytes, bytearray)):
        return bytes(X)
    parts = [x.encode("utf-8") if isinstance(x, str) else bytes(x) for x in X]
    return b"\n".join(parts)


class _SruParams:
    """Shared hyper-parameters; sklearn reads them back through ``get_params``."""

    def _spec(self, kind: str, vocab_size: int, **extra) -> ModelSpec:
        return ModelSpec(
            kind=kind, layers=self.layers, d_model=self.d_model, vocab_size=vocab_size,
            d_proj=self.d_proj, highway_bias=self.highway_bias, dropout_p=self.dropout,
            use_state_in_gates=self.use_state_in_gates,
            use_scaling_correction=self.use_scaling_correction,
            use_highway=self.use_highway, **extra)

    def _config(self, **extra) -> TrainConfig:
        return TrainConfig(batch=self.batch_size, max_steps=self.max_steps,
                           eval_every=self.max_steps, schedule="constant", lr=self.learning_rate,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           seed=self.random_state, **extra)


class SRUClassifier(_SruParams, ClassifierMixin, BaseEstimator):
    """Sequence classifier reading out the last time step of an SRU stack.

    ``X`` is a list of integer token sequences (lengths may differ); ``y``
    any array of hashable labels.
    """

    def __init__(self, layers=2, d_model=32, d_proj=None, bidirectional=False,
                 highway_bias=0.0, dropout=0.0, use_state_in_gates=True,
                 use_scaling_correction=True, use_highway=True, batch_size=16,
                 max_steps=1000, learning_rate=1e-3, weight_decay=1e-7, grad_clip=0.3,
                 random_state=0):
        self.layers = layers
        self.d_model = d_model
        self.d_proj = d_proj
        self.bidirectional = bidirectional
        self.highway_bias = highway_bias
        self.dropout = dropout
        self.use_state_in_gates = use_state_in_gates
        self.use_scaling_correction = use_scaling_correction
        self.use_highway = use_highway
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.random_state = random_state

    def fit(self, X, y):
        seqs = _as_sequences(X)
        y = np.asarray(y)
        if y.shape != (len(seqs),):
            raise DimensionError(f"y must have one label per sample, got shape {y.shape}")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if self.classes_.size < 2:
            raise CorpusError("need at least two distinct classes")
        codes = self.label_encoder_.transform(y)
        self.vocab_size_ = int(max((s.max() for s in seqs if s.size), default=0)) + 1
        spec = self._spec("classifier", self.vocab_size_, bidirectional=self.bidirectional,
                          n_classes=int(self.classes_.size))
        pairs = list(zip((s.tolist() for s in seqs), codes.tolist()))
        state = train_classifier(pairs, spec, self._config())
        self.model_ = state.model
        self.history_ = state.history
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        seqs = _as_sequences(X)
        by_len: dict[int, list[int]] = defaultdict(list)
        for i, s in enumerate(seqs):
            if s.size == 0:
                raise CorpusError(f"sample {i} is empty")
            if s.max() >= self.vocab_size_:
                raise CorpusError(f"sample {i} has token ids unseen during fit")
            by_len[s.size].append(i)
        out = np.empty((len(seqs), self.classes_.size))
        for idx in by_len.values():
            toks = np.stack([seqs[i] for i in idx], axis=1)
            out[idx] = self.model_.clf_logits(toks)
        return out

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self._logits(X)
        return self.classes_[z.argmax(axis=1)]


class SRUCharLM(_SruParams, BaseEstimator):
    """Byte-level language model; ``score`` is negative bits per character."""

    def __init__(self, layers=2, d_model=64, d_proj=None, highway_bias=-3.0, dropout=0.0,
                 use_state_in_gates=True, use_scaling_correction=True, use_highway=True,
                 batch_size=32, unroll=64, max_steps=2000, learning_rate=1e-3,
                 weight_decay=1e-7, grad_clip=0.3, random_state=0):
        self.layers = layers
        self.d_model = d_model
        self.d_proj = d_proj
        self.highway_bias = highway_bias
        self.dropout = dropout
        self.use_state_in_gates = use_state_in_gates
        self.use_scaling_correction = use_scaling_correction
        self.use_highway = use_highway
        self.batch_size = batch_size
        self.unroll = unroll
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _encode(self, data: bytes) -> np.ndarray:
        return self.lut_[np.frombuffer(data, dtype=np.uint8)]

    def fit(self, X, y=None):
        data = _as_bytes(X)
        if not data:
            raise CorpusError("training text is empty")
        raw = np.frombuffer(data, dtype=np.uint8)
        self.vocab_ = tuple(int(b) for b in np.unique(raw))
        self.lut_ = np.full(256, len(self.vocab_), dtype=np.int64)
        self.lut_[list(self.vocab_)] = np.arange(len(self.vocab_))
        ids = self._encode(data)
        empty = ids[:0]
        corpus = Corpus(train=ids, valid=empty, test=empty, vocab=self.vocab_)
        spec = self._spec("char_lm", corpus.vocab_size)
        state = train_char_lm(corpus, spec, self._config(unroll=self.unroll))
        self.model_ = state.model
        self.history_ = state.history
        return self

    def bits_per_char(self, X) -> float:
        check_is_fitted(self, "model_")
        ids = self._encode(_as_bytes(X))
        if ids.size < 2:
            raise CorpusError("need at least two characters to score")
        nats = evaluate_lm(self.model_, ids, self.batch_size, self.unroll, ids.size)
        return nats / math.log(2)

    def score(self, X, y=None) -> float:
        return -self.bits_per_char(X)


class SRUTransformer(TransformerMixin, BaseEstimator):
    """Untrained SRU stack used as a sequence feature extractor.

    ``X`` has shape ``(n_samples, L, d_in)``; ``transform`` returns the top
    layer's output at the final step (``pooling="last"``) or averaged over
    time (``pooling="mean"``), shape ``(n_samples, dirs * d_model)``.
    """

    def __init__(self, layers=1, d_model=64, bidirectional=False, highway_bias=0.0,
                 use_state_in_gates=True, use_scaling_correction=True, use_highway=True,
                 pooling="last", random_state=0):
        self.layers = layers
        self.d_model = d_model
        self.bidirectional = bidirectional
        self.highway_bias = highway_bias
        self.use_state_in_gates = use_state_in_gates
        self.use_scaling_correction = use_scaling_correction
        self.use_highway = use_highway
        self.pooling = pooling
        self.random_state = random_state

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or 0 in X.shape:
            raise DimensionError(f"X must be a non-empty (n_samples, L, d_in) array, got {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("X contains NaN or infinity")
        return X

    def fit(self, X, y=None):
        X = self._check(X)
        if self.pooling not in ("last", "mean"):
            raise ValueError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        self.n_features_in_ = X.shape[2]
        dirs = 2 if self.bidirectional else 1
        rng = SeededRng(self.random_state)
        self.layers_ = []
        for i in range(self.layers):
            cfg = SruLayerConfig(
                d_in=self.n_features_in_ if i == 0 else dirs * self.d_model,
                d_out=self.d_model, bidirectional=self.bidirectional,
                highway_bias=self.highway_bias, use_state_in_gates=self.use_state_in_gates,
                use_scaling_correction=self.use_scaling_correction, use_highway=self.use_highway)
            self.layers_.append((cfg, init_layer(cfg, rng.child(stream_id(f"layer/{i}")))))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "layers_")
        X = self._check(X)
        if X.shape[2] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[2]} features, expected {self.n_features_in_}")
        h = np.ascontiguousarray(X.transpose(1, 0, 2))
        for cfg, params in self.layers_:
            h, _, _ = forward_layer(cfg, params, h)
        return h[-1].copy() if self.pooling == "last" else h.mean(axis=0)
