"""Training loops: truncated-BPTT char-level LM and bucketed sequence classifier."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from srukit.corpus import Corpus
from srukit.exceptions import CorpusError, ParameterError
from srukit.tensor_core import SeededRng, stream_id
from srukit.training.models import ModelSpec, build_model, check_tokens
from srukit.training.optim import AdamState, adam_step, clip_grad_norm, noam_lr

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "train_loss", "valid_loss", "bpc", "lr", "wall_ms")
SCHEDULES = ("noam", "constant")


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    unroll: int = 64
    max_steps: int = 20_000
    lr_factor: float = 3.0
    warmup_steps: int = 2_000
    weight_decay: float = 1e-7
    grad_clip: float = 0.3
    seed: int = 0
    eval_every: int = 500
    schedule: str = "noam"
    lr: float = 1e-3
    eval_max_tokens: int = 50_000

    def __post_init__(self):
        for name in ("batch", "unroll", "max_steps", "warmup_steps", "eval_every", "eval_max_tokens"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_factor", "lr"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ParameterError("weight_decay and grad_clip must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def learning_rate(self, step: int, d_model: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return noam_lr(step, self.warmup_steps, d_model, self.lr_factor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainMetrics:
    step: int
    train_loss: float
    valid_loss: float
    bpc: float
    lr: float
    wall_ms: float
    train_acc: float = math.nan

    def row(self, with_acc: bool = False) -> list:
        out = [self.step, self.train_loss, self.valid_loss, self.bpc, self.lr, self.wall_ms]
        return out + [self.train_acc] if with_acc else out


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model: object
    adam: AdamState
    step: int = 0
    carried: list[np.ndarray] | None = None
    history: list[TrainMetrics] = field(default_factory=list)


def _dropout_gen(seed: int, step: int):
    return SeededRng(seed, stream_id(f"dropout/{step}")).generator()


def _optimizer_step(state: TrainState, grads, cfg: TrainConfig, d_model: int) -> float:
    step = state.step + 1
    lr = cfg.learning_rate(step, d_model)
    clip_grad_norm(grads, cfg.grad_clip)
    adam_step(state.model.params, grads, state.adam, step, lr, cfg.weight_decay)
    state.step = step
    return lr


# -- char-level language model ------------------------------------------------

def stream_layout(n_tokens: int, batch: int, unroll: int) -> tuple[int, int]:
    """``(stream_length, windows_per_pass)`` for ``batch`` contiguous streams."""
    per = (n_tokens - 1) // batch
    n_win = per // unroll
    if n_win < 1:
        raise CorpusError(
            f"training split of {n_tokens} tokens is too short for batch={batch}, unroll={unroll}")
    return per, n_win


def lm_window(ids: np.ndarray, batch: int, unroll: int, k: int):
    """Inputs and next-token targets, each ``(unroll, batch)``, for window ``k``."""
    per, _ = stream_layout(ids.size, batch, unroll)
    starts = np.arange(batch) * per + k * unroll
    idx = starts[None, :] + np.arange(unroll)[:, None]
    return ids[idx], ids[idx + 1]


def evaluate_lm(model, ids: np.ndarray, batch: int, unroll: int, max_tokens: int) -> float:
    """Mean next-token cross-entropy (nats) over ``ids`` read as contiguous
    streams with carried state."""
    ids = np.asarray(ids)[: max_tokens + 1]
    if ids.size < 2:
        return math.nan
    batch = max(1, min(batch, (ids.size - 1) // max(unroll, 1)))
    per = (ids.size - 1) // batch
    starts = np.arange(batch) * per
    states, total, count = None, 0.0, 0
    for t0 in range(0, per, unroll):
        n = min(unroll, per - t0)
        idx = starts[None, :] + t0 + np.arange(n)[:, None]
        loss, states = model.lm_loss(ids[idx], ids[idx + 1], states)
        total += loss * idx.size
        count += idx.size
    return total / count


def new_lm_state(spec: ModelSpec, seed: int) -> TrainState:
    model = build_model(spec, seed)
    return TrainState(model=model, adam=AdamState.like(model.params))


def train_char_lm(corpus: Corpus, spec: ModelSpec, cfg: TrainConfig,
                  state: TrainState | None = None,
                  on_metrics: Callable[[TrainMetrics], None] | None = None,
                  reproducible: bool = False) -> TrainState:
    """Truncated BPTT over ``cfg.batch`` contiguous streams of the training split.

    Window ``k = (step - 1) mod n_windows`` of every stream is consumed at each
    step; recurrent state is carried between consecutive windows without a
    gradient path and reset to zero when the pass wraps around. Pass an
    existing ``state`` to resume; the run continues until ``cfg.max_steps``.
    """
    if spec.kind not in ("char_lm", "lstm_char_lm"):
        raise ParameterError(f"train_char_lm needs a language-model spec, got {spec.kind!r}")
    if spec.vocab_size < corpus.vocab_size:
        raise CorpusError(
            f"corpus needs {corpus.vocab_size} symbols but the model vocabulary has {spec.vocab_size}")
    _, n_win = stream_layout(corpus.train.size, cfg.batch, cfg.unroll)
    if state is None:
        state = new_lm_state(spec, cfg.seed)
    model = state.model
    t0 = time.monotonic()
    run_loss, run_n = 0.0, 0
    while state.step < cfg.max_steps:
        k = state.step % n_win
        if k == 0 or state.carried is None:
            state.carried = model.zero_states(cfg.batch)
        x, y = lm_window(corpus.train, cfg.batch, cfg.unroll, k)
        gen = _dropout_gen(cfg.seed, state.step + 1) if spec.dropout_p > 0 else None
        loss, grads, carried = model.lm_loss_and_grad(x, y, state.carried, gen)
        state.carried = [np.array(c) for c in carried]
        lr = _optimizer_step(state, grads, cfg, spec.d_model)
        run_loss += loss
        run_n += 1
        if state.step % cfg.eval_every == 0 or state.step == cfg.max_steps:
            valid = evaluate_lm(model, corpus.valid, cfg.batch, cfg.unroll, cfg.eval_max_tokens)
            wall = 0.0 if reproducible else (time.monotonic() - t0) * 1e3
            m = TrainMetrics(state.step, run_loss / run_n, valid, valid / math.log(2), lr, wall)
            state.history.append(m)
            if on_metrics is not None:
                on_metrics(m)
            run_loss, run_n = 0.0, 0
    return state


# -- classifier -----------------------------------------------------------------

@dataclass
class ClassifierData:
    """Sequences grouped into equal-length buckets so batches need no padding."""

    buckets: dict[int, tuple[np.ndarray, np.ndarray]]
    skipped_empty: int = 0

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Sequence[int], int]]) -> "ClassifierData":
        groups: dict[int, tuple[list, list]] = {}
        skipped = 0
        for seq, label in pairs:
            if len(seq) == 0:
                skipped += 1
                continue
            toks, labels = groups.setdefault(len(seq), ([], []))
            toks.append(np.asarray(seq, dtype=np.int64))
            labels.append(int(label))
        if skipped:
            log.warning("skipped %d empty sequence(s)", skipped)
        buckets = {n: (np.stack(t), np.asarray(lab, dtype=np.int64))
                   for n, (t, lab) in sorted(groups.items())}
        return cls(buckets, skipped)

    @property
    def size(self) -> int:
        return sum(lab.size for _, lab in self.buckets.values())

    def max_token(self) -> int:
        return max((int(t.max()) for t, _ in self.buckets.values()), default=-1)

    def max_label(self) -> int:
        return max((int(lab.max()) for _, lab in self.buckets.values()), default=-1)


def synthetic_presence_task(n: int, rng: SeededRng, vocab_size: int = 8,
                            min_len: int = 8, max_len: int = 24, marker: int = 1,
                            max_markers: int | None = None):
    """Balanced binary task: label 1 iff ``marker`` occurs in the sequence.

    Positives carry between one and ``max_markers`` markers (default: a
    quarter of the length)."""
    if vocab_size < 3 or marker >= vocab_size:
        raise ParameterError("synthetic task needs vocab_size >= 3 and marker < vocab_size")
    g = rng.child(stream_id("synthetic-task")).generator()
    others = np.array([v for v in range(vocab_size) if v != marker])
    pairs = []
    for i in range(n):
        length = int(g.integers(min_len, max_len + 1))
        seq = others[g.integers(0, others.size, size=length)]
        label = i % 2
        if label:
            cap = max(1, length // 4) if max_markers is None else max_markers
            hits = g.integers(1, cap + 1)
            seq[g.choice(length, size=min(hits, length), replace=False)] = marker
        pairs.append((seq.tolist(), label))
    order = g.permutation(n)
    return [pairs[j] for j in order]


def classifier_accuracy(model, data: ClassifierData) -> float:
    hits = 0
    for toks, labels in data.buckets.values():
        logits = model.clf_logits(toks.T)
        hits += int((logits.argmax(axis=1) == labels).sum())
    return hits / data.size if data.size else math.nan


def classifier_loss(model, data: ClassifierData) -> float:
    from srukit.training.models import softmax_xent

    total = 0.0
    for toks, labels in data.buckets.values():
        loss, _ = softmax_xent(model.clf_logits(toks.T), labels)
        total += loss * labels.size
    return total / data.size if data.size else math.nan


def train_classifier(data: ClassifierData | Sequence, spec: ModelSpec, cfg: TrainConfig,
                     valid: ClassifierData | Sequence | None = None,
                     state: TrainState | None = None,
                     alphas: list[float] | None = None,
                     on_metrics: Callable[[TrainMetrics], None] | None = None,
                     reproducible: bool = False) -> TrainState:
    """Minibatch training of a last-state readout classifier.

    Each step draws a length bucket with probability proportional to its size
    and samples up to ``cfg.batch`` sequences from it. ``train_loss`` in the
    metrics is the mean minibatch loss since the previous report.
    """
    if spec.kind != "classifier":
        raise ParameterError(f"train_classifier needs a classifier spec, got {spec.kind!r}")
    if not isinstance(data, ClassifierData):
        data = ClassifierData.from_pairs(data)
    if valid is not None and not isinstance(valid, ClassifierData):
        valid = ClassifierData.from_pairs(valid)
    if data.size == 0:
        raise CorpusError("classifier dataset has no non-empty sequences")
    if data.max_token() >= spec.vocab_size:
        raise CorpusError(f"token id {data.max_token()} exceeds vocabulary size {spec.vocab_size}")
    if data.max_label() >= spec.n_classes:
        raise CorpusError(f"label {data.max_label()} exceeds n_classes={spec.n_classes}")
    if state is None:
        model = build_model(spec, cfg.seed, alphas)
        state = TrainState(model=model, adam=AdamState.like(model.params))
    model = state.model
    lengths = list(data.buckets)
    weights = np.array([data.buckets[n][1].size for n in lengths], dtype=float)
    weights /= weights.sum()
    t0 = time.monotonic()
    run_loss, run_n = 0.0, 0
    while state.step < cfg.max_steps:
        g = SeededRng(cfg.seed, stream_id(f"batch/{state.step + 1}")).generator()
        toks, labels = data.buckets[lengths[int(g.choice(len(lengths), p=weights))]]
        pick = g.choice(labels.size, size=min(cfg.batch, labels.size), replace=False)
        x = check_tokens(toks[pick].T, spec.vocab_size)
        gen = _dropout_gen(cfg.seed, state.step + 1) if spec.dropout_p > 0 else None
        loss, grads, _ = model.clf_loss_and_grad(x, labels[pick], gen)
        lr = _optimizer_step(state, grads, cfg, spec.d_model)
        run_loss += loss
        run_n += 1
        if state.step % cfg.eval_every == 0 or state.step == cfg.max_steps:
            v = classifier_loss(model, valid) if valid is not None else math.nan
            wall = 0.0 if reproducible else (time.monotonic() - t0) * 1e3
            m = TrainMetrics(state.step, run_loss / run_n, v, v / math.log(2), lr, wall,
                             train_acc=classifier_accuracy(model, data))
            state.history.append(m)
            if on_metrics is not None:
                on_metrics(m)
            run_loss, run_n = 0.0, 0
    return state
