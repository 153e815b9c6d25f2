"""Binary checkpoints: a JSON header followed by little-endian raw tensors.

Layout::

    b"SRUCKPT1"                      magic
    uint32 (LE)                      header length in bytes
    UTF-8 JSON, keys sorted          header
    repeated per tensor:
        uint32 (LE)                  name length
        UTF-8                        name
        uint64 (LE)                  element count
        float64 (LE) x count         data

Tensors appear in declaration order: model parameters, Adam first moments,
Adam second moments, then carried recurrent states. Writing is fully
deterministic, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from srukit.exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from srukit.training.loop import TrainState
from srukit.training.models import ModelSpec, build_model
from srukit.training.optim import AdamState

MAGIC = b"SRUCKPT1"
FORMAT_VERSION = 1
DTYPE_TAG = "float64-le"
_LE_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: TrainState
    seed: int
    header: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.state.step


def _declared_tensors(state: TrainState):
    params = state.model.params
    out = [(f"param/{k}", a) for k, a in params.items()]
    out += [(f"adam.m/{k}", state.adam.m[k]) for k in params]
    out += [(f"adam.v/{k}", state.adam.v[k]) for k in params]
    for i, s in enumerate(state.carried or []):
        out.append((f"state/{i}", s))
    return out


def encode_checkpoint(state: TrainState, seed: int, extra: dict | None = None) -> bytes:
    model = state.model
    spec: ModelSpec = model.spec
    adam = state.adam
    for k in model.params:
        adam.m.setdefault(k, np.zeros_like(model.params[k]))
        adam.v.setdefault(k, np.zeros_like(model.params[k]))
    tensors = _declared_tensors(state)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE_TAG,
        "model_spec": spec.to_dict(),
        "layer_configs": [c.to_dict() for c in getattr(model, "configs", [])],
        "alphas": [float(a) for a in getattr(model, "alphas", [])],
        "rng_seed": int(seed),
        "step": int(state.step),
        "adam_t": int(adam.t),
        "tensors": [[name, list(a.shape)] for name, a in tensors],
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for name, a in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", a.size))
        parts.append(np.ascontiguousarray(a, dtype=_LE_F64).tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, state: TrainState, seed: int,
                    extra: dict | None = None) -> int:
    data = encode_checkpoint(state, seed, extra)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated payload: needed {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_header(data: bytes) -> tuple[dict, _Reader]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a srukit checkpoint (bad magic)")
    (n,) = struct.unpack("<I", r.take(4, "header length"))
    try:
        header = json.loads(r.take(n, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format_version {version!r}; expected {FORMAT_VERSION}")
    if header.get("dtype") != DTYPE_TAG:
        raise CheckpointError(f"unsupported tensor dtype {header.get('dtype')!r}")
    return header, r


def _layer_of(name: str) -> str:
    parts = name.split("/", 1)[-1].split(".")
    if parts[0] == "layers" and len(parts) > 1:
        return f"layer {parts[1]} ({name})"
    return name


def decode_checkpoint(data: bytes, expected_spec: ModelSpec | None = None) -> Checkpoint:
    """Parse and validate a checkpoint; nothing is returned unless every
    tensor is present with the element count its spec implies."""
    header, r = read_header(data)
    try:
        spec = ModelSpec.from_dict(header["model_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header has an invalid model spec: {exc}") from exc
    target = expected_spec if expected_spec is not None else spec
    alphas = header.get("alphas") or None
    if alphas is not None and len(alphas) != target.layers:
        alphas = None
    model = build_model(target, int(header.get("rng_seed", 0)), alphas)
    adam = AdamState.like(model.params)
    n_states = sum(1 for name, _ in header.get("tensors", []) if name.startswith("state/"))
    carried = model.zero_states(1) if n_states else None
    expected = [(f"param/{k}", a) for k, a in model.params.items()]
    expected += [(f"adam.m/{k}", adam.m[k]) for k in model.params]
    expected += [(f"adam.v/{k}", adam.v[k]) for k in model.params]

    loaded: dict[str, np.ndarray] = {}
    while r.pos < len(data):
        (nlen,) = struct.unpack("<I", r.take(4, "tensor name length"))
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (count,) = struct.unpack("<Q", r.take(8, f"element count of {name}"))
        buf = r.take(8 * count, f"data of {name}")
        loaded[name] = np.frombuffer(buf, dtype=_LE_F64).astype(np.float64)

    for name, dest in expected:
        if name not in loaded:
            raise ShapeMismatchError(f"shape mismatch: {_layer_of(name)} missing from checkpoint")
        src = loaded.pop(name)
        if src.size != dest.size:
            raise ShapeMismatchError(
                f"shape mismatch: {_layer_of(name)} has {src.size} elements in the checkpoint, "
                f"expected {dest.size} for shape {dest.shape}")
        dest[...] = src.reshape(dest.shape)
    if carried is not None:
        batch_states = []
        for i, ref in enumerate(carried):
            name = f"state/{i}"
            src = loaded.pop(name, None)
            if src is None:
                raise ShapeMismatchError(f"shape mismatch: carried state of layer {i} missing")
            per_b = ref.size
            if src.size % per_b:
                raise ShapeMismatchError(
                    f"shape mismatch: carried state of layer {i} has {src.size} elements")
            shape = list(ref.shape)
            batch_axis = 1 if ref.ndim == 3 else 0
            shape[batch_axis] = src.size // per_b
            batch_states.append(src.reshape(shape))
        carried = batch_states
    if loaded:
        first = sorted(loaded)[0]
        raise ShapeMismatchError(f"shape mismatch: unexpected tensor {_layer_of(first)} in checkpoint")
    adam.t = int(header.get("adam_t", header.get("step", 0)))
    state = TrainState(model=model, adam=adam, step=int(header.get("step", 0)), carried=carried)
    return Checkpoint(spec=target, state=state, seed=int(header.get("rng_seed", 0)), header=header)


def load_checkpoint(path: str | os.PathLike, expected_spec: ModelSpec | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc.strerror}") from exc
    return decode_checkpoint(data, expected_spec)
