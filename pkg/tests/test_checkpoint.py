import json
import struct

import numpy as np
import pytest

from srukit.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from srukit.corpus import corpus_from_bytes
from srukit.exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from srukit.training import ModelSpec, TrainConfig, train_char_lm
from srukit.training.loop import new_lm_state

TEXT = b"a stitch in time saves nine; " * 60


def _corpus():
    return corpus_from_bytes(TEXT)


def _spec(layers=2, kind="char_lm", **kw):
    return ModelSpec(kind, layers, 6, _corpus().vocab_size, **kw)


def _cfg(steps, **kw):
    return TrainConfig(batch=3, unroll=6, max_steps=steps, eval_every=5, schedule="constant",
                       lr=5e-3, seed=11, **kw)


def _trained(spec, steps=5):
    return train_char_lm(_corpus(), spec, _cfg(steps), reproducible=True)


@pytest.mark.parametrize("kind,kw", [("char_lm", {}), ("char_lm", {"d_proj": 3}),
                                     ("lstm_char_lm", {})])
def test_roundtrip_is_byte_identical(tmp_path, kind, kw):
    state = _trained(_spec(kind=kind, **kw))
    path = tmp_path / "model.ckpt"
    n = save_checkpoint(path, state, seed=11)
    data = path.read_bytes()
    assert len(data) == n and data.startswith(MAGIC)
    ck = load_checkpoint(path)
    assert ck.step == 5 and ck.seed == 11
    assert encode_checkpoint(ck.state, ck.seed) == data


def test_loaded_model_computes_identical_outputs():
    state = _trained(_spec())
    ck = decode_checkpoint(encode_checkpoint(state, 11))
    x = _corpus().train[:12].reshape(4, 3)
    a = state.model.lm_loss(x, x, state.carried)
    b = ck.state.model.lm_loss(x, x, ck.state.carried)
    assert a[0] == b[0]
    for sa, sb in zip(a[1], b[1]):
        assert np.array_equal(sa, sb)


def test_truncation_detected():
    data = encode_checkpoint(new_lm_state(_spec(), 0), 0)
    for cut in (4, len(MAGIC) + 2, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedPayloadError) as info:
            decode_checkpoint(data[:cut])
        assert info.value.code == "E_TRUNCATED"


def test_bad_magic_and_version():
    data = encode_checkpoint(new_lm_state(_spec(), 0), 0)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + data[8:])
    header, r = read_header(data)
    header["format_version"] = 99
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bumped = MAGIC + struct.pack("<I", len(head)) + head + data[r.pos:]
    with pytest.raises(CheckpointVersionError) as info:
        decode_checkpoint(bumped)
    assert info.value.code == "E_VERSION"


def test_layer_count_mismatch_names_the_layer():
    data = encode_checkpoint(new_lm_state(_spec(layers=4), 0), 0)
    with pytest.raises(ShapeMismatchError) as info:
        decode_checkpoint(data, expected_spec=_spec(layers=6))
    assert info.value.code == "E_SHAPE"
    assert "layer 4" in str(info.value)
    with pytest.raises(ShapeMismatchError, match="unexpected tensor"):
        decode_checkpoint(encode_checkpoint(new_lm_state(_spec(layers=6), 0), 0),
                          expected_spec=_spec(layers=4))


def test_width_mismatch_reports_element_counts():
    data = encode_checkpoint(new_lm_state(_spec(), 0), 0)
    wider = ModelSpec("char_lm", 2, 7, _corpus().vocab_size)
    with pytest.raises(ShapeMismatchError, match="elements"):
        decode_checkpoint(data, expected_spec=wider)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("kind", ["char_lm", "lstm_char_lm"])
def test_resume_matches_uninterrupted_run(kind):
    spec = _spec(kind=kind, dropout_p=0.1 if kind == "char_lm" else 0.0)
    full = train_char_lm(_corpus(), spec, _cfg(20), reproducible=True)
    half = train_char_lm(_corpus(), spec, _cfg(10), reproducible=True)
    ck = decode_checkpoint(encode_checkpoint(half, 11), expected_spec=spec)
    resumed = train_char_lm(_corpus(), spec, _cfg(20), state=ck.state, reproducible=True)
    assert resumed.step == 20
    for k, v in full.model.params.items():
        assert np.array_equal(v, resumed.model.params[k]), k
    assert [m.row() for m in full.history[2:]] == [m.row() for m in resumed.history]
