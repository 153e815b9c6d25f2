import csv
import json
import subprocess
import sys

import pytest

from srukit.cli import main
from srukit.corpus import alternating_corpus


@pytest.fixture
def corpus(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_bytes(alternating_corpus(3000, b"abcab"))
    return p


LM_SMALL = ["--layers", "1", "--d-model", "8", "--batch", "4", "--unroll", "8",
            "--max-steps", "6", "--eval-every", "3", "--lr", "0.01"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_dry_run_prints_parameter_count(corpus, capsys):
    assert main(["train-lm", str(corpus), "--dry-run", "--layers", "2", "--d-model", "16"]) == 0
    assert capsys.readouterr().out.startswith("parameters: ")


def test_train_lm_reproducible_csv(corpus, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["train-lm", str(corpus), *LM_SMALL, "--reproducible", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _rows(a)
    assert rows[0] == ["step", "train_loss", "valid_loss", "bpc", "lr", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["3", "6"]
    assert all(float(r[5]) == 0.0 for r in rows[1:])


def test_train_lm_lstm(corpus, tmp_path):
    out = tmp_path / "lstm.csv"
    assert main(["train-lm", str(corpus), "--arch", "lstm", *LM_SMALL, "--out", str(out)]) == 0
    assert len(_rows(out)) == 3


def test_checkpoint_resume_and_inspect(corpus, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    full, part, rest = tmp_path / "full.csv", tmp_path / "part.csv", tmp_path / "rest.csv"
    assert main(["train-lm", str(corpus), *LM_SMALL, "--reproducible", "--out", str(full)]) == 0
    short = [a if a != "6" else "3" for a in LM_SMALL]
    assert main(["train-lm", str(corpus), *short, "--reproducible", "--out", str(part),
                 "--checkpoint", str(ck)]) == 0
    assert main(["train-lm", str(corpus), *LM_SMALL, "--reproducible", "--out", str(rest),
                 "--resume", str(ck)]) == 0
    assert _rows(rest)[1] == _rows(full)[2]
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(ck)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["step"] == 3 and info["model_spec"]["layers"] == 1 and info["parameters"] > 0


def test_checkpoint_errors_exit_2(corpus, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    assert main(["train-lm", str(corpus), *LM_SMALL, "--checkpoint", str(ck)]) == 0
    bad = tmp_path / "cut.ckpt"
    bad.write_bytes(ck.read_bytes()[:-10])
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(bad)]) == 2
    assert "[E_TRUNCATED]" in capsys.readouterr().err


def test_shape_error_message_names_layer(corpus, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    assert main(["train-lm", str(corpus), *LM_SMALL, "--checkpoint", str(ck)]) == 0
    capsys.readouterr()
    deeper = [a if a != "1" else "2" for a in LM_SMALL]
    assert main(["train-lm", str(corpus), *deeper, "--resume", str(ck)]) == 2
    err = capsys.readouterr().err
    assert "[E_SHAPE]" in err and "layer 1" in err


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train-lm", str(tmp_path / "missing.txt")]) == 2
    assert main(["probe-variance", "--depth", "0"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["probe-variance", "--mode", "bogus"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_train_clf_reproducible(tmp_path):
    args = ["train-clf", "--layers", "1", "--d-model", "8", "--examples", "64", "--batch", "8",
            "--max-steps", "10", "--eval-every", "5", "--reproducible"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _rows(a)
    assert rows[0][-1] == "train_acc" and len(rows) == 3


def test_probe_variance_rows_and_reproducibility(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["probe-variance", "--depth", "3", "--d", "64", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _rows(a)
    assert len(rows) == 4 and [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--preset", "small"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("0 failing group(s)")
    assert main(["gradcheck", "--inject-fault", "negate-v_f"]) == 1
    out = capsys.readouterr().out
    assert "FAIL case" in out and "v_f" in out


def test_bench_writes_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--L", "4", "--d", "4,8", "--B", "2", "--arch", "sru_fused", "lstm",
                 "--pass", "forward", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["arch", "pass", "L", "B", "d", "ms_mean", "ms_std"]
    assert len(rows) == 5


def test_console_entry_point_runs_as_module():
    res = subprocess.run([sys.executable, "-m", "srukit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-lm" in res.stdout
