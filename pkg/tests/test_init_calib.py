import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srukit.exceptions import ParameterError
from srukit.init_calib import (
    PROBE_MODES,
    VarianceProfile,
    alpha_for_bias,
    h_variance_bounds_check,
    init_layer,
    probe_inputs,
    variance_ratio_probe,
)
from srukit.layer import SruLayerConfig
from srukit.tensor_core import SeededRng


def test_alpha_values():
    assert alpha_for_bias(0.0) == math.sqrt(3.0)
    assert abs(alpha_for_bias(0.0) ** 2 - 3.0) <= math.ulp(3.0)
    assert abs(alpha_for_bias(-50.0) - 1.0) < 1e-15
    assert alpha_for_bias(-3.0) == pytest.approx(1.048606, abs=5e-7)


@given(st.floats(-30, 30), st.floats(0.01, 5))
def test_alpha_monotone(b, step):
    assert alpha_for_bias(b + step) > alpha_for_bias(b)


def test_h_bounds():
    assert h_variance_bounds_check(0.0) == (1 / 3, 0.5)
    low, high = h_variance_bounds_check(50.0)
    assert low == pytest.approx(1 / 3, abs=1e-15) and high == pytest.approx(1.0, abs=1e-15)
    e = math.exp(-3.0)
    low, high = h_variance_bounds_check(-3.0)
    assert low == pytest.approx((e * e + 3) / (3 * (e + 1) ** 2), rel=1e-15)
    assert high == pytest.approx((e * e + 1) / (e + 1) ** 2, rel=1e-15)
    assert (round(low, 4), round(high, 4)) == (0.9081, 0.9096)


@given(st.floats(-40, 40))
def test_h_bounds_ordered_and_finite(b):
    low, high = h_variance_bounds_check(b)
    assert 0 < low <= high <= 1


def test_init_bounds_and_biases():
    cfg = SruLayerConfig(d_in=3, d_out=4, highway_bias=-3.0)
    p = init_layer(cfg, SeededRng(0))
    assert np.abs(p.weight).max() <= 1.0 and np.abs(p.weight).max() > 0.9
    assert p.W_h.shape == (4, 3)
    assert np.all(p.b_r == -3.0) and not p.b_f.any()
    assert p.alpha == pytest.approx(1.048606, abs=5e-7)
    assert np.abs(p.v_f).max() <= math.sqrt(3 / 4)
    no_alpha = init_layer(SruLayerConfig(d_in=3, d_out=4, use_scaling_correction=False), SeededRng(0))
    assert no_alpha.alpha == 1.0


def test_init_variance_moment():
    cfg = SruLayerConfig(d_in=300, d_out=112)  # 3 * 112 * 300 > 1e5 entries
    p = init_layer(cfg, SeededRng(1))
    assert abs(p.weight.var() - 1 / 300) / (1 / 300) < 0.05


def test_init_factorized_fan_in():
    cfg = SruLayerConfig(d_in=10, d_out=4, projection_dim=5)
    p = init_layer(cfg, SeededRng(2))
    assert p.weight is None
    assert np.abs(p.P).max() <= math.sqrt(3 / 5) and np.abs(p.Q).max() <= math.sqrt(3 / 10)


def test_init_reproducible_and_directions_independent():
    cfg = SruLayerConfig(d_in=4, d_out=4, bidirectional=True)
    a = init_layer(cfg, SeededRng(9))
    b = init_layer(cfg, SeededRng(9))
    for pa, pb in zip(a, b):
        for (_, x), (_, y) in zip(pa.named_arrays(), pb.named_arrays()):
            assert np.array_equal(x, y)
    assert not np.array_equal(a[0].weight, a[1].weight)


def test_probe_depth_one_iid_and_correlated():
    iid = variance_ratio_probe(1, 128, "iid", SeededRng(0))
    assert 0.28 <= iid.var_c_ratios[0] <= 0.40
    cor = variance_ratio_probe(1, 128, "correlated", SeededRng(0))
    assert 0.9 <= cor.var_c_ratios[0] <= 1.1


def test_probe_embedding_like_depth_ten():
    prof = variance_ratio_probe(10, 128, "embedding-like", SeededRng(0))
    r = prof.var_c_ratios
    assert prof.depth == 10 and r[-1] >= 0.8
    assert all(b >= a - 0.05 for a, b in zip(r, r[1:]))


@pytest.mark.parametrize("mode", PROBE_MODES)
def test_probe_ratio_within_closed_interval(mode):
    r = variance_ratio_probe(1, 64, mode, SeededRng(3)).var_c_ratios[0]
    assert 1 / 3 - 0.05 <= r <= 1.05


def test_scaling_correction_keeps_deep_variance():
    with_a = variance_ratio_probe(8, 64, "correlated", SeededRng(0))
    without = variance_ratio_probe(8, 64, "correlated", SeededRng(0), use_scaling_correction=False)
    assert 0.7 <= with_a.var_h_ratios[-1] <= 1.3
    assert all(v < 0.6 for v in without.var_h_ratios[5:])


def test_probe_validation():
    with pytest.raises(ParameterError):
        variance_ratio_probe(0, 64, "iid", SeededRng(0))
    with pytest.raises(ParameterError):
        variance_ratio_probe(1, 32, "iid", SeededRng(0))
    with pytest.raises(ParameterError, match="valid modes"):
        probe_inputs("bogus", 64, SeededRng(0))
    with pytest.raises(ParameterError):
        VarianceProfile([1.0], [1.0, 2.0], "iid")


def test_embedding_like_inputs_are_unit_norm_and_correlated():
    x = probe_inputs("embedding-like", 128, SeededRng(0))
    np.testing.assert_allclose(np.linalg.norm(x, axis=2), 1.0, rtol=1e-12)
    cos = np.sum(x[1:] * x[:-1], axis=2).mean()
    assert 0.3 < cos < 0.5


def test_profile_csv():
    prof = variance_ratio_probe(2, 64, "iid", SeededRng(0))
    lines = prof.to_csv().splitlines()
    assert lines[0] == "layer,var_c_ratio,var_h_ratio,mode"
    assert len(lines) == 3 and lines[1].startswith("1,") and lines[2].endswith(",iid")
