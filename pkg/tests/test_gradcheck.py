import pytest

from srukit import gradcheck
from srukit.exceptions import ParameterError


def test_cases_cover_every_flag_and_direction_combination():
    cases = [gradcheck.make_case(i, 0) for i in range(gradcheck.PRESETS["small"])]
    combos = {(c.cfg.use_state_in_gates, c.cfg.use_scaling_correction, c.cfg.use_highway,
               c.cfg.bidirectional) for c in cases}
    assert len(combos) == 16
    assert any(c.cfg.projection_dim for c in cases)
    assert any(c.cfg.d_in != c.cfg.d_out for c in cases)
    sat = [c for c in cases if c.saturated]
    assert sat and all(abs(c.cfg.highway_bias) >= 4 and c.rtol == 1e-3 for c in sat)


def test_cases_are_seeded():
    assert gradcheck.make_case(3, 7) == gradcheck.make_case(3, 7)
    assert gradcheck.make_case(3, 7) != gradcheck.make_case(3, 8)


def test_small_preset_passes():
    report = gradcheck.run_suite("small")
    assert report.passed and report.cases == 32
    assert {"v_f", "v_r", "b_f", "b_r", "weight", "x", "c0"} <= set(report.worst)
    assert max(report.worst.values()) < gradcheck.RTOL
    assert report.lines()[-1] == "PASS: 32 cases, 0 failing group(s)"


def test_injected_fault_is_localized_to_v_f():
    report = gradcheck.run_suite("small", fault="negate-v_f", n_cases=8)
    assert not report.passed
    assert {group for _, group in report.failures} == {"v_f"}
    assert any(line.startswith("FAIL case") for line in report.lines())


def test_unknown_preset_or_fault():
    with pytest.raises(ParameterError):
        gradcheck.run_suite("huge")
    with pytest.raises(ParameterError):
        gradcheck.run_suite("small", fault="flip-everything")
