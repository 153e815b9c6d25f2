"""Randomized gradient-certification suites over small layer configurations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from srukit.exceptions import ParameterError
from srukit.grad import SruGradients, check_layer_gradients, gradient_errors
from srukit.init_calib import init_layer
from srukit.layer import SruLayerConfig, SruLayerParams
from srukit.tensor_core import SeededRng, stream_id

PRESETS = {"small": 32, "full": 200}
RTOL, ATOL = 1e-4, 1e-7
SATURATED_RTOL = 1e-3
REPORT_FLOOR = 1e-6  # entries smaller than this are excused by ATOL anyway
FLAG_COMBOS = tuple(itertools.product((True, False), repeat=3))  # state gates, alpha, highway


@dataclass(frozen=True)
class GradCase:
    cfg: SruLayerConfig
    L: int
    B: int
    saturated: bool
    seed: int

    @property
    def rtol(self) -> float:
        return SATURATED_RTOL if self.saturated else RTOL


@dataclass
class SuiteReport:
    cases: int = 0
    failures: list[tuple[int, str]] = field(default_factory=list)
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{name:>6}  worst_rel_err={err:.3e}" for name, err in sorted(self.worst.items())]
        for i, group in self.failures:
            out.append(f"FAIL case {i}: {group}")
        out.append(f"{'PASS' if self.passed else 'FAIL'}: {self.cases} cases, "
                   f"{len(self.failures)} failing group(s)")
        return out


def make_case(i: int, seed: int) -> GradCase:
    """Case ``i`` cycles through the eight flag combinations x {uni, bi} and
    alternates dense/factorized projections; sizes are drawn at random.
    Every fifth case pushes the gate biases into saturation."""
    g = SeededRng(seed, stream_id(f"gradcase/{i}")).generator()
    state, alpha, highway = FLAG_COMBOS[i % 8]
    bidirectional = bool((i // 8) % 2)
    d_out = int(g.integers(1, 6))
    d_in = d_out if g.random() < 0.5 else int(g.integers(1, 7))
    factor_room = min(d_in, 3 * d_out) - 1
    proj = int(g.integers(1, factor_room + 1)) if (i // 16) % 2 and factor_room >= 1 else None
    saturated = i % 5 == 4
    bias = float(g.choice([-1, 1]) * g.uniform(4.0, 8.0)) if saturated else float(g.uniform(-2, 2))
    cfg = SruLayerConfig(d_in=d_in, d_out=d_out, bidirectional=bidirectional, highway_bias=bias,
                         use_state_in_gates=state, use_scaling_correction=alpha,
                         use_highway=highway, projection_dim=proj)
    return GradCase(cfg, L=int(g.integers(1, 7)), B=int(g.integers(1, 4)),
                    saturated=saturated, seed=seed)


def case_inputs(case: GradCase):
    rng = SeededRng(case.seed, stream_id(f"gradinputs/{case.cfg}/{case.L}/{case.B}"))
    p = init_layer(case.cfg, rng)
    plist = [p] if isinstance(p, SruLayerParams) else list(p)
    g = rng.child(stream_id("data")).generator()
    if case.saturated:
        for q in plist:
            q.b_f[...] = case.cfg.highway_bias
    D, d = case.cfg.dirs, case.cfg.d_out
    x = g.standard_normal((case.L, case.B, case.cfg.d_in))
    c0 = g.standard_normal((case.B, D * d))
    gh = g.standard_normal((case.L, case.B, D * d))
    gcl = g.standard_normal((case.B, D * d))
    return plist, x, c0, gh, gcl


def negate_v_f(grads: SruGradients) -> None:
    """Fault-injection hook: flips the sign of every ``v_f`` gradient."""
    for p in grads.params:
        p.v_f *= -1.0


FAULTS = {"negate-v_f": negate_v_f}


def group_of(name: str) -> str:
    return name.split(".", 1)[-1]


def run_suite(preset: str = "small", seed: int = 0, fault: str | None = None,
              n_cases: int | None = None, eps: float = 1e-5) -> SuiteReport:
    if preset not in PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
    if fault is not None and fault not in FAULTS:
        raise ParameterError(f"unknown fault {fault!r}; valid: {', '.join(FAULTS)}")
    corrupt = FAULTS[fault] if fault else None
    report = SuiteReport()
    for i in range(PRESETS[preset] if n_cases is None else n_cases):
        case = make_case(i, seed)
        plist, x, c0, gh, gcl = case_inputs(case)
        res = check_layer_gradients(case.cfg, plist, x, c0, gh, gcl, eps, corrupt=corrupt)
        failed = set()
        for name, (an, nu) in res.items():
            abs_err, rel = gradient_errors(an, nu)
            sized = np.maximum(np.abs(an), np.abs(nu)) >= REPORT_FLOOR
            worst = float(rel[sized].max()) if sized.any() else 0.0
            group = group_of(name)
            report.worst[group] = max(report.worst.get(group, 0.0), worst)
            if np.any((rel > case.rtol) & (abs_err > ATOL)):
                failed.add(group)
        report.failures.extend((i, grp) for grp in sorted(failed))
        report.cases += 1
    return report
