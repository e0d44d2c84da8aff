import math

import numpy as np
import pytest

from memlmm import analysis
from memlmm.analysis import (
    classify_trajectory,
    convergence_study,
    lemma31_check,
    lemma52_check,
    long_horizon_trace,
    region_scan,
    segment_weights,
    sup_error,
    weak_astability_run,
    zero_stability_probe,
)
from memlmm.lmm import get_method
from memlmm.oracle import exp_kernel_exact
from memlmm.problem import Exponential, LinearTestProblem, MemoryProblem, PowerLaw, builtin_example
from memlmm.quadrature import get_rule
from memlmm.solver import SolverConfig, solve


def test_sup_error_zero_on_exact_data():
    p = builtin_example("ex3")
    sol = exp_kernel_exact(1.0, -2.0, 1.0)
    res = solve(p, get_method("bdf1"), get_rule("midpoint"), SolverConfig(h=0.1, t_end=1.0))
    res.history.states[:] = sol(res.times)
    assert sup_error(res, sol) == 0.0


def test_sup_error_rejects_incomplete():
    res = solve(builtin_example("ex5"), get_method("ab1"), get_rule("midpoint"),
                SolverConfig(h=0.25, t_end=50.0))
    with pytest.raises(ValueError):
        sup_error(res, exp_kernel_exact(-11.0, 10.0, 1.0))


def test_convergence_table_orders_and_nondyadic():
    p = builtin_example("ex4")
    t = convergence_study(p, get_method("bdf2"), get_rule("midpoint"), [2.0**-4, 2.0**-5, 2.0**-6], 5.0)
    assert t.rows[0].observed_order is None
    assert all(abs(o - 2) < 0.4 for o in t.orders())
    t2 = convergence_study(p, get_method("bdf2"), get_rule("midpoint"), [0.1, 0.07], 5.0)
    assert t2.orders() == []
    with pytest.raises(ValueError):
        convergence_study(p, get_method("bdf2"), get_rule("midpoint"), [0.1, 0.2], 5.0)


def test_convergence_row_annotates_failure():
    t = convergence_study(builtin_example("ex5"), get_method("ab1"), get_rule("midpoint"),
                          [0.25, 0.125], 50.0)
    assert all(math.isnan(r.sup_error) and "overflow" in r.note for r in t.rows)


def test_ms2_milne_error_scales_like_h4():
    p = builtin_example("ex3")
    t = convergence_study(p, get_method("ms2"), get_rule("milne"), [2.0**-5, 2.0**-6], 10.0)
    assert t.rows[1].sup_error == pytest.approx(t.rows[0].sup_error / 16, rel=0.15)


def test_probe_memoryless_bdf1_amplification_one():
    p = MemoryProblem(1, lambda x, t: 0.0 * x, None, np.ones(1))
    probe = zero_stability_probe(p, get_method("bdf1"), get_rule("midpoint"), [0.1, 0.05], 2.0)
    assert all(r.amplification == pytest.approx(1.0, rel=1e-9) for r in probe.rows)
    assert probe.passes


def test_probe_memoryless_bounded_by_alpha():
    # g = 0 form: perturbations only travel through the alpha recursion
    p = MemoryProblem(1, lambda x, t: 0.0 * x, None, np.ones(1))
    for name in ("bdf2", "ab2", "ms2"):
        m = get_method(name)
        probe = zero_stability_probe(p, m, get_rule("midpoint"), [0.1, 0.05], 2.0, startup="refined")
        cap = m.q * max(1.0, max(abs(a) for a in m.alpha))
        assert all(r.amplification <= cap + 1e-9 for r in probe.rows)


def test_probe_lipschitz_cap_path():
    p = builtin_example("ex1")
    probe = zero_stability_probe(p, get_method("bdf2"), get_rule("midpoint"), [2.0**-3, 2.0**-4], 2.0,
                                 lipschitz=3.0)
    assert probe.passes


def test_probe_rejects_bad_delta():
    with pytest.raises(ValueError):
        zero_stability_probe(builtin_example("ex1"), get_method("bdf1"), get_rule("midpoint"),
                             [0.1], 1.0, delta=0.0)


def test_lemma31_examples():
    assert lemma31_check(1.0, 1.0, 0.1, 100)
    assert lemma31_check(0.3 + 0.4j, 0.5, 0.2, 200)
    with pytest.raises(ValueError):
        lemma31_check(1.0, 1.0, 0.6, 10)


def test_lemma31_geometric_limit():
    # tiny mu: y_k ~ |1 - lam h|^{-k} stays under exp(2|lam| k h)
    assert lemma31_check(2.0, 1e-12, 0.24, 500)


def test_lemma31_large_n_no_overflow():
    assert lemma31_check(0.5, 2.0, 0.5, 3000)


def test_lemma52_examples():
    assert lemma52_check(1.0, -2.0, lambda j: 0.5 ** j, 0.5, 2000, kappa=1.0).decayed
    assert lemma52_check(0.5, -2.0, lambda j: 0.5 ** j, 0.5, 2000, kappa=1.0).decayed
    res = lemma52_check(1.0, -1.0, [0.0], 1.0, 60)
    assert res.decayed and res.final == pytest.approx(2.0 ** -60)


def test_lemma52_preconditions():
    with pytest.raises(ValueError):
        lemma52_check(1.0, -0.5, lambda j: 0.5 ** j, 0.5, 10, kappa=1.0)
    with pytest.raises(ValueError):
        lemma52_check(1.0, -2.0, lambda j: 0.5 ** j, 0.5, 10)
    with pytest.raises(ValueError):
        lemma52_check(1.0, -2.0, lambda j: 0.5 ** j, 0.5, 10, kappa=math.inf)


def test_lemma52_flags_negative_excursion():
    # 1 + (1 - beta) lam h < 0 makes iterates alternate in sign
    res = lemma52_check(0.5, -3.0, lambda j: 0.5 ** j, 1.0, 200, kappa=1.0)
    assert not res.nonnegative


def test_theta_recurrence_matches_direct_memory_sum():
    k = np.array([0.0, 0.3, 0.2, 0.1, 0.05])
    y = analysis._theta_recurrence(0.5, -2.0, k, 0.4, 4, 1.0)
    yy = [1.0]
    for n in range(1, 5):
        s1 = sum(k[n - i] * yy[i] for i in range(1, n))
        s2 = sum(k[n - j] * yy[j] for j in range(1, n - 1))
        yy.append(((1 + 0.5 * -2.0 * 0.4) * yy[-1] + 0.4 * (0.5 * s1 + 0.5 * s2)) / (1 + 0.5 * 2.0 * 0.4))
    assert np.allclose(y, yy, rtol=1e-14)


@pytest.mark.parametrize("vals,cls", [
    ([1.0, 0.5, 1e-7], "decayed"),
    ([1.0, 0.9, 0.8, 0.7], "decayed"),
    ([1.0, 0.5, 0.6], "bounded"),
    ([1.0, 10.0, 2e6], "diverged"),
    ([1.0, 2e6, 1.0], "diverged"),
])
def test_classify(vals, cls):
    assert classify_trajectory(vals, 1.0).classification == cls


def test_classify_overflow_flag():
    assert classify_trajectory([1.0, 0.5], 1.0, overflow=True).classification == "diverged"


def test_segment_weights_sum_to_total():
    K = segment_weights(Exponential(2.0, 1.0), 0.1, 2000)
    assert K[0] == 0.0 and K.sum() == pytest.approx(2.0, rel=1e-12)


def test_weak_astab_memoryless_backward_euler():
    tp = LinearTestProblem(-2.0, Exponential(0.0, 1.0))
    for h in (0.01, 1.0, 10.0):
        assert weak_astability_run(tp, "open_backward_euler", h, 50 * h + 20).classification == "decayed"


def test_weak_astab_trajectory_formula():
    tp = LinearTestProblem(-2.0, Exponential(0.0, 1.0))
    v = weak_astability_run(tp, "open_backward_euler", 0.5, 5.0)
    assert v.final_ratio == pytest.approx(2.0 ** -10, rel=1e-13)


def test_weak_astab_bad_args():
    tp = LinearTestProblem(-2.0, Exponential(1.0, 1.0))
    with pytest.raises(ValueError):
        weak_astability_run(tp, "open_midpoint", 0.1, 1.0)
    with pytest.raises(ValueError):
        weak_astability_run(tp, "open_backward_euler", 0.1, 1.0, weighting="other")


def test_batch_open_scheme_matches_direct_recurrence():
    lam = np.array([-3.0, -1.0, 0.5, -5.0])
    c = np.array([1.0, -0.5, -2.0, 4.5])
    N = np.array([200, 200, 150, 300])
    for beta, scheme in ((1.0, "open_backward_euler"), (0.5, "open_trapezoidal")):
        for weighting in ("consistent", "literal"):
            batch = analysis._open_scheme_exponential_batch(beta, lam, c, 1.0, 0.1, N, weighting, 1e-6)
            for i in range(4):
                tp = LinearTestProblem(lam[i], Exponential(c[i], 1.0))
                direct = weak_astability_run(tp, scheme, 0.1, N[i] * 0.1, weighting)
                assert batch[i].classification == direct.classification
                assert batch[i].final_ratio == pytest.approx(direct.final_ratio, rel=1e-9)


def test_region_scan_small_grid():
    scan = region_scan("open_backward_euler", np.linspace(-6, 2, 9), np.linspace(-4, 4, 9))
    assert scan.numeric.shape == (9, 9)
    assert scan.violations == 0 and scan.slack > 0


def test_region_scan_memoryless_column_matches_forward_euler():
    lams = np.array([-25.0, -21.0, -19.0, -10.0, -1.0, 0.5])
    scan = region_scan(get_method("ab1"), lams, [0.0], h=0.1, rule=get_rule("midpoint"), T=20.0)
    expected = (-2 < 0.1 * lams) & (0.1 * lams < 0)
    assert np.array_equal(scan.numeric[:, 0], expected)


def test_region_scan_guards():
    with pytest.raises(ValueError):
        region_scan("open_backward_euler", [-1.0], [0.0], h=1e-3, T=1e4)
    with pytest.raises(ValueError):
        region_scan("nope", [-1.0], [0.0])
    with pytest.raises(ValueError):
        region_scan(get_method("bdf1"), [-1.0], [0.0])


def test_long_trace_memoryless_envelope():
    p = MemoryProblem(1, lambda x, t: -x, None, np.ones(1), f_matrix=np.array([[-1.0]]))
    tr = long_horizon_trace(p, get_method("bdf1"), get_rule("midpoint"), 0.01, 5.0, max_points=50)
    assert len(tr.times) <= 50 and tr.times[-1] == pytest.approx(5.0)
    assert np.allclose(tr.norms, np.exp(-tr.times), rtol=0.03)
    assert tr.tail_monotone


def test_long_trace_guard():
    p = builtin_example("ex6", lam=-10.0)
    with pytest.raises(ValueError):
        long_horizon_trace(p, get_method("bdf1"), get_rule("midpoint"), 1e-6, 100.0)


def test_thread_env_respected(monkeypatch):
    monkeypatch.setenv("MEMLMM_THREADS", "3")
    assert analysis._workers() == 3
    monkeypatch.setenv("MEMLMM_THREADS", "x")
    assert analysis._workers() >= 1


def test_parallel_results_in_order(monkeypatch):
    monkeypatch.setenv("MEMLMM_THREADS", "4")
    p = builtin_example("ex4")
    hs = [2.0**-3, 2.0**-4, 2.0**-5]
    t = convergence_study(p, get_method("bdf2"), get_rule("midpoint"), hs, 2.0)
    assert [r.h for r in t.rows] == hs
    monkeypatch.setenv("MEMLMM_THREADS", "1")
    t1 = convergence_study(p, get_method("bdf2"), get_rule("midpoint"), hs, 2.0)
    assert [r.sup_error for r in t.rows] == [r.sup_error for r in t1.rows]


def test_power_law_weak_astab_runs():
    tp = LinearTestProblem(-3.0, PowerLaw(1.0, 2.0))
    assert weak_astability_run(tp, "open_trapezoidal", 0.25, 40.0).classification == "decayed"
