"""End-to-end acceptance checks, one test per criterion."""

import itertools
import math

import numpy as np

from memlmm.analysis import (
    classify_trajectory,
    convergence_study,
    lemma31_check,
    lemma52_check,
    long_horizon_trace,
    region_scan,
    weak_astability_run,
    zero_stability_probe,
)
from memlmm.lmm import LMMSpec, builtin_methods, check_root_condition, get_method
from memlmm.oracle import exp_kernel_exact
from memlmm.problem import Exponential, LinearTestProblem, MemoryProblem, SeparableKernel, builtin_example
from memlmm.quadrature import builtin_rules, degree_of_precision, get_rule, weights_for
from memlmm.solver import SolverConfig, implicit_solve, n_steps, solve

MIDPOINT = get_rule("midpoint")


def dyadic(a, b):
    return [2.0**-k for k in range(a, b + 1)]


def synthetic_method():
    return LMMSpec("synthetic", (-4.0, 5.0), get_method("ab2").beta, 2)


def test_criterion_01_order_reproduction_ex3():
    p = builtin_example("ex3")
    ms2 = get_method("ms2")
    milne = convergence_study(p, ms2, get_rule("milne"), dyadic(3, 10), 10.0).tail_order()
    mid = convergence_study(p, ms2, MIDPOINT, dyadic(3, 10), 10.0).tail_order()
    print(f"MS2+milne tail order {milne:.3f}; MS2+midpoint tail order {mid:.3f}")
    assert 3.6 <= milne <= 4.4
    assert 1.6 <= mid <= 2.4


def test_criterion_02_order_reproduction_ex4():
    p = builtin_example("ex4")
    bdf2 = get_method("bdf2")
    for rule in (get_rule("milne"), MIDPOINT):
        table = convergence_study(p, bdf2, rule, dyadic(4, 10), 5.0)
        print(rule.token, [round(o, 3) for o in table.orders()])
        assert 1.6 <= table.tail_order() <= 2.4


def test_criterion_03_exact_oracle_agreement():
    ex3 = exp_kernel_exact(1.0, -2.0, 1.0)
    for t in (0.5, 1.0, 5.0, 10.0):
        assert abs(ex3(t)[0] - (math.sin(t) + math.cos(t))) <= 1e-10
    ex4 = exp_kernel_exact(-1.0, 8.0, 3.0)
    for t in (0.5, 1.0, 3.0):
        assert abs(ex4(t)[0] - (2 / 3 * math.exp(t) + math.exp(-5 * t) / 3)) <= 1e-10


def test_criterion_04_zero_stability_probe():
    p = builtin_example("ex1")
    for m in builtin_methods():
        probe = zero_stability_probe(p, m, MIDPOINT, dyadic(4, 8), 10.0, delta=1e-6)
        amps = [r.amplification for r in probe.rows]
        print(m.name, [round(a, 4) for a in amps], f"growth {probe.growth:.3f}")
        assert all(math.isfinite(a) for a in amps)
        assert probe.passes
    bad = zero_stability_probe(p, synthetic_method(), MIDPOINT, [2.0**-4], 10.0, delta=1e-6)
    print(f"synthetic amplification {bad.rows[0].amplification:.3e}")
    assert bad.rows[0].amplification > 1e6


def test_criterion_05_root_condition():
    for m in builtin_methods():
        assert check_root_condition(m).satisfied, m.name
    rep = check_root_condition(synthetic_method())
    assert not rep.satisfied
    assert any(abs(v["root"] - (-5)) < 1e-9 for v in rep.violations)


def test_criterion_06_lemma_recurrences():
    lams = [0.5, 2.0, -1.5, 0.3 + 0.4j, -3.0 + 1.0j]
    mus = [0.1, 0.5, 1.0, 3.0]
    fracs = [0.1, 0.3, 0.5, 0.7, 0.95]
    sweep31 = list(itertools.product(lams, mus, fracs))
    assert len(sweep31) == 100
    for lam, mu, frac in sweep31:
        h = frac / (2 * abs(lam))
        assert lemma31_check(lam, mu, h, 300), (lam, mu, h)

    grid = list(itertools.product([1.0, 0.5], ["consistent", "literal"], [0.2, 0.5, 0.8],
                                  [0.5, 2.0], [0.5, 3.0], [0.1, 0.5, 1.0]))
    sweep52 = grid[::2][:50]
    assert len(sweep52) == 50
    for beta, weighting, r, s, gap, h in sweep52:
        kappa = s * r / (1 - r)
        lam = -kappa - gap
        if 1 + (1 - beta) * lam * h < 0:
            h = 1 / ((1 - beta) * abs(lam))
        res = lemma52_check(beta, lam, lambda j, s=s, r=r: s * r**j, h, 5000,
                            kappa=kappa, weighting=weighting)
        assert res.decayed and res.nonnegative, (beta, weighting, r, s, gap, h)


def test_criterion_07_weak_a_stability_ex5():
    tp = LinearTestProblem(-11.0, Exponential(10.0, 1.0))
    for h in (0.25, 0.125):
        v = weak_astability_run(tp, "open_backward_euler", h, 50.0)
        print(f"open backward Euler h={h}: {v.classification} (final ratio {v.final_ratio:.3e})")
        assert v.classification == "decayed"
    p = builtin_example("ex5")
    outcomes = {}
    for h in (0.25, 0.125):
        res = solve(p, get_method("ab1"), MIDPOINT, SolverConfig(h=h, t_end=50.0))
        outcomes[h] = classify_trajectory(res.states, 1.0, res.status == "overflow")
        print(f"forward Euler h={h}: {outcomes[h].classification} (recorded)")
    assert outcomes[0.25].classification == "diverged"


def test_criterion_08_ex6_dichotomy():
    bdf1 = get_method("bdf1")
    flat = long_horizon_trace(builtin_example("ex6", lam=-10.0), bdf1, MIDPOINT, 2.0**-8, 100.0)
    print(f"lambda=-10: final {flat.final:.4e}, tail relative change {flat.tail_rel_change:.3e}")
    assert flat.status == "completed"
    assert flat.final > 1e-3
    assert flat.tail_rel_change < 0.05
    slow = long_horizon_trace(builtin_example("ex6", lam=-10.1), bdf1, MIDPOINT, 2.0**-8, 1000.0)
    print(f"lambda=-10.1: final {slow.final:.4e}, monotone tail {slow.tail_monotone}")
    assert slow.status == "completed"
    assert slow.tail_monotone
    assert slow.final < 0.5


def test_criterion_09_quadrature_exactness():
    h = 0.37
    for rule in builtin_rules():
        for n in range(1, 21):
            row = weights_for(rule, n)
            t = np.arange(n + 1) * h
            for deg in range(degree_of_precision(rule) + 1):
                approx = h * np.dot(row.weights, t**deg)
                approx += h * sum(w * (pos * h) ** deg for pos, w in row.half_node_weights)
                exact = (n * h) ** (deg + 1) / (deg + 1)
                assert abs(approx - exact) <= 1e-12 * abs(exact), (rule.token, n, deg)


def test_criterion_10_region_scan_soundness():
    scan = region_scan("open_backward_euler", np.linspace(-6, 2, 40), np.linspace(-6, 6, 40),
                       a=1.0, h=0.1)
    print(f"violations {scan.violations}, slack points {scan.slack}")
    assert scan.numeric.shape == (40, 40)
    assert scan.violations == 0
    assert scan.slack >= 1


def _classical(f, m, h, N, init):
    q, d = m.q, init.shape[1]
    X = np.zeros((N + 1, d))
    F = np.zeros((N + 1, d))
    X[:q] = init
    t = np.arange(N + 1) * h
    for k in range(q):
        F[k] = f(X[k], t[k])
    for n in range(q, N + 1):
        sa = np.zeros(d)
        for i in range(1, q + 1):
            sa = sa + m.alpha[i - 1] * X[n - i]
        sb = np.zeros(d)
        for i in range(1, q + 1):
            if m.beta[i] != 0.0:
                sb = sb + m.beta[i] * F[n - i]
        const = sa + h * sb
        if m.beta[0] == 0.0:
            X[n] = const
        else:
            X[n], _ = implicit_solve(lambda x: x - (const + h * m.beta[0] * f(x, t[n])), X[n - 1])
        F[n] = f(X[n], t[n])
    return X


def test_criterion_11_memory_free_reduction():
    def f(x, t):
        return np.sin(t) * x - 0.5 * x**3

    h, T = 0.04, 4.0
    N = n_steps(h, T)
    problems = [
        MemoryProblem(1, f, None, np.ones(1)),
        MemoryProblem(2, f, None, np.array([1.0, -0.5])),
        MemoryProblem(1, f, SeparableKernel(Exponential(0.0, 1.0)), np.ones(1)),
    ]
    for m in builtin_methods():
        for p in problems:
            init = np.array([p.x0 * (1 + 0.01 * k) for k in range(m.q)])
            ref = _classical(f, m, h, N, init)
            for rule in builtin_rules():
                res = solve(p, m, rule, SolverConfig(h=h, t_end=T), initial_states=init,
                            half_states={0.5: p.x0.copy()})
                assert np.array_equal(res.states, ref), (m.name, rule.token)
