"""Exact and reference solutions.

For an exponential kernel ``k(u) = c e^{-a u}`` the test equation
``x' = lam x + int_0^t k(t-s) x(s) ds`` is equivalent to the linear system

    x' = lam x + c y,    y' = x - a y,    y(0) = 0,

whose eigenvalues are the poles of the Laplace-transformed solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .problem import Exponential, Kernel, MemoryProblem, kernel_abs_total

__all__ = [
    "ExactSolution",
    "ExactRegionVerdict",
    "exp_kernel_exact",
    "routh_hurwitz_exact_region",
    "sufficient_condition_margin",
    "reference_solution",
    "exact_solution_for",
]


@dataclass(frozen=True)
class ExactSolution:
    func: Callable
    description: str
    t_max: float = math.inf

    def __call__(self, t):
        """Scalar ``t`` gives shape (d,); an array of times gives shape (len, d)."""
        t_arr = np.asarray(t, dtype=float)
        out = np.asarray(self.func(t_arr), dtype=float)
        if t_arr.ndim == 0:
            return np.atleast_1d(out).reshape(-1)
        return out.reshape(t_arr.shape[0], -1)

    eval = __call__


def _exp_kernel_closed_form(lam, c, a, x0):
    tr = lam - a
    det = -lam * a - c
    disc = tr * tr - 4 * det
    if disc > 0:
        sq = math.sqrt(disc)
        # avoid cancellation in the smaller root
        mu1 = 0.5 * (tr + math.copysign(sq, tr)) if tr != 0 else 0.5 * sq
        mu2 = det / mu1 if mu1 != 0 else 0.5 * (tr - sq)
    else:
        mu1 = mu2 = 0.5 * tr
    if disc > 0 and abs(mu1 - mu2) >= 1e-9 * (1 + abs(mu1)):
        def x(t):
            return x0 * ((mu1 + a) * np.exp(mu1 * t) - (mu2 + a) * np.exp(mu2 * t)) / (mu1 - mu2)
        branch = f"distinct real eigenvalues {mu1:.6g}, {mu2:.6g}"
    elif disc < 0 and math.sqrt(-disc) / 2 >= 1e-9 * (1 + abs(tr) / 2):
        sigma, omega = 0.5 * tr, 0.5 * math.sqrt(-disc)

        def x(t):
            return x0 * np.exp(sigma * t) * (np.cos(omega * t) + (sigma + a) / omega * np.sin(omega * t))
        branch = f"complex eigenvalues {sigma:.6g} +/- {omega:.6g}i"
    else:
        mu = 0.5 * tr

        def x(t):
            return x0 * np.exp(mu * t) * (1 + (mu + a) * t)
        branch = f"repeated eigenvalue {mu:.6g}"
    return x, branch


def _check_residual(x, lam, c, a, times=(0.1, 0.3, 0.5, 0.7, 1.0)):
    # x'(t) - lam x(t) - c int_0^t e^{-a(t-s)} x(s) ds at a few sample times
    for t in times:
        dt = 1e-5 * max(1.0, t)
        deriv = (x(t + dt) - x(t - dt)) / (2 * dt)
        s = np.linspace(0.0, t, 2001)
        v = np.exp(-a * (t - s)) * x(s)
        integral = t / 6000 * (v[0] + v[-1] + 4 * v[1:-1:2].sum() + 2 * v[2:-1:2].sum())
        res = deriv - lam * x(t) - c * integral
        scale = 1 + abs(x(t)) + abs(deriv)
        if abs(res) > 1e-6 * scale:
            raise ArithmeticError(f"closed form fails the equation at t={t}: residual {res:.3e}")


def exp_kernel_exact(lam: float, c: float, a: float, x0: float = 1.0) -> ExactSolution:
    """Closed-form solution of the scalar test equation with kernel ``c e^{-a u}``."""
    if not a > 0:
        raise ValueError("need a > 0")
    x, branch = _exp_kernel_closed_form(float(lam), float(c), float(a), float(x0))
    _check_residual(x, lam, c, a)
    return ExactSolution(func=x, description=f"closed-form ({branch})")


@dataclass(frozen=True)
class ExactRegionVerdict:
    stable: bool
    boundary: bool
    trace: float
    det: float

    def __bool__(self):
        return self.stable


def routh_hurwitz_exact_region(lam: float, c: float, a: float) -> ExactRegionVerdict:
    """Whether the exact solution decays: trace < 0 and det > 0 for [[lam, c], [1, -a]]."""
    if not a > 0:
        raise ValueError("need a > 0")
    tr = lam - a
    det = -lam * a - c
    boundary = tr == 0 or det == 0
    return ExactRegionVerdict(stable=bool(tr < 0 and det > 0), boundary=bool(boundary),
                              trace=float(tr), det=float(det))


def sufficient_condition_margin(lam: float, k: Kernel) -> float:
    """``lam + int_0^inf |k|``; negative means the decay condition holds."""
    return float(lam) + kernel_abs_total(k)


def exact_solution_for(p: MemoryProblem) -> Optional[ExactSolution]:
    """Closed-form oracle when one is known for ``p``, else None."""
    x0 = float(p.x0[0]) if p.dimension == 1 else None
    if p.memory is None and p.f_matrix is not None and p.dimension == 1:
        lam = float(p.f_matrix[0, 0])
        return ExactSolution(func=lambda t: x0 * np.exp(lam * t), description="closed-form (memoryless)")
    params = p.linear_test_parameters()
    if params is not None and isinstance(params[1], Exponential):
        lam, k = params
        return exp_kernel_exact(lam, k.c, k.a, x0)
    return None


def _cubic_interpolant(times, states, h):
    n_last = len(times) - 1

    def ev(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, states.shape[1]))
        for k, tk in enumerate(t):
            j = int(round(tk / h))
            if abs(tk - j * h) <= 1e-12 * max(1.0, abs(tk)) and 0 <= j <= n_last:
                out[k] = states[j]
                continue
            i0 = int(math.floor(tk / h)) - 1
            i0 = min(max(i0, 0), n_last - 3)
            idx = np.arange(i0, i0 + 4)
            ts = times[idx]
            val = np.zeros(states.shape[1])
            for a in range(4):
                la = 1.0
                for b in range(4):
                    if b != a:
                        la *= (tk - ts[b]) / (ts[a] - ts[b])
                val += la * states[idx[a]]
            out[k] = val
        return out

    return ev


def reference_solution(p: MemoryProblem, t_end: float, h_ref: float = 2.0**-12) -> ExactSolution:
    """Fine-grid BDF2 + closed Simpson solution with cubic interpolation off-grid."""
    from .lmm import get_method
    from .quadrature import get_rule
    from .solver import SolverConfig, solve

    cfg = SolverConfig(h=h_ref, t_end=t_end, startup="refined",
                       kernel_cache=True)
    res = solve(p, get_method("bdf2"), get_rule("simpson"), cfg)
    if not res.completed:
        raise RuntimeError(f"reference solve failed: {res.status} at step {res.failed_step}")
    times, states = res.times, res.states
    if len(times) < 4:
        raise ValueError("reference grid too short for cubic interpolation")
    ev = _cubic_interpolant(times, states, h_ref)
    return ExactSolution(func=lambda t: ev(t), description=f"fine-grid-reference (h={h_ref:g})",
                         t_max=float(times[-1]))
