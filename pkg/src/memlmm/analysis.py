"""Experiment harness: errors, convergence orders, stability probes."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .lmm import LMMSpec
from .oracle import (
    ExactSolution,
    exact_solution_for,
    routh_hurwitz_exact_region,
)
from .problem import (
    Exponential,
    Kernel,
    LinearTestProblem,
    MemoryProblem,
    kernel_abs_total,
)
from .quadrature import QuadratureSpec
from .solver import SolveResult, SolverConfig, n_steps, solve

__all__ = [
    "ConvergenceRow",
    "ConvergenceTable",
    "StabilityVerdict",
    "ZeroStabilityRow",
    "ZeroStabilityProbe",
    "Lemma52Result",
    "RegionScan",
    "LongTrace",
    "sup_error",
    "convergence_study",
    "zero_stability_probe",
    "lemma31_check",
    "lemma52_check",
    "classify_trajectory",
    "segment_weights",
    "weak_astability_run",
    "region_scan",
    "long_horizon_trace",
    "default_horizon",
]

OPEN_SCHEMES = {"open_backward_euler": 1.0, "open_trapezoidal": 0.5}


def _workers() -> int:
    env = os.environ.get("MEMLMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _pmap(fn, items):
    # results land in input order regardless of completion order
    items = list(items)
    nw = min(_workers(), len(items))
    if nw <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=nw) as ex:
        return list(ex.map(fn, items))


# --- errors and convergence ------------------------------------------------


def sup_error(result: SolveResult, exact: ExactSolution) -> float:
    """Max over grid points of the inf-norm error."""
    if not result.completed:
        raise ValueError(f"solve did not complete ({result.status})")
    ref = exact(result.times)
    return float(np.max(np.abs(result.states - ref)))


@dataclass
class ConvergenceRow:
    h: float
    sup_error: float
    observed_order: Optional[float] = None
    note: str = ""


@dataclass
class ConvergenceTable:
    rows: List[ConvergenceRow]

    def orders(self):
        return [r.observed_order for r in self.rows if r.observed_order is not None]

    def tail_order(self, pairs: int = 3) -> float:
        """Median observed order over the finest ``pairs`` halvings."""
        o = self.orders()
        if len(o) < pairs:
            raise ValueError("not enough dyadic pairs for a tail order")
        return float(median(o[-pairs:]))


def convergence_study(p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec,
                      h_list: Sequence[float], t_end: float,
                      exact: Optional[ExactSolution] = None, **cfg_kw) -> ConvergenceTable:
    h_list = [float(h) for h in h_list]
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly decreasing")
    exact = exact or exact_solution_for(p)
    if exact is None:
        raise ValueError("convergence study needs an exact solution")

    def run(h):
        cfg = SolverConfig(h=h, t_end=t_end, startup="exact", oracle=exact, **cfg_kw)
        res = solve(p, m, rule, cfg)
        if not res.completed:
            return ConvergenceRow(h, math.nan, note=f"{res.status} at step {res.failed_step}")
        return ConvergenceRow(h, sup_error(res, exact))

    rows = _pmap(run, h_list)
    for prev, cur in zip(rows, rows[1:]):
        dyadic = abs(prev.h / cur.h - 2.0) < 1e-12
        ok = math.isfinite(prev.sup_error) and math.isfinite(cur.sup_error) and cur.sup_error > 0
        if dyadic and ok:
            cur.observed_order = math.log2(prev.sup_error / cur.sup_error)
    return ConvergenceTable(rows)


# --- zero stability --------------------------------------------------------


@dataclass
class ZeroStabilityRow:
    h: float
    amplification: float
    overflow: bool = False


@dataclass
class ZeroStabilityProbe:
    rows: List[ZeroStabilityRow]
    passes: bool
    growth: float  # max amp over finest three h / max amp over coarsest three


def zero_stability_probe(p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec,
                         h_list: Sequence[float], T: float, delta: float = 1e-6,
                         lipschitz: Optional[float] = None, **cfg_kw) -> ZeroStabilityProbe:
    """Sensitivity of the trajectory to a +delta shift of all starting values.

    Starting values are ``x_0..x_{q-1}`` and any half-node states.  The probe
    passes when the amplification does not grow as h shrinks (finest three
    within 2x of coarsest three), or when ``lipschitz`` is given, when every
    amplification stays under ``exp(2 L T + L T^2)``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    cfg_kw.setdefault("startup", "exact")

    def run(h):
        cfg = SolverConfig(h=h, t_end=T, **cfg_kw)
        base = solve(p, m, rule, cfg)
        q = m.q
        init = base.states[:q] + delta
        half = {k: v + delta for k, v in base.history.half_states.items()}
        pert = solve(p, m, rule, cfg, initial_states=init, half_states=half)
        L = min(len(base.states), len(pert.states))
        diff = np.abs(base.states[:L] - pert.states[:L])
        with np.errstate(invalid="ignore"):
            amp = float(np.nanmax(diff)) / delta
        overflow = not (base.completed and pert.completed)
        return ZeroStabilityRow(h, amp, overflow)

    rows = sorted(_pmap(run, h_list), key=lambda r: -r.h)
    amps = [r.amplification for r in rows]
    finite = all(math.isfinite(a) for a in amps) and not any(r.overflow for r in rows)
    k = min(3, len(rows))
    coarse, fine = max(amps[:k]), max(amps[-k:])
    growth = fine / coarse if coarse > 0 else math.inf
    if lipschitz is not None:
        cap = math.exp(2 * lipschitz * T + lipschitz * T * T)
        passes = finite and all(a <= cap for a in amps)
    else:
        passes = finite and growth <= 2.0
    return ZeroStabilityProbe(rows, passes, growth)


# --- induction-lemma recurrences -------------------------------------------


def lemma31_check(lam: complex, mu: float, h: float, N: int) -> bool:
    """Iterate ``|1 - lam h| y_n = y_{n-1} + h^2 mu sum_{i<n} y_i`` from y_0 = 1
    and test ``y_k <= exp(2|lam| k h + mu k^2 h^2)`` for every k <= N."""
    lam_abs = abs(lam)
    if not mu > 0:
        raise ValueError("mu must be positive")
    if not (h > 0 and (lam_abs == 0 or h < 1 / (2 * lam_abs))):
        raise ValueError("need 0 < h < 1/(2|lam|)")
    denom = abs(1 - lam * h)
    # y is tracked as y_scaled * exp(log_scale) to survive large N
    y_prev, total, log_scale = 1.0, 1.0, 0.0
    for k in range(1, N + 1):
        y = (y_prev + h * h * mu * total) / denom
        bound = 2 * lam_abs * k * h + mu * k * k * h * h
        if math.log(y) + log_scale > bound + 1e-12 * max(1.0, bound):
            return False
        total += y
        y_prev = y
        if y > 1e200:
            y_prev /= 1e200
            total /= 1e200
            log_scale += math.log(1e200)
    return True


def _theta_recurrence(beta, lam, k, h, N, y0=1.0, weight=1.0):
    """``(1 - beta lam h) y_n = [1 + (1-beta) lam h] y_{n-1}
    + weight*h*(beta sum_{i=1}^{n-1} k_{n-i} y_i + (1-beta) sum_{j=1}^{n-2} k_{n-j} y_j)``.

    ``k[j]`` holds k_j for j >= 1 (k[0] unused).  Stops early on overflow.
    """
    y = np.zeros(N + 1)
    y[0] = y0
    a_new = 1.0 - beta * lam * h
    a_old = 1.0 + (1.0 - beta) * lam * h
    c = weight * h
    n_done = N
    for n in range(1, N + 1):
        if n >= 2:
            s1 = float(np.dot(k[n - 1:0:-1], y[1:n]))
            s2 = s1 - k[1] * y[n - 1]
        else:
            s1 = s2 = 0.0
        y[n] = (a_old * y[n - 1] + c * (beta * s1 + (1.0 - beta) * s2)) / a_new
        if not math.isfinite(y[n]) or abs(y[n]) > 1e300:
            n_done = n
            break
    return y[:n_done + 1]


@dataclass
class Lemma52Result:
    decayed: bool
    monotone_tail: bool
    nonnegative: bool
    final: float
    tail: np.ndarray = field(repr=False)


def _tail_start(N: int) -> int:
    return min(N - N // 10, N - 1)


def lemma52_check(beta: float, lam: float, k_seq: Union[Callable, Sequence[float]],
                  h: float, N: int, kappa: Optional[float] = None,
                  weighting: str = "consistent") -> Lemma52Result:
    """Iterate the weak-A-stability recurrence and report decay.

    ``k_seq`` is either a callable ``j -> k_j`` (then ``kappa`` is required)
    or an explicit array ``[k_1, k_2, ...]``.  ``weighting="literal"`` applies
    the extra factor h on the memory sums.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if callable(k_seq):
        if kappa is None:
            raise ValueError("kappa must be supplied with a callable k_seq")
        kv = np.asarray(k_seq(np.arange(1, N + 1)), dtype=float)
    else:
        kv = np.asarray(k_seq, dtype=float)[:N]
        if kappa is None:
            kappa = float(np.sum(np.asarray(k_seq, dtype=float)))
        if len(kv) < N:
            kv = np.concatenate([kv, np.zeros(N - len(kv))])
    if not math.isfinite(kappa):
        raise ValueError("kappa must be finite")
    if np.any(kv < 0):
        raise ValueError("k_seq must be non-negative")
    if not lam < -kappa:
        raise ValueError("need lam < -kappa")
    weight = h if weighting == "literal" else 1.0
    k = np.concatenate([[0.0], kv])
    y = _theta_recurrence(beta, lam, k, h, N, 1.0, weight)
    ts = _tail_start(len(y) - 1)
    tail = y[ts:]
    return Lemma52Result(
        decayed=len(y) == N + 1 and abs(y[-1]) < 1e-6,
        monotone_tail=bool(np.all(np.diff(tail) < 0)),
        nonnegative=bool(np.all(y >= 0)),
        final=float(y[-1]),
        tail=tail,
    )


# --- absolute stability ----------------------------------------------------


@dataclass
class StabilityVerdict:
    classification: str  # decayed | bounded | diverged
    final_ratio: float
    peak_ratio: float


def classify_trajectory(values, x0_norm: float, overflow: bool = False,
                        decay_eps: float = 1e-6) -> StabilityVerdict:
    """Finite-horizon proxy for the limit behaviour of a trajectory.

    ``values`` are state norms (or scalar states) at t_0..t_N.
    """
    a = np.abs(np.asarray(values, dtype=float))
    if a.ndim > 1:
        a = a.max(axis=1)
    x0_norm = x0_norm if x0_norm > 0 else 1.0
    with np.errstate(invalid="ignore", over="ignore"):
        final = float(a[-1] / x0_norm)
        peak = float(np.max(a) / x0_norm)
    if overflow or not math.isfinite(final) or not math.isfinite(peak) or final > 1e6 or peak > 1e6:
        return StabilityVerdict("diverged", final, peak)
    N = len(a) - 1
    tail = a[_tail_start(N):] if N >= 1 else a
    decreasing = len(tail) >= 2 and bool(np.all(np.diff(tail) < 0))
    if final < decay_eps or (final < 1.0 and decreasing):
        return StabilityVerdict("decayed", final, peak)
    return StabilityVerdict("bounded", final, peak)


def segment_weights(kernel: Kernel, h: float, N: int) -> np.ndarray:
    """``[0, K_1, ..., K_N]`` with ``K_j = int_{(j-1)h}^{jh} k``."""
    j = np.arange(1, N + 1)
    K = np.asarray(kernel.segment_integral((j - 1) * h, j * h), dtype=float)
    if K.shape != (N,):
        K = np.array([float(kernel.segment_integral((i - 1) * h, i * h)) for i in j])
    return np.concatenate([[0.0], K])


def weak_astability_run(tp: LinearTestProblem, scheme: str, h: float, T: float,
                        weighting: str = "consistent", decay_eps: float = 1e-6) -> StabilityVerdict:
    """Run the open backward-Euler or open trapezoidal scheme on the test equation.

    The memory sum uses segment integrals of the kernel over each step, so in
    the default ``consistent`` weighting it enters without an extra h; the
    ``literal`` weighting multiplies it by h once more.
    """
    if scheme not in OPEN_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(OPEN_SCHEMES)}")
    if weighting not in ("consistent", "literal"):
        raise ValueError(f"unknown weighting {weighting!r}")
    N = n_steps(h, T)
    K = segment_weights(tp.kernel, h, N)
    weight = h if weighting == "literal" else 1.0
    y = _theta_recurrence(OPEN_SCHEMES[scheme], float(tp.lam), K, h, N, float(tp.x0), weight)
    overflow = len(y) < N + 1
    return classify_trajectory(y, abs(tp.x0), overflow, decay_eps)


def default_horizon(lam: float, kappa: float, cap: float = 1e4) -> float:
    gap = abs(lam + kappa)
    return cap if gap == 0 else min(50.0 / gap, cap)


def _open_scheme_exponential_batch(beta, lam, c, a, h, N, weighting, decay_eps):
    """Vectorised open scheme for exponential kernels over many (lam, c) points.

    Segment integrals of ``c e^{-a u}`` are geometric, K_j = K_1 rho^{j-1},
    so the memory sum obeys S_{n+1} = rho S_n + K_1 x_n.
    """
    lam = np.asarray(lam, dtype=float)
    c = np.asarray(c, dtype=float)
    N = np.asarray(N, dtype=int)
    P = lam.size
    rho = math.exp(-a * h)
    K1 = c / a * -math.expm1(-a * h)
    weight = h if weighting == "literal" else 1.0
    a_new = 1.0 - beta * lam * h
    a_old = 1.0 + (1.0 - beta) * lam * h
    x_prev = np.ones(P)
    S = np.zeros(P)
    peak = np.ones(P)
    final = np.ones(P)
    overflow = np.zeros(P, dtype=bool)
    decreasing = np.ones(P, dtype=bool)
    tail_start = np.minimum(N - N // 10, N - 1)
    limit = 1e12 * 2
    for n in range(1, int(N.max()) + 1):
        S2 = S - K1 * x_prev if n >= 2 else np.zeros(P)
        x = (a_old * x_prev + weight * h * (beta * S + (1.0 - beta) * S2)) / a_new
        active = n <= N
        ax = np.abs(x)
        blown = active & ~overflow & (ax > limit)
        overflow |= blown
        peak = np.where(active, np.maximum(peak, ax), peak)
        in_tail = active & (n > tail_start)
        decreasing &= ~in_tail | (ax < np.abs(x_prev))
        final = np.where(n == N, ax, final)
        S = rho * S + K1 * x
        # finished or blown-up points stop evolving so they cannot reach inf
        frozen = overflow | ~active
        x = np.where(frozen, 0.0, x)
        S = np.where(frozen, 0.0, S)
        x_prev = x
    verdicts = []
    for i in range(P):
        if overflow[i] or final[i] > 1e6 or peak[i] > 1e6:
            verdicts.append(StabilityVerdict("diverged", float(final[i]), float(peak[i])))
        elif final[i] < decay_eps or (final[i] < 1.0 and decreasing[i]):
            verdicts.append(StabilityVerdict("decayed", float(final[i]), float(peak[i])))
        else:
            verdicts.append(StabilityVerdict("bounded", float(final[i]), float(peak[i])))
    return verdicts


@dataclass
class RegionScan:
    lambdas: np.ndarray
    cs: np.ndarray
    numeric: np.ndarray  # True = numerically decayed
    exact: np.ndarray  # True = exact solution decays
    sufficient: np.ndarray  # True = lam + int|k| < 0
    verdicts: list = field(repr=False, default_factory=list)

    @property
    def violations(self) -> int:
        """Sufficient-set points that did not decay numerically."""
        return int(np.sum(self.sufficient & ~self.numeric))

    @property
    def slack(self) -> int:
        """Exact-stable points outside the sufficient set."""
        return int(np.sum(self.exact & ~self.sufficient))


def region_scan(scheme: Union[str, LMMSpec], lambda_grid, c_grid, a: float = 1.0,
                h: float = 0.1, T: Optional[float] = None, decay_eps: float = 1e-6,
                rule: Optional[QuadratureSpec] = None, weighting: str = "consistent",
                horizon_cap: float = 1e4, boundary_tol: float = 1e-9) -> RegionScan:
    """Classify the test equation with kernel ``c e^{-a u}`` over a (lambda, c) grid.

    ``scheme`` is one of the open schemes or an LMM (then ``rule`` is required
    and each point goes through the general solver).  Without ``T`` each point
    runs for ``50 / |lambda + kappa|`` time units, capped at ``horizon_cap``.
    Sufficient-set membership requires ``lambda + kappa`` below
    ``-boundary_tol * (1 + |lambda| + kappa)``.
    """
    lams = np.asarray(lambda_grid, dtype=float)
    cs = np.asarray(c_grid, dtype=float)
    L, C = np.meshgrid(lams, cs, indexing="ij")
    kappa = np.abs(C) / a
    if T is None:
        Tm = np.vectorize(lambda l, k: default_horizon(l, k, horizon_cap))(L, kappa)
    else:
        Tm = np.full(L.shape, float(T))
    if np.any(Tm / h > 1e6):
        raise ValueError("horizon exceeds 1e6 steps per grid point")
    Nm = np.floor(Tm / h * (1 + 1e-12)).astype(int)

    if isinstance(scheme, str):
        if scheme not in OPEN_SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        verdicts = _open_scheme_exponential_batch(
            OPEN_SCHEMES[scheme], L.ravel(), C.ravel(), a, h, Nm.ravel(), weighting, decay_eps)
    else:
        if rule is None:
            raise ValueError("an LMM scan needs a quadrature rule")

        def run(idx):
            lam, c, Tp = L.flat[idx], C.flat[idx], Tm.flat[idx]
            p = LinearTestProblem(lam, Exponential(c, a), 1.0).to_problem()
            res = solve(p, scheme, rule, SolverConfig(h=h, t_end=Tp, startup="exact",
                                                       kernel_cache=True))
            return classify_trajectory(res.states, 1.0, res.status == "overflow", decay_eps)

        verdicts = _pmap(run, range(L.size))
    numeric = np.array([v.classification == "decayed" for v in verdicts]).reshape(L.shape)
    exact = np.vectorize(lambda l, c: bool(routh_hurwitz_exact_region(l, c, a)))(L, C)
    # points within rounding of lam + kappa = 0 sit on the boundary, not inside
    sufficient = (L + kappa) < -boundary_tol * (1.0 + np.abs(L) + kappa)
    return RegionScan(lams, cs, numeric, exact.astype(bool), sufficient, verdicts)


# --- long horizons ---------------------------------------------------------


@dataclass
class LongTrace:
    times: np.ndarray
    norms: np.ndarray
    final: float
    tail_monotone: bool
    tail_rel_change: float
    status: str


def long_horizon_trace(p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec, h: float,
                       T: float, max_points: int = 10000, **cfg_kw) -> LongTrace:
    """Solve to a long horizon and subsample; tail statistics cover the last 10%."""
    if T / h > 1e7:
        raise ValueError("T/h exceeds 1e7 steps")
    cfg_kw.setdefault("startup", "refined")
    cfg_kw.setdefault("kernel_cache", True)
    res = solve(p, m, rule, SolverConfig(h=h, t_end=T, **cfg_kw))
    norms = np.max(np.abs(res.states), axis=1)
    N = len(norms) - 1
    ts = _tail_start(N)
    tail = norms[ts:]
    monotone = bool(np.all(np.diff(tail) < 0))
    rel = abs(tail[-1] - tail[0]) / abs(tail[-1]) if tail[-1] != 0 else math.inf
    idx = np.unique(np.linspace(0, N, min(max_points, N + 1)).round().astype(int))
    return LongTrace(times=res.times[idx], norms=norms[idx], final=float(norms[-1]),
                     tail_monotone=monotone, tail_rel_change=float(rel), status=res.status)
