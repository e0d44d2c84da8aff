"""Fixed-step linear multistep solver for ODEs with memory.

Each memory level ``I_m = sum_i w_{m,i} g(x_i, t_i, t_m)`` (plus the half-node
term) is computed once and stored.  With the default ``memory_weighting="beta"``
the step is

    x_n = sum_i alpha_{q-i} x_{n-i} + h sum_i beta_{q-i} (f_{n-i} + I_{n-i})

i.e. the memory integral rides with the method's derivative weights, which is
what makes BDF2 and the Milne-Simpson pair consistent.  ``"literal"`` uses a
single ``h * I_n`` term at the new level instead (only consistent when the
betas sum to one).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .lmm import LMMSpec, get_method
from .problem import GeneralG, MemoryProblem, SeparableKernel
from .quadrature import QuadratureSpec, get_rule, needs_half_node, row_layout, weights_for

__all__ = [
    "SolverConfig",
    "History",
    "SolveResult",
    "NewtonFailure",
    "MissingOracleError",
    "solve",
    "step",
    "implicit_solve",
    "startup_values",
    "n_steps",
]

_EPS = np.finfo(float).eps


class NewtonFailure(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class MissingOracleError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    h: float
    t_end: float
    startup: str = "exact"  # "exact" or "refined"
    refine_factor: Optional[int] = None  # default 2 * ceil(1/h)
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    fine_cache_depth: Optional[int] = None  # default: rule period
    oracle: Optional[Callable] = None
    kernel_cache: bool = False
    memory_weighting: str = "beta"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.startup not in ("exact", "refined"):
            raise ValueError(f"unknown startup policy {self.startup!r}")
        if self.refine_factor is not None:
            if self.refine_factor < 2 or self.refine_factor % 2:
                raise ValueError("refine_factor must be an even integer >= 2")
        if self.memory_weighting not in ("beta", "literal"):
            raise ValueError(f"unknown memory weighting {self.memory_weighting!r}")


def n_steps(h: float, t_end: float) -> int:
    # floor(t_end / h), tolerant of t_end being a float multiple of h
    return int(math.floor(t_end / h * (1 + 1e-12)))


@dataclass
class History:
    times: np.ndarray
    states: np.ndarray
    half_states: Dict[float, np.ndarray] = field(default_factory=dict)


@dataclass
class SolveResult:
    history: History
    newton_iters: np.ndarray
    status: str = "completed"  # completed | newton_failure | overflow
    failed_step: Optional[int] = None
    wall_stats: Dict[str, float] = field(default_factory=dict)
    g_evals: int = 0

    @property
    def times(self):
        return self.history.times

    @property
    def states(self):
        return self.history.states

    @property
    def completed(self) -> bool:
        return self.status == "completed"


# --- nonlinear solve -------------------------------------------------------


def implicit_solve(residual, guess, tol: float = 1e-12, max_iter: int = 50):
    """Newton's method with a forward-difference Jacobian.

    Returns ``(root, iterations)``; raises ``NewtonFailure`` when the defect
    ``|F(x)|_inf <= tol * (1 + |x|_inf)`` is not reached.
    """
    x = np.array(guess, dtype=float, copy=True).reshape(-1)
    d = x.size
    sq = math.sqrt(_EPS)
    for it in range(max_iter + 1):
        F = np.asarray(residual(x), dtype=float).reshape(-1)
        if not np.all(np.isfinite(F)):
            raise NewtonFailure("residual became non-finite")
        if np.max(np.abs(F)) <= tol * (1 + np.max(np.abs(x))):
            return x, it
        if it == max_iter:
            break
        J = np.empty((d, d))
        for j in range(d):
            dx = sq * (1 + abs(x[j]))
            xp = x.copy()
            xp[j] += dx
            J[:, j] = (np.asarray(residual(xp), dtype=float).reshape(-1) - F) / dx
        try:
            delta = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise NewtonFailure("singular Jacobian in Newton iteration") from None
        x = x - delta
        if not np.all(np.isfinite(x)):
            raise NewtonFailure("Newton iterate became non-finite")
    raise NewtonFailure(f"Newton did not converge in {max_iter} iterations")


# --- the stepper -----------------------------------------------------------


class _Stepper:
    """Holds the history plus per-level caches f_m and I_m."""

    def __init__(self, p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec,
                 cfg: SolverConfig, N: int):
        self.p, self.m, self.rule, self.cfg = p, m, rule, cfg
        self.h = cfg.h
        self.N = N
        d = p.dimension
        self.times = np.arange(N + 1) * cfg.h
        self.X = np.zeros((N + 1, d))
        self.F = np.zeros((N + 1, d))
        self.I = np.zeros((N + 1, d))
        self.half: Dict[float, np.ndarray] = {}
        self.g_evals = 0
        mem = p.memory
        self.separable = isinstance(mem, SeparableKernel)
        self.linear = p.f_matrix is not None and (
            mem is None or self.separable
        )
        self._cache = None
        if cfg.kernel_cache and self.separable and mem.includes_state:
            self._build_cache()

    # memory rows -----------------------------------------------------------

    def _g_row(self, n: int, upto: int):
        """g(x_i, t_i, t_n) for i = 0..upto, shape (upto+1, d)."""
        mem = self.p.memory
        tn = self.times[n]
        cnt = upto + 1
        self.g_evals += cnt
        if self.separable:
            kv = mem.kernel(tn - self.times[:cnt])
            if mem.includes_state:
                return kv[:, None] * self.X[:cnt]
            return kv[:, None]
        if mem.vectorized:
            return np.asarray(mem.func(self.X[:cnt], self.times[:cnt], tn), dtype=float)
        return np.array([mem.func(self.X[i], self.times[i], tn) for i in range(cnt)], dtype=float)

    def _g_single(self, x, s, t):
        self.g_evals += 1
        return self.p.eval_g(x, s, t)

    def _memory_partial(self, n: int):
        """Memory level n without the diagonal term, and w_{n,n}."""
        d = self.p.dimension
        if self.p.memory is None:
            return np.zeros(d), 0.0
        if self._cache is not None:
            return self._cached_partial(n)
        row = weights_for(self.rule, n)
        w = row.weights
        if n > 0:
            terms = w[:n, None] * self._g_row(n, n - 1)
            # strict left-to-right accumulation
            acc = np.cumsum(terms, axis=0)[-1]
        else:
            acc = np.zeros(d)
        for pos, wt in row.half_node_weights:
            acc = acc + wt * self._g_single(self.half[pos], pos * self.h, self.times[n])
        return self.h * acc, self.h * float(w[n])

    def _diag(self, n: int, x):
        if self.p.memory is None:
            return np.zeros(self.p.dimension)
        return self._g_single(x, self.times[n], self.times[n])

    # stationary-kernel fast path ------------------------------------------

    def _build_cache(self):
        rule = self.rule
        b = [float(v) for v in rule.block_weights]
        m = rule.period
        K = self.p.memory.kernel(self.times)
        pint = np.array([b[m] + b[0]] + b[1:m])
        j = np.arange(self.N + 1)
        KP = K * pint[(-j) % m]
        self._cache = {"K": K, "KPrev": KP[::-1].copy(), "b": b}

    def _cached_partial(self, n: int):
        c = self._cache
        K, KPrev, b = c["K"], c["KPrev"], c["b"]
        lay = row_layout(self.rule, n)
        x = self.X[:, 0]
        N, r = self.N, lay.r
        saved = x[n]
        x[n] = 0.0
        acc = 0.0
        if lay.blocks:
            acc = float(np.dot(KPrev[N - n + r:N + 1], x[r:n + 1]))
            rem_r = float(lay.remainder[-1]) if r else 0.0
            acc += (rem_r - b[-1]) * K[n - r] * x[r]
        stop = r if lay.blocks else n
        for i in range(stop):
            acc += float(lay.remainder[i]) * K[n - i] * x[i]
        x[n] = saved
        self.g_evals += n
        if lay.half_weight:
            kv = float(self.p.memory.kernel(self.times[n] - 0.5 * self.h))
            acc += float(lay.half_weight) * kv * self.half[0.5][0]
            self.g_evals += 1
        return np.array([self.h * acc]), self.h * float(lay.last_weight)

    # stepping ---------------------------------------------------------------

    def finish_level(self, n: int, partial=None, wnn=None):
        """Fill f_n and I_n once x_n is known."""
        x = self.X[n]
        self.F[n] = self.p.f(x, self.times[n])
        if n == 0:
            self.I[0] = 0.0
            return
        if partial is None:
            partial, wnn = self._memory_partial(n)
        self.I[n] = partial + wnn * self._diag(n, x)

    def step(self, n: int):
        """Compute x_n; returns Newton iterations used."""
        m, h = self.m, self.h
        q = m.q
        X, F, I = self.X, self.F, self.I
        tn = self.times[n]
        beta_mode = self.cfg.memory_weighting == "beta"

        sa = np.zeros(self.p.dimension)
        for i in range(1, q + 1):
            sa = sa + m.alpha[i - 1] * X[n - i]
        sb = np.zeros(self.p.dimension)
        for i in range(1, q + 1):
            bi = m.beta[i]
            if bi != 0.0:
                sb = sb + bi * (F[n - i] + I[n - i]) if beta_mode else sb + bi * F[n - i]
        const = sa + h * sb

        # partial = h * sum_{i<n} w_{n,i} g_{n,i} (+ half node); wnn = h * w_{n,n}
        partial, wnn = self._memory_partial(n)
        bq = m.beta[0]
        if beta_mode:
            rhs = const + h * bq * partial
            mem_coef = h * bq
        else:
            rhs = const + partial
            mem_coef = 1.0
        if bq == 0.0 and (mem_coef == 0.0 or wnn == 0.0):
            X[n] = rhs
            iters = 0
        elif self.linear:
            X[n] = self._linear_solve(rhs, wnn, bq, mem_coef)
            iters = 1
        else:
            f, g = self.p.f, self.p.eval_g
            if beta_mode:
                def residual(x):
                    return x - (const + h * bq * (f(x, tn) + (partial + wnn * g(x, tn, tn))))
            else:
                def residual(x):
                    return x - (rhs + h * bq * f(x, tn) + wnn * g(x, tn, tn))
            try:
                X[n], iters = implicit_solve(residual, X[n - 1], self.cfg.newton_tol,
                                             self.cfg.newton_max_iter)
            except NewtonFailure as exc:
                exc.step = n
                raise
        self.finish_level(n, partial, wnn)
        return iters

    def _linear_solve(self, rhs, wnn, bq, mem_coef):
        # x = rhs + h bq A x + mem_coef * wnn * g(x, t_n, t_n), g linear in x
        h = self.h
        d = self.p.dimension
        A = self.p.f_matrix
        mem = self.p.memory
        diag = 0.0
        if mem is not None and wnn != 0.0:
            k0 = float(mem.kernel(0.0))
            if mem.includes_state:
                diag = mem_coef * wnn * k0
            else:
                rhs = rhs + mem_coef * wnn * k0
        if d == 1:
            return rhs / (1.0 - h * bq * A[0, 0] - diag)
        return np.linalg.solve(np.eye(d) - h * bq * A - diag * np.eye(d), rhs)


# --- startup ---------------------------------------------------------------


def _oracle_for(p: MemoryProblem, cfg: SolverConfig):
    if cfg.oracle is not None:
        return cfg.oracle
    from .oracle import exact_solution_for

    sol = exact_solution_for(p)
    if sol is None:
        raise MissingOracleError(f"exact startup requested but no oracle is known for {p.description!r}")
    return sol


def startup_values(p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec, cfg: SolverConfig):
    """Starting states ``x_1..x_{q-1}`` (shape (q-1, d)) and half-node states."""
    q = m.q
    need_half = needs_half_node(rule)
    d = p.dimension
    if q == 1 and not need_half:
        return np.zeros((0, d)), {}
    if cfg.startup == "exact":
        sol = _oracle_for(p, cfg)
        states = np.array([np.atleast_1d(sol(i * cfg.h)) for i in range(1, q)]).reshape(q - 1, d)
        half = {0.5: np.atleast_1d(np.asarray(sol(0.5 * cfg.h), dtype=float))} if need_half else {}
        return states, half

    factor = cfg.refine_factor or 2 * math.ceil(1.0 / cfg.h)
    if factor % 2:
        factor += 1
    depth = cfg.fine_cache_depth if cfg.fine_cache_depth is not None else rule.period
    span = max(q - 1, 1 if need_half else 0, depth)
    fine_h = cfg.h / factor
    fine_cfg = SolverConfig(h=fine_h, t_end=span * factor * fine_h, startup="refined",
                            newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter)
    fine = solve(p, get_method("bdf1"), get_rule("trap-closed"), fine_cfg)
    if not fine.completed:
        raise NewtonFailure(f"fine startup solve failed ({fine.status})", step=0)
    fx = fine.states
    states = np.array([fx[i * factor] for i in range(1, q)]).reshape(q - 1, d)
    half = {}
    if need_half:
        for k in range(span):
            half[k + 0.5] = fx[k * factor + factor // 2].copy()
    return states, half


# --- driver ----------------------------------------------------------------


def solve(p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec, cfg: SolverConfig,
          initial_states=None, half_states=None) -> SolveResult:
    """Advance ``p`` to ``cfg.t_end`` with method ``m`` and memory rule ``rule``.

    ``initial_states`` (shape (q, d)) overrides ``x_0..x_{q-1}``; with it,
    ``half_states`` overrides the half-node cache.
    """
    N = n_steps(cfg.h, cfg.t_end)
    q = m.q
    if N < q:
        raise ValueError(f"need at least q={q} steps, got floor(t_end/h)={N}")
    t0 = time.perf_counter()
    st = _Stepper(p, m, rule, cfg, N)
    d = p.dimension
    if initial_states is not None:
        init = np.asarray(initial_states, dtype=float).reshape(q, d)
        st.X[:q] = init
        if half_states is None:
            _, half_states = startup_values(p, m, rule, cfg)
        st.half = {k: np.asarray(v, dtype=float) for k, v in half_states.items()}
    else:
        st.X[0] = p.x0
        starts, half = startup_values(p, m, rule, cfg)
        st.X[1:q] = starts
        st.half = half
    for k in range(q):
        st.finish_level(k)
    t1 = time.perf_counter()

    iters = np.zeros(N + 1, dtype=int)
    status, failed = "completed", None
    limit = 1e12 * (1 + np.max(np.abs(st.X[0])))
    last = N
    for n in range(q, N + 1):
        try:
            iters[n] = st.step(n)
        except NewtonFailure as exc:
            status, failed, last = "newton_failure", exc.step, n - 1
            break
        xn = st.X[n]
        if not np.all(np.isfinite(xn)) or np.max(np.abs(xn)) > limit:
            status, failed, last = "overflow", n, n
            break
    t2 = time.perf_counter()
    hist = History(times=st.times[:last + 1].copy(), states=st.X[:last + 1].copy(),
                   half_states=dict(st.half))
    return SolveResult(history=hist, newton_iters=iters[:last + 1], status=status,
                       failed_step=failed,
                       wall_stats={"startup": t1 - t0, "stepping": t2 - t1},
                       g_evals=st.g_evals)


def step(n: int, hist: History, p: MemoryProblem, m: LMMSpec, rule: QuadratureSpec,
         cfg: SolverConfig):
    """Compute ``x_n`` from a history holding ``x_0..x_{n-1}``.

    Rebuilds the per-level caches from scratch, so this costs O(n^2); ``solve``
    keeps them incrementally.
    """
    if n < m.q:
        raise ValueError("step index must be at least q")
    if len(hist.states) < n:
        raise ValueError("history does not reach x_{n-1}")
    cfg_n = dataclasses.replace(cfg, t_end=n * cfg.h * (1 + 1e-12))
    st = _Stepper(p, m, rule, cfg_n, n)
    st.X[:n] = np.asarray(hist.states[:n], dtype=float)
    st.half = dict(hist.half_states)
    for k in range(n):
        st.finish_level(k)
    st.step(n)
    return st.X[n].copy()
