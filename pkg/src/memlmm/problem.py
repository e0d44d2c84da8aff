"""Problem data model for ODEs with memory.

A problem is ``x'(t) = f(x, t) + int_0^t g(x(s), s, t) ds`` with ``x(0) = x0``.
The memory term is either a general evaluator ``g(x, s, t)`` or a stationary
separable kernel ``k(t - s) * x(s)`` (scalar problems only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

__all__ = [
    "Exponential",
    "PowerLaw",
    "CustomKernel",
    "Kernel",
    "GeneralG",
    "SeparableKernel",
    "MemoryTerm",
    "MemoryProblem",
    "LinearTestProblem",
    "BUILTIN_IDS",
    "builtin_example",
    "kernel_segment_integral",
    "kernel_abs_total",
    "kernel_from_json",
    "kernel_to_json",
    "problem_from_json",
    "problem_to_json",
]


# --- kernels ---------------------------------------------------------------


@dataclass(frozen=True)
class Exponential:
    """k(u) = c * exp(-a u)."""

    c: float
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"exponential kernel needs a > 0, got a={self.a}")

    def __call__(self, u):
        return self.c * np.exp(-self.a * np.asarray(u, dtype=float))

    def segment_integral(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        # c/a * e^{-a lo} * (1 - e^{-a (hi - lo)}), stable for short segments
        width = np.where(np.isinf(hi), np.inf, hi - lo)
        return self.c / self.a * np.exp(-self.a * lo) * -np.expm1(-self.a * width)

    def abs_total(self):
        return abs(self.c) / self.a


@dataclass(frozen=True)
class PowerLaw:
    """k(u) = c / (u + 1)^p with p > 1."""

    c: float
    p: float

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"power-law kernel needs p > 1, got p={self.p}")

    def __call__(self, u):
        return self.c / (np.asarray(u, dtype=float) + 1.0) ** self.p

    def segment_integral(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        e = 1.0 - self.p
        return self.c / (self.p - 1.0) * ((lo + 1.0) ** e - (hi + 1.0) ** e)

    def abs_total(self):
        return abs(self.c) / (self.p - 1.0)


@dataclass(frozen=True)
class CustomKernel:
    """User kernel; exact segment integrals and the L1 norm are optional."""

    point_eval: Callable[[Any], Any]
    segment_integral_fn: Optional[Callable[[float, float], float]] = None
    abs_total_value: Optional[float] = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            return float(self.point_eval(float(u)))
        return np.array([self.point_eval(float(v)) for v in u.ravel()]).reshape(u.shape)

    def segment_integral(self, lo, hi):
        if self.segment_integral_fn is not None:
            return self.segment_integral_fn(lo, hi)
        return _adaptive_simpson(self, float(lo), float(hi))

    def abs_total(self):
        if self.abs_total_value is not None:
            return float(self.abs_total_value)
        if self.segment_integral_fn is None:
            raise ValueError("custom kernel has no abs_total and no exact segment integral")
        probe = self(np.concatenate([[0.0], np.logspace(-3, 4, 200)]))
        if np.all(probe >= 0) or np.all(probe <= 0):
            return abs(float(self.segment_integral_fn(0.0, math.inf)))
        raise ValueError("custom kernel is not sign-definite; supply abs_total explicitly")


Kernel = Union[Exponential, PowerLaw, CustomKernel]


def _adaptive_simpson(k, lo, hi, rtol=1e-12, max_level=22):
    # composite Simpson, doubling the panel count until two levels agree
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("Simpson fallback needs a finite interval")
    if hi == lo:
        return 0.0
    if not np.all(np.isfinite(k(np.array([lo, 0.5 * (lo + hi), hi])))):
        raise ValueError("kernel point_eval is not finite on the interval")
    prev = None
    for level in range(1, max_level + 1):
        n = 2**level
        u = np.linspace(lo, hi, n + 1)
        v = k(u)
        est = (hi - lo) / (3 * n) * (v[0] + v[-1] + 4 * v[1:-1:2].sum() + 2 * v[2:-1:2].sum())
        if prev is not None and abs(est - prev) <= rtol * max(abs(est), 1e-300):
            return float(est)
        prev = est
    raise ValueError("adaptive Simpson did not reach the requested tolerance")


def kernel_segment_integral(k: Kernel, u_lo: float, u_hi: float) -> float:
    """Integral of ``k`` over ``[u_lo, u_hi]``; ``u_hi`` may be ``inf`` for closed forms."""
    if not 0 <= u_lo <= u_hi:
        raise ValueError(f"need 0 <= u_lo <= u_hi, got [{u_lo}, {u_hi}]")
    return float(k.segment_integral(u_lo, u_hi))


def kernel_abs_total(k: Kernel) -> float:
    """L1 norm of the kernel over the half line."""
    return float(k.abs_total())


# --- memory terms ----------------------------------------------------------


@dataclass(frozen=True)
class GeneralG:
    """General memory integrand ``g(x, s, t)``.

    With ``vectorized=True`` the evaluator receives a stacked history
    ``x`` of shape (n, d) and ``s`` of shape (n,) and must return (n, d).
    """

    func: Callable
    vectorized: bool = False


@dataclass(frozen=True)
class SeparableKernel:
    """``g(x, s, t) = k(t - s) * x`` (or ``k(t - s)`` when ``includes_state`` is false)."""

    kernel: Kernel
    includes_state: bool = True


MemoryTerm = Union[GeneralG, SeparableKernel]


# --- problems --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MemoryProblem:
    dimension: int
    f: Callable[[np.ndarray, float], np.ndarray]
    memory: Optional[MemoryTerm]
    x0: np.ndarray
    description: str = ""
    # f(x, t) == f_matrix @ x when set; enables direct linear solves
    f_matrix: Optional[np.ndarray] = None
    spec: Optional[dict] = field(default=None)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if x0.shape != (self.dimension,):
            raise ValueError(f"x0 must have {self.dimension} entries, got shape {x0.shape}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if isinstance(self.memory, SeparableKernel) and self.dimension != 1:
            raise ValueError("separable kernels are supported for scalar problems only")
        if self.f_matrix is not None:
            fm = np.atleast_2d(np.asarray(self.f_matrix, dtype=float))
            if fm.shape != (self.dimension, self.dimension):
                raise ValueError("f_matrix shape does not match dimension")
            object.__setattr__(self, "f_matrix", fm)

    @property
    def kernel(self) -> Optional[Kernel]:
        if isinstance(self.memory, SeparableKernel):
            return self.memory.kernel
        return None

    def linear_test_parameters(self):
        """(lambda, kernel) when this is the scalar test equation, else None."""
        if (
            self.dimension == 1
            and self.f_matrix is not None
            and isinstance(self.memory, SeparableKernel)
            and self.memory.includes_state
        ):
            return float(self.f_matrix[0, 0]), self.memory.kernel
        return None

    def eval_g(self, x, s, t):
        """Single evaluation of the memory integrand."""
        mem = self.memory
        if mem is None:
            return np.zeros(self.dimension)
        if isinstance(mem, SeparableKernel):
            kv = float(mem.kernel(t - s))
            return kv * np.asarray(x, dtype=float) if mem.includes_state else np.array([kv])
        if mem.vectorized:
            return np.asarray(mem.func(np.atleast_2d(x), np.atleast_1d(s), t), dtype=float)[0]
        return np.asarray(mem.func(x, s, t), dtype=float)


@dataclass(frozen=True)
class LinearTestProblem:
    """Scalar test equation ``x' = lambda x + int_0^t k(t - s) x(s) ds``."""

    lam: float
    kernel: Kernel
    x0: float = 1.0

    def to_problem(self) -> MemoryProblem:
        lam = float(self.lam)
        spec = None
        if isinstance(self.kernel, (Exponential, PowerLaw)):
            spec = {
                "type": "linear_test",
                "lambda": lam,
                "kernel": kernel_to_json(self.kernel),
                "x0": float(self.x0),
            }
        return MemoryProblem(
            dimension=1,
            f=_linear_f(lam),
            memory=SeparableKernel(self.kernel, includes_state=True),
            x0=np.array([self.x0]),
            description=f"linear test, lambda={lam}",
            f_matrix=np.array([[lam]]),
            spec=spec,
        )


def _linear_f(lam):
    def f(x, t):
        return lam * x

    return f


# --- built-in examples -----------------------------------------------------

BUILTIN_IDS = ("ex1", "ex2", "ex3", "ex4", "ex5", "ex6")

_BUILTIN_TABLE = {
    "ex1": (1.0, Exponential(c=-2.0, a=1.9)),
    "ex2": (1.0, PowerLaw(c=-10.0, p=2.0)),
    "ex3": (1.0, Exponential(c=-2.0, a=1.0)),
    "ex4": (-1.0, Exponential(c=8.0, a=3.0)),
    "ex5": (-11.0, Exponential(c=10.0, a=1.0)),
    "ex6": (None, PowerLaw(c=10.0, p=2.0)),
}


def builtin_example(example_id: str, lam: Optional[float] = None,
                    includes_state: Optional[bool] = None) -> MemoryProblem:
    """One of the six reference problems, all with ``x0 = 1``.

    ``ex2`` follows the printed equation (no ``x(s)`` in the integrand) unless
    ``includes_state=True``; ``ex6`` requires ``lam``.
    """
    key = str(example_id).lower()
    if key not in _BUILTIN_TABLE:
        raise ValueError(f"unknown example {example_id!r}; expected one of {BUILTIN_IDS}")
    default_lam, kernel = _BUILTIN_TABLE[key]
    if key == "ex6":
        if lam is None:
            raise ValueError("ex6 requires a lambda value (e.g. -10 or -10.1)")
    elif lam is not None:
        raise ValueError(f"{key} has a fixed lambda; overrides only apply to ex6")
    lam = default_lam if lam is None else float(lam)
    if includes_state is None:
        includes_state = key != "ex2"
    elif key != "ex2" and not includes_state:
        raise ValueError("only ex2 supports includes_state=False")

    spec: dict = {"type": "builtin", "id": key}
    if key == "ex6":
        spec["lambda"] = lam
    if key == "ex2" and includes_state:
        spec["includes_state"] = True
    return MemoryProblem(
        dimension=1,
        f=_linear_f(lam),
        memory=SeparableKernel(kernel, includes_state=includes_state),
        x0=np.array([1.0]),
        description=f"{key}: lambda={lam}, kernel={kernel}",
        f_matrix=np.array([[lam]]),
        spec=spec,
    )


# --- JSON ------------------------------------------------------------------


def kernel_to_json(k: Kernel) -> dict:
    if isinstance(k, Exponential):
        return {"form": "exponential", "c": float(k.c), "a": float(k.a)}
    if isinstance(k, PowerLaw):
        return {"form": "power", "c": float(k.c), "p": float(k.p)}
    raise ValueError("custom kernels have no JSON form")


def kernel_from_json(obj: dict) -> Kernel:
    form = obj.get("form")
    try:
        if form == "exponential":
            return Exponential(c=float(obj["c"]), a=float(obj["a"]))
        if form in ("power", "power_law"):
            return PowerLaw(c=float(obj["c"]), p=float(obj["p"]))
    except KeyError as exc:
        raise ValueError(f"kernel field missing: {exc}") from None
    raise ValueError(f"unknown kernel form {form!r}")


def problem_from_json(obj: dict) -> MemoryProblem:
    kind = obj.get("type")
    if kind == "builtin":
        if "id" not in obj:
            raise ValueError("builtin problem needs an 'id'")
        return builtin_example(obj["id"], lam=obj.get("lambda"),
                               includes_state=obj.get("includes_state"))
    if kind == "linear_test":
        try:
            return LinearTestProblem(
                lam=float(obj["lambda"]),
                kernel=kernel_from_json(obj["kernel"]),
                x0=float(obj.get("x0", 1.0)),
            ).to_problem()
        except KeyError as exc:
            raise ValueError(f"linear_test field missing: {exc}") from None
    raise ValueError(f"unknown problem type {kind!r}")


def problem_to_json(p: MemoryProblem) -> dict:
    if p.spec is None:
        raise ValueError("problem was not built from a serialisable description")
    return dict(p.spec)
