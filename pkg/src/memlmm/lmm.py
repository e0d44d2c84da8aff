"""Classical linear multistep methods and the root condition.

Coefficient convention (fixed, do not reorder):

    x_n = sum_{i=1}^{q} alpha[i-1] * x_{n-i} + h * sum_{i=0}^{q} beta[i] * l_{n-i}

so ``alpha = [alpha_{q-1}, ..., alpha_0]`` pairs with ``x_{n-1}, ..., x_{n-q}``
and ``beta = [beta_q, ..., beta_0]`` pairs with ``l_n, ..., l_{n-q}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence

import numpy as np

__all__ = [
    "LMMSpec",
    "RootReport",
    "RootFindingError",
    "builtin_methods",
    "get_method",
    "METHOD_TOKENS",
    "companion_matrix",
    "generating_polynomial",
    "polynomial_roots",
    "check_root_condition",
]


class RootFindingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LMMSpec:
    name: str
    alpha: tuple
    beta: tuple
    order: int

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        beta = tuple(float(b) for b in self.beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if len(alpha) < 1:
            raise ValueError("need at least one alpha coefficient")
        if len(beta) != len(alpha) + 1:
            raise ValueError(f"beta must have q+1={len(alpha) + 1} entries, got {len(beta)}")
        if abs(alpha[-1]) + abs(beta[-1]) == 0:
            raise ValueError("|alpha_0| + |beta_0| must be positive")
        if self.order < 1:
            raise ValueError("order must be positive")

    @property
    def q(self) -> int:
        return len(self.alpha)

    @property
    def implicit(self) -> bool:
        return self.beta[0] != 0.0

    def consistency_defects(self):
        """(p(1), p'(1) - sum(beta)); both vanish for a consistent method."""
        q = self.q
        rho1 = 1.0 - sum(self.alpha)
        drho1 = q - sum((q - i) * self.alpha[i - 1] for i in range(1, q + 1))
        return rho1, drho1 - sum(self.beta)


def _m(name, alpha, beta, order):
    return LMMSpec(name, tuple(Fraction(a) for a in alpha), tuple(Fraction(b) for b in beta), order)


_BUILTINS = (
    _m("BDF1", ["1"], ["1", "0"], 1),
    _m("BDF2", ["4/3", "-1/3"], ["2/3", "0", "0"], 2),
    _m("AM2", ["1"], ["1/2", "1/2"], 2),
    _m("AB1", ["1"], ["0", "1"], 1),
    _m("AB2", ["1", "0"], ["0", "3/2", "-1/2"], 2),
    _m("MS1", ["0", "1"], ["0", "2", "0"], 2),
    _m("MS2", ["0", "1"], ["1/3", "4/3", "1/3"], 4),
)

METHOD_TOKENS = tuple(m.name.lower() for m in _BUILTINS)


def builtin_methods() -> List[LMMSpec]:
    return list(_BUILTINS)


def get_method(token: str) -> LMMSpec:
    for m in _BUILTINS:
        if m.name.lower() == str(token).lower():
            return m
    raise ValueError(f"unknown method {token!r}; expected one of {'|'.join(METHOD_TOKENS)}")


def generating_polynomial(m: LMMSpec) -> np.ndarray:
    """Monic coefficients of ``p(s) = s^q - sum alpha_{q-i} s^{q-i}``, highest degree first."""
    return np.concatenate([[1.0], -np.asarray(m.alpha, dtype=float)])


def companion_matrix(coeffs: Sequence[float]) -> np.ndarray:
    """Companion matrix of a monic polynomial, laid out like the one-step
    reformulation: first row carries the recursion, subdiagonal shifts."""
    c = np.asarray(coeffs, dtype=float)
    deg = len(c) - 1
    A = np.zeros((deg, deg))
    A[0, :] = -c[1:]
    A[1:, :-1] += np.eye(deg - 1)
    return A


def polynomial_roots(coeffs: Sequence[float], max_iter: int = 10000) -> np.ndarray:
    """All roots of a monic polynomial, with multiplicity.

    Eigenvalues of the companion matrix, then Newton polishing on each root.
    """
    c = np.asarray(coeffs, dtype=float)
    if c.ndim != 1 or len(c) < 2:
        raise ValueError("need a polynomial of degree >= 1")
    if c[0] != 1.0:
        raise ValueError("polynomial must be monic")
    deg = len(c) - 1
    try:
        roots = np.linalg.eigvals(companion_matrix(c)).astype(complex)
    except np.linalg.LinAlgError as exc:
        raise RootFindingError(f"companion eigenvalue solve failed: {exc}") from None
    dc = np.polyder(c)
    iters = 0
    for k in range(deg):
        z = roots[k]
        for _ in range(50):
            iters += 1
            if iters > max_iter:
                raise RootFindingError("root polishing exceeded the iteration cap")
            pz = np.polyval(c, z)
            dpz = np.polyval(dc, z)
            if dpz == 0:
                break
            with np.errstate(all="ignore"):
                step = pz / dpz
                z_new = z - step
                p_new = np.polyval(c, z_new)
            # keep the polished value only if it improves the residual
            if not np.isfinite(z_new) or not abs(p_new) < abs(pz):
                break
            z = z_new
            if abs(step) <= 1e-16 * (1 + abs(z)):
                break
        roots[k] = z
    bad = [z for z in roots
           if not np.isfinite(z) or not abs(np.polyval(c, z)) <= 1e-10 * (1 + abs(z)) ** deg]
    if bad:
        raise RootFindingError(f"roots failed the residual check: {bad}")
    return roots


@dataclass(frozen=True)
class RootReport:
    roots: np.ndarray
    satisfied: bool
    violations: list = field(default_factory=list)


def check_root_condition(m: LMMSpec, tol: float = 1e-9) -> RootReport:
    """Root condition: roots in the closed unit disk, simple on the circle."""
    coeffs = generating_polynomial(m)
    roots = polynomial_roots(coeffs)
    dcoeffs = np.polyder(coeffs)
    violations = []
    for z in roots:
        if abs(z) > 1 + tol:
            violations.append({"root": complex(z), "reason": "outside_unit_circle"})
    on_circle = [i for i, z in enumerate(roots) if abs(z) >= 1 - tol and abs(z) <= 1 + tol]
    flagged = set()
    for a in on_circle:
        for b in on_circle:
            if b <= a:
                continue
            za, zb = roots[a], roots[b]
            # eigenvalues of a double root split by ~sqrt(eps); p' identifies them
            close = abs(za - zb) <= tol or (
                abs(za - zb) <= 1e-6 and abs(np.polyval(dcoeffs, 0.5 * (za + zb))) <= 1e-6
            )
            if close and a not in flagged:
                flagged.update((a, b))
                violations.append({"root": complex(za), "reason": "repeated_on_circle"})
    return RootReport(roots=roots, satisfied=not violations, violations=violations)
