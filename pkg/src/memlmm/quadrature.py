"""Composite Newton-Cotes memory quadratures.

``weights_for(rule, n)`` returns the weights ``w_{n,0..n}`` such that
``h * sum_i w_{n,i} phi(t_i)`` approximates ``int_0^{t_n} phi``.  When ``n`` is
not a multiple of the rule's block length ``m``, the leading ``r = n mod m``
intervals ``[t_0, t_r]`` are covered by a closed correction rule and the
composite rule runs on ``[t_r, t_n]``; the right end is never touched, so open
rules keep ``w_{n,n} = 0``.  For fourth-order rules a single leading interval
uses Simpson's rule with the half node ``t_{1/2}``.

Weights are derived in exact rational arithmetic and emitted as floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction as Fr
from typing import List, Tuple

import numpy as np

__all__ = [
    "QuadratureSpec",
    "WeightRow",
    "RowLayout",
    "builtin_rules",
    "get_rule",
    "RULE_TOKENS",
    "weights_for",
    "row_layout",
    "exact_weights",
    "degree_of_precision",
    "needs_half_node",
]


@dataclass(frozen=True)
class QuadratureSpec:
    name: str
    token: str
    order: int
    period: int
    open_right: bool
    block_weights: Tuple[Fr, ...]

    def __post_init__(self):
        if len(self.block_weights) != self.period + 1:
            raise ValueError("block_weights must have period + 1 entries")
        if sum(self.block_weights) != self.period:
            raise ValueError("block weights must sum to the block length")


def _rule(name, token, order, block, open_right):
    block = tuple(Fr(b) for b in block)
    return QuadratureSpec(name, token, order, len(block) - 1, open_right, block)


_RULES = (
    _rule("trapezoid-closed", "trap-closed", 2, ["1/2", "1/2"], False),
    _rule("simpson-closed", "simpson", 4, ["1/3", "4/3", "1/3"], False),
    _rule("midpoint-open", "midpoint", 2, ["0", "2", "0"], True),
    _rule("trapezoid-open", "trap-open", 2, ["0", "3/2", "3/2", "0"], True),
    _rule("milne-open", "milne", 4, ["0", "8/3", "-4/3", "8/3", "0"], True),
)

RULE_TOKENS = tuple(r.token for r in _RULES)

# closed corrections for the leading r intervals
_CORRECTIONS = {
    1: (Fr(1, 2), Fr(1, 2)),
    2: (Fr(1, 3), Fr(4, 3), Fr(1, 3)),
    3: (Fr(3, 8), Fr(9, 8), Fr(9, 8), Fr(3, 8)),
}
# Simpson on [t_0, t_1] through t_{1/2}: h/6 (g_0 + 4 g_{1/2} + g_1)
_HALF_SIMPSON = (Fr(1, 6), Fr(1, 6))
_HALF_WEIGHT = Fr(2, 3)


def builtin_rules() -> List[QuadratureSpec]:
    return list(_RULES)


def get_rule(token: str) -> QuadratureSpec:
    t = str(token).lower()
    for r in _RULES:
        if t in (r.token, r.name):
            return r
    raise ValueError(f"unknown quadrature {token!r}; expected one of {'|'.join(RULE_TOKENS)}")


def degree_of_precision(rule: QuadratureSpec) -> int:
    return rule.order - 1


def needs_half_node(rule: QuadratureSpec) -> bool:
    return rule.order >= 4


@dataclass(frozen=True)
class RowLayout:
    """O(1) description of a weight row.

    ``remainder`` holds the weights on ``t_0..t_r`` (empty when r = 0);
    ``blocks`` composite blocks follow from ``t_r``.
    """

    n: int
    r: int
    remainder: Tuple[Fr, ...]
    half_weight: Fr
    blocks: int
    rule: QuadratureSpec

    @property
    def last_weight(self) -> Fr:
        if self.blocks:
            return self.rule.block_weights[-1]
        return self.remainder[-1]


def row_layout(rule: QuadratureSpec, n: int) -> RowLayout:
    n = int(n)
    if n <= 0:
        raise ValueError(f"weight rows start at n = 1, got n = {n}")
    m = rule.period
    r = n % m
    if r == 0:
        return RowLayout(n, 0, (), Fr(0), n // m, rule)
    if r == 1 and rule.order >= 4:
        rem, half = _HALF_SIMPSON, _HALF_WEIGHT
    else:
        rem, half = _CORRECTIONS[r], Fr(0)
    return RowLayout(n, r, rem, half, (n - r) // m, rule)


def exact_weights(rule: QuadratureSpec, n: int):
    """Rational weights ``[w_{n,0}, ..., w_{n,n}]`` and the half-node weight."""
    lay = row_layout(rule, n)
    w = [Fr(0)] * (n + 1)
    for i, v in enumerate(lay.remainder):
        w[i] += v
    b = rule.block_weights
    m = rule.period
    for k in range(lay.blocks):
        start = lay.r + k * m
        for j, v in enumerate(b):
            w[start + j] += v
    return w, lay.half_weight


@dataclass(frozen=True)
class WeightRow:
    n: int
    weights: np.ndarray
    half_node_weights: tuple  # ((position, weight), ...)
    remainder_span: int


def weights_for(rule: QuadratureSpec, n: int) -> WeightRow:
    lay = row_layout(rule, n)
    b = rule.block_weights
    m = rule.period
    w = np.zeros(n + 1)
    if lay.blocks:
        start = lay.r
        seg = w[start:]
        for j in range(1, m):
            seg[j::m] = float(b[j])
        seg[m:-1:m] = float(b[m] + b[0])
        seg[0] = float(b[0])
        seg[-1] = float(b[m])
    if lay.r:
        for i, v in enumerate(lay.remainder[:-1]):
            w[i] = float(v)
        tail = lay.remainder[-1] + (b[0] if lay.blocks else 0)
        w[lay.r] = float(tail)
    half = ((0.5, float(lay.half_weight)),) if lay.half_weight else ()
    w.setflags(write=False)
    return WeightRow(n=n, weights=w, half_node_weights=half, remainder_span=lay.r)
