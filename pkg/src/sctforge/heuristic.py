"""Single-epoch sizing rule: treat input pixels as tokens and aim for T/P near 5."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import ParameterError

TARGET_RATIO = 5


@dataclass(frozen=True)
class HeuristicInput:
    params: int
    resolution: tuple[int, int]
    slices: tuple[int, int]
    iterations: int = 1

    def __post_init__(self) -> None:
        h, w = self.resolution
        lo, hi = self.slices
        if min(self.params, h, w, lo, self.iterations) <= 0 or hi < lo:
            raise ParameterError("heuristic inputs must be positive with slices min <= max")


@dataclass(frozen=True)
class TpBand:
    tokens: tuple[int, int]
    ratio: tuple[float, float]
    params: int

    def to_dict(self) -> dict:
        return {"T_min": self.tokens[0], "T_max": self.tokens[1],
                "TP_min": self.ratio[0], "TP_max": self.ratio[1], "P": self.params}


def token_count(resolution: Sequence[int], slices: int, iterations: int = 1) -> int:
    """Pixels seen per patient: one CBCT slice is h*w tokens; the CT target is not counted."""
    h, w = resolution
    if min(h, w, slices, iterations) <= 0:
        raise ParameterError("resolution, slices and iterations must be positive")
    return int(h) * int(w) * int(slices) * int(iterations)


def tp_ratio(tokens: float, params: float) -> float:
    if params == 0:
        raise ParameterError("parameter count must be non-zero")
    return tokens / params


def optimal_p(tokens: int, target: float = TARGET_RATIO) -> tuple[Fraction | float, float]:
    """argmin_P |log(target) - log(T/P)|, i.e. P = T / target, and its objective value.

    Integer inputs give an exact :class:`~fractions.Fraction`.
    """
    if tokens <= 0 or target <= 0:
        raise ParameterError("tokens and target must be positive")
    if isinstance(tokens, int) and isinstance(target, int):
        p: Fraction | float = Fraction(tokens, target)
        if p.denominator == 1:
            p = p.numerator
    else:
        p = tokens / target
    objective = abs(math.log(target) - math.log(tokens / p))
    return p, objective


def tp_band(inp: HeuristicInput) -> TpBand:
    """T and T/P at the smallest and largest slice counts."""
    t = tuple(token_count(inp.resolution, s, inp.iterations) for s in inp.slices)
    return TpBand(t, (tp_ratio(t[0], inp.params), tp_ratio(t[1], inp.params)), inp.params)
