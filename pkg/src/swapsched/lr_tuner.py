"""Learning-rate adaptation for a minibatch grown by a factor ``q``.

Keeping the contraction factor of fixed-step SGD equal across minibatch
sizes gives ``(1 - a c mu)^(iters - 1) = (1 - a* c mu)^(iters/q - 1)``;
dropping ``mu`` and the ``-1`` terms yields the closed form used here,
``a* = (1 - (1 - a c)^q) / c``.  All arithmetic is generic so exact
``Fraction`` inputs give exact outputs for integer ``q``.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Real


class LrError(ValueError):
    pass


@dataclass(frozen=True)
class LrConfig:
    alpha_base: Real
    c: Real
    q: Real
    mu: Real = 1
    iters_base: int = 1000

    def __post_init__(self):
        if not self.alpha_base > 0 or not self.c > 0:
            raise LrError("alpha_base and c must be positive")
        if not 0 < self.mu <= 1:
            raise LrError("mu must lie in (0, 1]")
        if self.iters_base < 1:
            raise LrError("iters_base must be a positive integer")
        if not self.q > 0:
            raise LrError("q must be positive")


def adapted_learning_rate(cfg: LrConfig, absorb_mu: bool = False):
    """Step size for the larger minibatch.

    With ``absorb_mu`` the convexity constant is taken as ``c * mu``.
    """
    c = cfg.c * cfg.mu if absorb_mu else cfg.c
    contraction = cfg.alpha_base * c
    if contraction >= 1:
        raise LrError(f"alpha_base * c = {float(contraction):g} >= 1; no contraction")
    if cfg.q < 1:
        raise LrError("q < 1 (shrinking the minibatch) is not supported")
    if cfg.q == 1:
        return cfg.alpha_base
    return (1 - (1 - contraction) ** cfg.q) / c


def contraction_residual(cfg: LrConfig, alpha_star) -> float:
    """LHS minus RHS of the equal-contraction condition at ``alpha_star``."""
    base_lhs = 1 - cfg.alpha_base * cfg.c * cfg.mu
    base_rhs = 1 - alpha_star * cfg.c * cfg.mu
    if base_lhs <= 0 or base_rhs <= 0:
        raise LrError("contraction bases must be positive")
    if base_lhs == base_rhs and cfg.q == 1:
        return 0.0
    lhs = float(base_lhs) ** (cfg.iters_base - 1)
    rhs = float(base_rhs) ** (cfg.iters_base / float(cfg.q) - 1)
    return lhs - rhs


def adjust_iterations(k_star: int, k_base: int, iters_base: int) -> int:
    """ceil(iters_base / q) with q = k_star / k_base, in exact integer arithmetic."""
    if k_star <= 0 or k_base <= 0 or iters_base <= 0:
        raise LrError("k_star, k_base and iters_base must be positive")
    return -(-iters_base * k_base // k_star)
