from fractions import Fraction

import pytest

from swapsched.lr_tuner import LrConfig, LrError, adapted_learning_rate, adjust_iterations, contraction_residual


def test_identity_at_q1():
    cfg = LrConfig(0.1, 1.0, 1)
    assert adapted_learning_rate(cfg) == 0.1
    assert contraction_residual(cfg, 0.1) == 0.0


def test_q2_example():
    cfg = LrConfig(0.1, 1.0, 2, iters_base=1000)
    a = adapted_learning_rate(cfg)
    assert a == pytest.approx(0.19)
    assert abs(contraction_residual(cfg, a)) < 1e-3


def test_exact_with_fractions():
    cfg = LrConfig(Fraction(1, 10), Fraction(1), 2)
    assert adapted_learning_rate(cfg) == Fraction(19, 100)


def test_limit_towards_one_over_c():
    prev = 0
    for q in (2, 8, 64, 256):
        a = adapted_learning_rate(LrConfig(0.1, 1.0, q))
        assert prev < a < 1.0
        prev = a
    assert prev == pytest.approx(1.0)
    assert adapted_learning_rate(LrConfig(0.1, 1.0, 4096)) == pytest.approx(1.0)


def test_mu_absorbed():
    cfg = LrConfig(0.1, 1.0, 2, mu=0.5, iters_base=1000)
    a = adapted_learning_rate(cfg, absorb_mu=True)
    assert a == pytest.approx((1 - 0.95**2) / 0.5)
    assert abs(contraction_residual(cfg, a)) < 1e-3


def test_errors():
    with pytest.raises(LrError):
        adapted_learning_rate(LrConfig(1.0, 1.0, 2))
    with pytest.raises(LrError):
        adapted_learning_rate(LrConfig(0.1, 1.0, 0.5))
    with pytest.raises(LrError):
        LrConfig(0.1, 1.0, 2, mu=1.5)
    with pytest.raises(LrError):
        contraction_residual(LrConfig(0.1, 1.0, 2), 2.0)


@pytest.mark.parametrize("k_star,k_base,want", [(16, 8, 500), (8, 8, 1000), (24, 8, 334)])
def test_adjust_iterations(k_star, k_base, want):
    assert adjust_iterations(k_star, k_base, 1000) == want
