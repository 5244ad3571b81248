import pytest
import torch

from udiff.diffusion import (
    DomainError,
    GeometricSchedule,
    LinearSchedule,
    Vocab,
    alpha_at,
    make_schedule,
)


def test_linear_boundaries():
    sched = LinearSchedule()
    assert alpha_at(sched, 0.0) == (1.0, -1.0)
    assert alpha_at(sched, 1.0) == (1e-6, -1.0)  # clamp floor at t = 1


def test_linear_interior_value():
    assert alpha_at(LinearSchedule(), 0.25) == (0.75, -1.0)


def test_domain_validation():
    sched = LinearSchedule()
    with pytest.raises(DomainError):
        alpha_at(sched, -0.01)
    with pytest.raises(DomainError):
        alpha_at(sched, 1.01)


def test_geometric_boundaries():
    sched = GeometricSchedule(clamp=1e-6)
    a0, _ = alpha_at(sched, 0.0)
    a1, _ = alpha_at(sched, 1.0)
    assert a0 == 1.0
    assert a1 == pytest.approx(1e-6, rel=1e-9)


@pytest.mark.parametrize("kind", ["linear", "geometric"])
def test_monotone_nonincreasing(kind):
    sched = make_schedule(kind)
    ts = torch.linspace(0, 1, 257, dtype=torch.float64)
    alphas = sched.alpha(ts)
    assert (alphas[1:] <= alphas[:-1] + 1e-15).all()
    assert (sched.alpha_prime(ts) <= 0).all()


@pytest.mark.parametrize("kind", ["linear", "geometric"])
def test_derivative_matches_finite_differences(kind):
    sched = make_schedule(kind)
    h = 1e-4
    rng = torch.Generator().manual_seed(11)
    for _ in range(200):
        t = float(torch.rand(1, generator=rng, dtype=torch.float64)) * (1 - 4 * h) + 2 * h
        a_plus, _ = alpha_at(sched, t + h)
        a_minus, _ = alpha_at(sched, t - h)
        fd = (a_plus - a_minus) / (2 * h)
        _, analytic = alpha_at(sched, t)
        assert fd == pytest.approx(analytic, abs=1e-5)


def test_make_schedule_rejects_unknown():
    with pytest.raises(DomainError):
        make_schedule("cosine")


def test_vocab_prior():
    v = Vocab(5)
    p = v.prior()
    assert abs(float(p.sum()) - 1.0) < 1e-12
    assert (p == 0.2).all()
    with pytest.raises(DomainError):
        Vocab(1)
