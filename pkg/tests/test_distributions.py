import numpy as np
import pytest
from scipy import integrate

from ataflow import autodiff as ad
from ataflow.distributions import (BaseDistribution, BaseKind, TailParams, normal_log_prob,
                                   studentt_cdf, studentt_dx_dnu, studentt_log_prob,
                                   studentt_quantile, studentt_rsample, studentt_sample)
from ataflow.errors import DomainError


def test_normal_log_prob_at_zero():
    assert normal_log_prob(np.array(0.0)) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_studentt_log_prob_against_mpmath():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 30
    x, nu = 2.0, 3.0
    ref = (mpmath.loggamma((nu + 1) / 2) - mpmath.loggamma(nu / 2) - 0.5 * mpmath.log(nu * mpmath.pi)
           - (nu + 1) / 2 * mpmath.log(1 + x * x / nu))
    assert studentt_log_prob(np.array(x), np.array(nu)) == pytest.approx(float(ref), abs=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.0, 3.0, 30.0])
def test_studentt_density_integrates_to_one(nu):
    f = lambda x: float(np.exp(studentt_log_prob(np.array(x), np.array(nu))))
    total = integrate.quad(f, -np.inf, np.inf, limit=400)[0]
    assert total == pytest.approx(1.0, abs=1e-6)


def test_studentt_cdf_by_quadrature():
    f = lambda x: float(np.exp(studentt_log_prob(np.array(x), np.array(5.0))))
    ref = 0.5 + integrate.quad(f, 0, 2)[0]
    assert studentt_cdf(2.0, 5.0) == pytest.approx(ref, abs=1e-10)
    assert studentt_cdf(2.0, 5.0) == pytest.approx(0.94903, abs=1e-5)


def test_nonpositive_nu_rejected():
    with pytest.raises(DomainError):
        studentt_log_prob(np.array(1.0), np.array(0.0))


@pytest.mark.parametrize("nu", [0.1, 0.7, 1.0, 4.0, 1e4])
def test_quantile_round_trip(nu):
    u = np.array([1e-12, 1e-6, 0.01, 0.3, 0.5, 0.77, 0.999, 1 - 1e-9])
    x = studentt_quantile(u, nu)
    # compare on the smaller tail for full relative precision
    lower = np.where(u < 0.5, studentt_cdf(x, nu), studentt_cdf(-x, nu))
    q = np.minimum(u, 1 - u)
    assert np.all(np.abs(lower - q) / q < 1e-9)


def test_dx_dnu_matches_quantile_differences():
    u, nu, h = 0.9, 2.0, 1e-6
    x = studentt_quantile(u, nu)
    fd = (studentt_quantile(u, nu + h) - studentt_quantile(u, nu - h)) / (2 * h)
    assert studentt_dx_dnu(x, nu) == pytest.approx(fd, rel=1e-5)


def test_dx_dnu_in_far_tail():
    u, nu, h = 1e-9, 1.3, 1e-6
    x = studentt_quantile(u, nu)
    fd = (studentt_quantile(u, nu + h) - studentt_quantile(u, nu - h)) / (2 * h)
    assert studentt_dx_dnu(x, nu) == pytest.approx(fd, rel=1e-4)


def test_rsample_gradient_flows_to_nu():
    u = np.array([0.2, 0.95])
    val, g = ad.value_and_grad(lambda nu: ad.sum(studentt_rsample(u, nu)), np.array([3.0]))
    fd = (np.sum(studentt_quantile(u, 3.0 + 1e-6)) - np.sum(studentt_quantile(u, 3.0 - 1e-6))) / 2e-6
    assert g[0] == pytest.approx(fd, rel=1e-5)


def test_sample_clips_uniforms():
    x, _ = studentt_sample(1.0, u=np.array([0.0, 1.0]))
    assert np.all(np.isfinite(x))


def test_sample_moments(rng):
    x, _ = studentt_sample(5.0, rng, size=200000)
    assert np.var(x) == pytest.approx(5.0 / 3.0, rel=0.05)


def test_tail_params_floor():
    tp = TailParams.from_nu([1.0, 30.0])
    assert np.allclose(tp.nu, [1.0, 30.0])
    assert np.all(TailParams(np.array([-10.0])).nu > 0.1)
    with pytest.raises(DomainError):
        TailParams.from_nu([0.05])


def test_base_parameter_counts():
    assert BaseDistribution(BaseKind.GAUSSIAN, 3).nu is None
    assert len(BaseDistribution(BaseKind.STUDENT_T_SHARED, 3).nu) == 1
    assert len(BaseDistribution(BaseKind.STUDENT_T_PER_DIM, 3).nu) == 3


def test_base_log_prob_sums_coordinates():
    base = BaseDistribution(BaseKind.STUDENT_T_PER_DIM, 2, TailParams.from_nu([1.0, 4.0]))
    z = np.array([[0.5, -1.0]])
    expected = studentt_log_prob(np.array(0.5), np.array(1.0)) + studentt_log_prob(np.array(-1.0), np.array(4.0))
    assert base.log_prob(z)[0] == pytest.approx(expected)
