"""Target log-densities for VI experiments, with analytic references."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

from . import autodiff as ad
from .distributions import HALF_LOG_2PI, normal_log_prob, studentt_log_prob
from .errors import DomainError
from .flows import SupportKind

RUBIN_Y = (28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0)
RUBIN_SIGMA = (15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0)


@dataclass
class TargetModel:
    """Unnormalized log-density over R^d with per-coordinate support kinds.

    ``log_density_fn`` maps an (n, d) array or Var to n log-densities.
    ``log_normalizer`` is log of the integral of exp(log_density), when known.
    """

    name: str
    dim: int
    log_density_fn: Callable
    support: tuple
    analytic_reference: object = None
    sampler: Callable | None = None
    log_normalizer: float | None = None
    coord_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support = tuple(int(SupportKind(k)) for k in self.support)
        if len(self.support) != self.dim:
            raise DomainError(f"{self.name}: {len(self.support)} support kinds for dim {self.dim}")
        if not self.coord_names:
            self.coord_names = tuple(f"x{i}" for i in range(self.dim))

    def in_support(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(ad.value_of(y), dtype=float))
        ok = np.all(np.isfinite(y), axis=1)
        for j, kind in enumerate(self.support):
            if kind == SupportKind.POSITIVE:
                ok &= y[:, j] > 0
            elif kind == SupportKind.UNIT:
                ok &= (y[:, j] > 0) & (y[:, j] < 1)
        return ok

    def log_density(self, y):
        value = np.asarray(ad.value_of(y), dtype=float)
        single = value.ndim == 1
        if single:
            y = y[None, :] if isinstance(y, ad.Var) else value[None, :]
        bad = ~self.in_support(value)
        if bad.any():
            row = int(np.argmax(bad))
            raise DomainError(f"{self.name}: point {np.atleast_2d(value)[row].tolist()} outside support")
        out = self.log_density_fn(y)
        return out[0] if single else out

    def sample(self, rng, n: int) -> np.ndarray:
        if self.sampler is None:
            raise NotImplementedError(f"{self.name} has no exact sampler")
        return self.sampler(rng, n)


def _col(y, j):
    return y[:, j]


# -- Cauchy ------------------------------------------------------------------

@dataclass(frozen=True)
class CauchyReference:
    def cdf(self, x):
        return 0.5 + np.arctan(x) / np.pi

    def log_pdf(self, x):
        return -np.log(np.pi) - np.log1p(np.square(x))


def cauchy_target() -> TargetModel:
    def logp(y):
        x = _col(y, 0)
        return -ad.log(1.0 + ad.square(x))
    return TargetModel("cauchy", 1, logp, (SupportKind.IDENTITY,), CauchyReference(),
                       sampler=lambda rng, n: rng.standard_cauchy((n, 1)),
                       log_normalizer=float(np.log(np.pi)))


# -- anisotropic product -------------------------------------------------------

def aniso_product_target() -> TargetModel:
    """StudentT(1) along coordinate 0 times N(0, 1) along coordinate 1."""
    def logp(y):
        return studentt_log_prob(_col(y, 0), 1.0) + normal_log_prob(_col(y, 1))

    def sampler(rng, n):
        return np.column_stack([rng.standard_cauchy(n), rng.standard_normal(n)])
    return TargetModel("aniso_product", 2, logp, (0, 0), None, sampler, 0.0, ("fat", "gauss"))


# -- conjugate Bayesian linear regression --------------------------------------

@dataclass
class BlrPosterior:
    a_n: float
    b_n: float
    mu_n: np.ndarray
    sigma_n: np.ndarray      # covariance factor (X'X + I)^-1
    precision_n: np.ndarray  # X'X + I
    log_marginal: float

    def sample(self, rng, n):
        """Joint draws of (beta, sigma^2)."""
        s2 = stats.invgamma(self.a_n, scale=self.b_n).rvs(n, random_state=rng)
        chol = np.linalg.cholesky(self.sigma_n)
        beta = self.mu_n + (rng.standard_normal((n, len(self.mu_n))) @ chol.T) * np.sqrt(s2)[:, None]
        return np.column_stack([beta, s2])

    def sigma2_given_beta(self, beta):
        """Inverse-gamma law of sigma^2 conditional on a fixed beta."""
        diff = np.atleast_1d(beta) - self.mu_n
        p = len(self.mu_n)
        return stats.invgamma(self.a_n + 0.5 * p, scale=self.b_n + 0.5 * diff @ self.precision_n @ diff)

    def beta_given_sigma2(self, sigma2):
        return stats.multivariate_normal(self.mu_n, sigma2 * self.sigma_n)


def blr_posterior(X, y, a0, b0) -> BlrPosterior:
    X = np.atleast_2d(np.asarray(X, dtype=float)).reshape(len(y), -1) if len(y) else np.zeros((0, 1))
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    prec = X.T @ X + np.eye(p)
    cov = np.linalg.inv(prec)
    mu = cov @ (X.T @ y)
    a_n = a0 + 0.5 * n
    b_n = b0 + 0.5 * (y @ y - mu @ prec @ mu)
    _, logdet = np.linalg.slogdet(prec)
    log_marg = (-0.5 * n * np.log(2 * np.pi) - 0.5 * logdet + a0 * np.log(b0) - a_n * np.log(b_n)
                + special.gammaln(a_n) - special.gammaln(a0))
    return BlrPosterior(a_n, b_n, mu, cov, prec, float(log_marg))


def blr_conjugate(X, y, a0: float = 1.0, b0: float = 1.0):
    """Joint log p(beta, sigma^2, y | X) with the normal/inverse-gamma prior."""
    if a0 <= 0 or b0 <= 0:
        raise DomainError("inverse-gamma hyperparameters must be positive")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), 1) if len(y) else np.zeros((0, 1))
    n = len(y)
    xtx, xty, yty = float(X[:, 0] @ X[:, 0]), float(X[:, 0] @ y), float(y @ y)
    const = a0 * np.log(b0) - special.gammaln(a0) - (n + 1) * HALF_LOG_2PI

    def logp(v):
        beta, s2 = _col(v, 0), _col(v, 1)
        sq = yty - 2.0 * beta * xty + ad.square(beta) * xtx + ad.square(beta)
        return const - (a0 + 1.0 + 0.5 * (n + 1)) * ad.log(s2) - (b0 + 0.5 * sq) / s2

    post = blr_posterior(X, y, a0, b0)
    model = TargetModel("blr_conjugate", 2, logp, (SupportKind.IDENTITY, SupportKind.POSITIVE), post,
                        sampler=post.sample, log_normalizer=post.log_marginal,
                        coord_names=("beta", "sigma2"))
    return model, post


def blr_dataset(n: int = 10, slope: float = 2.0, noise: float = 1.0, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 1))
    return X, slope * X[:, 0] + noise * rng.standard_normal(n)


# -- eight schools --------------------------------------------------------------

def eight_schools(y=RUBIN_Y, sigma=RUBIN_SIGMA) -> TargetModel:
    """Centered eight-schools model with a HalfCauchy(0, 5) prior on tau.

    Coordinates: (tau, mu, theta_1..theta_8); tau has positive support.
    """
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if y.shape != (8,) or sigma.shape != (8,):
        raise DomainError("eight schools needs 8 scores and 8 standard errors")
    if np.any(sigma <= 0):
        raise DomainError("standard errors must be positive")
    lik_const = float(np.sum(-np.log(sigma)) - 8 * HALF_LOG_2PI)

    def logp(v):
        tau, mu = _col(v, 0), _col(v, 1)
        theta = v[:, 2:]
        lp = np.log(2.0 / (5.0 * np.pi)) - ad.log(1.0 + ad.square(tau / 5.0))
        lp = lp + normal_log_prob(mu / 5.0) - np.log(5.0)
        z = (theta - mu.reshape(-1, 1)) / tau.reshape(-1, 1)
        lp = lp + ad.sum(normal_log_prob(z), axis=1) - 8.0 * ad.log(tau)
        lp = lp + ad.sum(-0.5 * ad.square((theta - y) / sigma), axis=1) + lik_const
        return lp

    names = ("tau", "mu") + tuple(f"theta{i + 1}" for i in range(8))
    return TargetModel("eight_schools", 10, logp, (SupportKind.POSITIVE,) + (0,) * 9,
                       coord_names=names, extra={"y": y.tolist(), "sigma": sigma.tolist()})


# -- radial anisotropic law -------------------------------------------------------

def radial_alpha(theta):
    return 2.0 + np.cos(2.0 * np.asarray(theta, dtype=float))


def radial_aniso_density(r, theta):
    """Log-density per unit area of the radial law with Pareto survival
    P(R > r | theta) = r^-alpha(theta) on r > 1, theta uniform."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 1):
        raise DomainError("radial density is defined for r > 1 only")
    a = radial_alpha(theta)
    return np.log(a / (2 * np.pi)) - (a + 2.0) * np.log(r)


def radial_aniso_sample(rng, n):
    theta = rng.uniform(0.0, 2 * np.pi, n)
    r = rng.uniform(size=n) ** (-1.0 / radial_alpha(theta))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def spiral_transform(samples):
    """(r, theta) -> (r, r + theta) in polar coordinates."""
    samples = np.asarray(samples, dtype=float)
    r = np.hypot(samples[:, 0], samples[:, 1])
    theta = np.arctan2(samples[:, 1], samples[:, 0]) + r
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


# -- normal-normal ----------------------------------------------------------------

@dataclass(frozen=True)
class NormalPosterior:
    mean: float
    var: float
    log_marginal: float

    def cdf(self, x):
        return stats.norm(self.mean, np.sqrt(self.var)).cdf(x)


def normal_normal(y, sigma_lik: float = 1.0, mu0: float = 0.0, sigma0: float = 1.0) -> TargetModel:
    if sigma_lik <= 0 or sigma0 <= 0:
        raise DomainError("scales must be positive")
    y = np.asarray(y, dtype=float)
    n = len(y)
    prec = 1.0 / sigma0**2 + n / sigma_lik**2
    mean = (mu0 / sigma0**2 + y.sum() / sigma_lik**2) / prec
    var = 1.0 / prec

    def logp(v):
        x = _col(v, 0)
        lp = normal_log_prob((x - mu0) / sigma0) - np.log(sigma0)
        sq = float(y @ y) - 2.0 * x * float(y.sum()) + n * ad.square(x)
        return lp - 0.5 * sq / sigma_lik**2 - n * (HALF_LOG_2PI + np.log(sigma_lik))

    # log p(y) = log joint - log posterior, at the posterior mean
    log_joint = float(logp(np.array([[mean]]))[0])
    log_marg = log_joint - (-HALF_LOG_2PI - 0.5 * np.log(var))
    ref = NormalPosterior(float(mean), float(var), float(log_marg))
    return TargetModel("normal_normal", 1, logp, (0,), ref,
                       sampler=lambda rng, m: mean + np.sqrt(var) * rng.standard_normal((m, 1)),
                       log_normalizer=ref.log_marginal)


def gaussian_target(mean=0.0, sd=1.0, log_scale: float = 0.0) -> TargetModel:
    """N(mean, sd^2) in one dimension, with density multiplied by exp(log_scale)."""
    def logp(v):
        return normal_log_prob((_col(v, 0) - mean) / sd) - np.log(sd) + log_scale
    return TargetModel("gaussian", 1, logp, (0,),
                       sampler=lambda rng, n: mean + sd * rng.standard_normal((n, 1)),
                       log_normalizer=log_scale)


def standard_normal_target(dim: int = 2) -> TargetModel:
    """Spherical N(0, I_d), normalized."""
    def logp(v):
        return ad.sum(normal_log_prob(v), axis=1)
    return TargetModel("gaussian", dim, logp, (0,) * dim,
                       sampler=lambda rng, n: rng.standard_normal((n, dim)), log_normalizer=0.0)


# -- non-conjugate regression stand-in ---------------------------------------------

def synthetic_blr_nonconjugate(n: int = 500, p: int = 8, rng=None) -> TargetModel:
    """Regression with StudentT(3, 8, 10) intercept, HalfStudentT(3, 0, 10) noise
    scale and N(0, 1) coefficients, on synthetic standardized covariates.

    Coordinates: (alpha, sigma, beta_1..beta_p); sigma has positive support.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    X = rng.standard_normal((n, p))
    X = (X - X.mean(0)) / X.std(0)
    beta_true = rng.standard_normal(p)
    y = 8.0 + X @ beta_true + rng.standard_normal(n)
    log10 = np.log(10.0)

    def logp(v):
        alpha, sig = _col(v, 0), _col(v, 1)
        beta = v[:, 2:]
        lp = studentt_log_prob((alpha - 8.0) / 10.0, 3.0) - log10
        lp = lp + np.log(2.0) + studentt_log_prob(sig / 10.0, 3.0) - log10
        lp = lp + ad.sum(normal_log_prob(beta), axis=1)
        resid = (y - ad.matmul(beta, X.T) - alpha.reshape(-1, 1)) / sig.reshape(-1, 1)
        lp = lp + ad.sum(normal_log_prob(resid), axis=1) - n * ad.log(sig)
        return lp

    names = ("alpha", "sigma") + tuple(f"beta{i + 1}" for i in range(p))
    return TargetModel("synthetic_blr", p + 2, logp, (0, SupportKind.POSITIVE) + (0,) * p,
                       coord_names=names, extra={"X": X, "y": y})


TARGETS = {
    "cauchy": cauchy_target,
    "aniso_product": aniso_product_target,
    "eight_schools": eight_schools,
    "normal_normal": lambda: normal_normal(np.random.default_rng(0).normal(1.0, 1.0, 10)),
    "blr": lambda: blr_conjugate(*blr_dataset())[0],
    "synthetic_blr": synthetic_blr_nonconjugate,
    "gaussian": standard_normal_target,
}
