"""Gaussian and Student-t densities, samplers and degrees-of-freedom gradients.

Log-densities accept :class:`~ataflow.autodiff.Var` arguments so they can sit
inside an ELBO graph.  Student-t draws go through the inverse CDF of a fixed
uniform stream; the derivative of a draw with respect to nu is obtained by
implicit differentiation of the CDF.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import special

from . import autodiff as ad
from .errors import DomainError

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
NU_FLOOR = 0.1
QUANTILE_TOL = 1e-12
U_CLIP = 1e-12


def normal_log_prob(x):
    return -0.5 * ad.square(x) - HALF_LOG_2PI


def _check_nu(nu):
    if np.any(np.asarray(ad.value_of(nu)) <= 0):
        raise DomainError("Student-t degrees of freedom must be positive")


def studentt_log_prob(x, nu):
    _check_nu(nu)
    half = 0.5 * (nu + 1.0)
    norm = ad.lgamma(half) - ad.lgamma(0.5 * nu) - 0.5 * ad.log(np.pi * nu)
    return norm - half * ad.log(1.0 + ad.square(x) / nu)


def studentt_pdf(x, nu):
    """Plain numpy density (no tape)."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    _check_nu(nu)
    half = 0.5 * (nu + 1.0)
    norm = special.gammaln(half) - special.gammaln(0.5 * nu) - 0.5 * np.log(np.pi * nu)
    return np.exp(norm - half * np.log1p(x * x / nu))


def studentt_cdf(x, nu):
    _check_nu(nu)
    return special.stdtr(nu, x)


def studentt_quantile(u, nu, tol: float = QUANTILE_TOL, max_iter: int = 200):
    """Inverse CDF by safeguarded Newton iteration inside a bisection bracket.

    Works on the lower tail q = min(u, 1-u) in log space so that extreme
    quantiles keep full relative precision.
    """
    _check_nu(nu)
    u, nu = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(nu, dtype=float))
    q = np.minimum(u, 1.0 - u)
    sign = np.where(u < 0.5, -1.0, 1.0)
    log_q = np.log(q)
    # x >= 0 solves log F(-x) = log q
    x = np.abs(special.stdtrit(nu, q))
    x = np.where(np.isfinite(x), x, 1.0)
    lo = np.zeros_like(x)
    hi = np.maximum(2.0 * x, 1.0)
    with np.errstate(all="ignore"):
        for _ in range(4000):
            short = (special.stdtr(nu, -hi) > q) & np.isfinite(hi)
            if not short.any():
                break
            hi = np.where(short, hi * 2.0, hi)
        x, lo, hi, nu_f, lq = (a.ravel().copy() for a in (x, lo, hi, nu, log_q))
        active = np.flatnonzero(q.ravel() < 0.5)
        for _ in range(max_iter):
            if active.size == 0:
                break
            xa, la, ha, na = x[active], lo[active], hi[active], nu_f[active]
            cdf = special.stdtr(na, -xa)
            resid = np.log(cdf) - lq[active]
            # F(-x) decreasing in x: resid > 0 means x too small
            la = np.where(resid > 0, np.maximum(la, xa), la)
            ha = np.where(resid < 0, np.minimum(ha, xa), ha)
            new = xa + resid * cdf / studentt_pdf(xa, na)
            bad = ~np.isfinite(new) | (new <= la) | (new >= ha)
            new = np.where(bad, 0.5 * (la + ha), new)
            conv = (np.abs(new - xa) <= tol * np.maximum(1.0, np.abs(xa))) | (
                ha - la <= tol * np.maximum(1.0, ha))
            x[active], lo[active], hi[active] = new, la, ha
            active = active[~conv]
        x = x.reshape(q.shape)
    return np.where(q >= 0.5, 0.0, sign * x)


def studentt_dcdf_dnu(x, nu):
    """Central finite difference of the CDF in nu, step 1e-4*max(1, nu)."""
    x, nu = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(nu, dtype=float))
    h = 1e-4 * np.maximum(1.0, nu)
    ax = -np.abs(x)
    d = (special.stdtr(nu + h, ax) - special.stdtr(nu - h, ax)) / (2.0 * h)
    # F(x) = 1 - F(-x) for x > 0
    return np.where(x > 0, -d, d)


def studentt_dx_dnu(x, nu):
    """Implicit reparameterization gradient dx/dnu = -(dF/dnu) / pdf."""
    return -studentt_dcdf_dnu(x, nu) / studentt_pdf(x, nu)


def studentt_sample(nu, rng=None, size=None, u=None):
    """Draw Student-t variates by inverse CDF.

    Returns ``(x, dx_dnu)``; pass ``u`` to replay a fixed noise path.
    """
    if u is None:
        u = rng.uniform(size=size if size is not None else np.shape(nu))
    u = np.clip(u, U_CLIP, 1.0 - U_CLIP)
    x = studentt_quantile(u, nu)
    return x, studentt_dx_dnu(x, nu)


def studentt_rsample(u, nu):
    """Differentiable draw from fixed uniforms ``u``; ``nu`` may be a Var."""
    nu_val = np.asarray(ad.value_of(nu), dtype=float)
    x, dx = studentt_sample(nu_val, u=u)
    return ad.primitive("studentt_sample", x, [(nu, dx)])


def gaussian_sample(rng, size=None):
    return rng.standard_normal(size)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class TailParams:
    raw: np.ndarray
    floor: float = NU_FLOOR

    @property
    def nu(self) -> np.ndarray:
        return self.floor + ad._softplus(np.asarray(self.raw, dtype=float))

    @classmethod
    def from_nu(cls, nu, floor: float = NU_FLOOR):
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        if np.any(nu <= floor):
            raise DomainError(f"nu must exceed the floor {floor}")
        return cls(softplus_inverse(nu - floor), floor)


def nu_from_raw(raw, floor: float = NU_FLOOR):
    return floor + ad.softplus(raw)


class BaseKind(str, Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T_SHARED = "studentt_shared"
    STUDENT_T_PER_DIM = "studentt_per_dim"


@dataclass
class BaseDistribution:
    kind: BaseKind
    dim: int
    tails: TailParams | None = field(default=None)

    def __post_init__(self):
        self.kind = BaseKind(self.kind)
        if self.kind is BaseKind.GAUSSIAN:
            self.tails = None
        elif self.tails is None:
            n = 1 if self.kind is BaseKind.STUDENT_T_SHARED else self.dim
            self.tails = TailParams.from_nu(np.full(n, 2.0))
        expected = {BaseKind.STUDENT_T_SHARED: 1, BaseKind.STUDENT_T_PER_DIM: self.dim}
        if self.tails is not None and len(self.tails.raw) != expected[self.kind]:
            raise DomainError(f"{self.kind.value} base needs {expected[self.kind]} tail parameters")

    @property
    def nu(self):
        return None if self.tails is None else self.tails.nu

    def noise(self, rng, n: int) -> np.ndarray:
        """Raw noise for ``n`` draws: normals for Gaussian, uniforms otherwise."""
        if self.kind is BaseKind.GAUSSIAN:
            return gaussian_sample(rng, (n, self.dim))
        return rng.uniform(size=(n, self.dim))

    def draw(self, noise, nu=None):
        """Map raw noise to base draws; ``nu`` may be a Var (defaults to current)."""
        if self.kind is BaseKind.GAUSSIAN:
            return noise
        nu = self.nu if nu is None else nu
        return studentt_rsample(noise, nu)

    def log_prob(self, z, nu=None):
        """Per-row log-density of base draws ``z`` (n x d)."""
        if self.kind is BaseKind.GAUSSIAN:
            return ad.sum(normal_log_prob(z), axis=-1)
        nu = self.nu if nu is None else nu
        return ad.sum(studentt_log_prob(z, nu), axis=-1)
