"""Empirical tail analysis: Hill estimation, tail-class discrimination,
direction-dependent tail indices, isotropy verdicts and KS testing."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .distributions import softplus_inverse
from .errors import InsufficientDataError

EXCEEDANCE_FRACTION = 0.1
CLASS_MARGIN = 2.0          # nats of exceedance log-likelihood
MIN_R2 = 0.95
P_RANGE = (0.02, 8.0)
SPREAD_THRESHOLD = 0.5
NULL_LEVEL = 0.05
NULL_REPLICATES = 40
NULL_K_EXPONENT = 0.4        # the null test uses k = n^0.4, below sqrt(n), to damp body bias

EXPONENTIAL = "exponential-type"
LOGARITHMIC = "logarithmic-type"
UNDECIDED = "undecided"


def default_k(n: int) -> int:
    return max(2, int(np.floor(np.sqrt(n))))


def hill_estimator(samples, k: int | None = None) -> float:
    """Hill estimate from the k largest positive values."""
    x = np.asarray(samples, dtype=float).ravel()
    x = x[x > 0]
    k = default_k(len(x)) if k is None else int(k)
    if k < 2:
        raise InsufficientDataError("Hill estimator needs k >= 2")
    if len(x) <= k:
        raise InsufficientDataError(f"need more than k={k} positive samples, got {len(x)}")
    top = -np.partition(-x, k)[: k + 1]
    top.sort()
    top = top[::-1]
    return float(k / np.sum(np.log(top[:k] / top[k])))


# -- tail class -------------------------------------------------------------------

@dataclass
class TailFit:
    p: float
    alpha: float
    loglik: float
    r2: float


@dataclass
class TailClassVerdict:
    family: str
    p: float
    alpha: float
    r2_exponential: float
    r2_logarithmic: float
    loglik_gap: float       # exponential minus logarithmic, nats
    exponential: TailFit = field(repr=False, default=None)
    logarithmic: TailFit = field(repr=False, default=None)


def _fit_family(g, g_u, log_jac, k):
    """Profile MLE for exceedances with S(t)/S(u) = exp(-alpha (G(t)^p - G(u)^p)).

    ``g`` holds G(t) for the exceedances, ``log_jac`` the summed log G'(t).
    """
    log_g = np.log(g)

    def negll(log_p):
        p = np.exp(log_p)
        with np.errstate(over="ignore", invalid="ignore"):
            d = np.sum(g**p - g_u**p)
        if not np.isfinite(d) or d <= 0:
            return np.inf
        a = k / d
        return -(k * np.log(a * p) + (p - 1) * log_g.sum() + log_jac - k)

    res = optimize.minimize_scalar(negll, bounds=np.log(P_RANGE), method="bounded",
                                   options={"xatol": 1e-6})
    p = float(np.exp(res.x))
    alpha = float(k / np.sum(g**p - g_u**p))
    return p, alpha, float(-res.fun)


def _r2(observed, fitted):
    ss = np.sum((observed - observed.mean()) ** 2)
    return float(1.0 - np.sum((observed - fitted) ** 2) / ss) if ss > 0 else 0.0


def _standardize(x, one_sided=False, sort=True):
    x = np.asarray(x, dtype=float).ravel()
    x = x[np.isfinite(x)]
    med = np.median(x)
    dev = x - med
    scale = np.median(np.abs(dev))
    if not scale > 0:
        scale = np.mean(np.abs(dev))
    if not scale > 0:
        raise InsufficientDataError("samples are degenerate (zero spread)")
    t = dev / scale
    if not one_sided:
        t = np.abs(t)
    return np.sort(t) if sort else t


def _top(x, m):
    """The m + 1 largest values of x, ascending."""
    m = min(m, len(x) - 1)
    return np.sort(np.partition(x, len(x) - m - 1)[len(x) - m - 1:])


def tail_fits(t, fraction=EXCEEDANCE_FRACTION, n=None):
    """Fit both tail families to the top ``fraction`` of the magnitudes ``t``.

    ``n`` is the sample size the fraction refers to (defaults to len(t)).
    """
    n = len(t) if n is None else n
    k = int(np.ceil(fraction * n))
    if k < 10 or len(t) - k - 1 < 0:
        raise InsufficientDataError("too few samples for a tail fit")
    top = _top(t, k)
    u = top[0]
    ex = top[1:]
    if not u > 1:
        raise InsufficientDataError("tail threshold does not exceed the bulk scale")
    p_e, a_e, ll_e = _fit_family(ex, u, 0.0, k)
    log_ex = np.log(ex)
    p_l, a_l, ll_l = _fit_family(log_ex, np.log(u), -log_ex.sum(), k)
    # fit quality against the empirical conditional survival of the exceedances
    emp = np.log((k - np.arange(k)) / (k + 1.0))
    r2_e = _r2(emp, -a_e * (ex**p_e - u**p_e))
    r2_l = _r2(emp, -a_l * (log_ex**p_l - np.log(u) ** p_l))
    return TailFit(p_e, a_e, ll_e, r2_e), TailFit(p_l, a_l, ll_l, r2_l)


def _decide(fe: TailFit, fl: TailFit, margin: float):
    gap = fe.loglik - fl.loglik
    if (fe.r2 < MIN_R2 and fl.r2 < MIN_R2) or abs(gap) < margin:
        return UNDECIDED, gap
    return (EXPONENTIAL if gap > 0 else LOGARITHMIC), gap


def classify_tail(samples, fraction=EXCEEDANCE_FRACTION, margin=CLASS_MARGIN) -> TailClassVerdict:
    """Exponential-type vs logarithmic-type verdict for |X - median|.

    Both families are fitted by maximum likelihood to the exceedances over
    the top ``fraction`` quantile, after scaling by the median absolute
    deviation. The family with the higher likelihood wins when the gap
    exceeds ``margin`` nats.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 1000:
        raise InsufficientDataError("tail classification needs at least 1000 samples")
    fe, fl = tail_fits(_standardize(x, sort=False), fraction)
    family, gap = _decide(fe, fl, margin)
    win = fl if family == LOGARITHMIC else fe
    if family == UNDECIDED:
        win = fe if gap >= 0 else fl
    return TailClassVerdict(family, win.p, win.alpha, fe.r2, fl.r2, gap, fe, fl)


def upper_tail_is_power_law(x, fraction=EXCEEDANCE_FRACTION, margin=0.0):
    """Power-law screen on the upper tail of a 1-D sample."""
    t = _standardize(x, one_sided=True, sort=False)
    # the fraction refers to the full sample; exceedances are the upper ones only
    fe, fl = tail_fits(t[t > 0], fraction, n=len(t))
    return fe.loglik - fl.loglik <= margin, fe, fl


def loglog_r2(x, k):
    """R^2 of log empirical survival against log x over the k largest values."""
    x = np.asarray(x, dtype=float).ravel()
    x = _top(x, k)[::-1][:k]
    x = x[x > 0]
    if len(x) < 3:
        return 0.0
    s = np.arange(1, len(x) + 1)
    r = np.corrcoef(np.log(x), np.log(s))[0, 1]
    return float(r * r) if np.isfinite(r) else 0.0


# -- directional tail parameter function -------------------------------------------

def direction_grid(d: int, rng=None, n_random: int = 128):
    """64 equiangular directions in 2-D; axes +- and random directions above."""
    if d == 2:
        ang = np.arange(64) * (2 * np.pi / 64)
        return np.column_stack([np.cos(ang), np.sin(ang)])
    rng = np.random.default_rng(0) if rng is None else rng
    eye = np.eye(d)
    rand = rng.standard_normal((n_random, d))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([eye, -eye, rand])


def equiangular(m: int):
    ang = np.arange(m) * (2 * np.pi / m)
    return np.column_stack([np.cos(ang), np.sin(ang)])


@dataclass
class TailReport:
    directions: list
    alpha_hat: list          # inf marks a direction that failed the power-law screen
    k: int
    isotropy: str
    spread: float
    null_pvalue: float | None
    mismatch: bool
    loglog_r2: list
    screen_gap: list
    thresholds: dict = field(default_factory=lambda: {
        "spread": SPREAD_THRESHOLD, "null_level": NULL_LEVEL, "null_replicates": NULL_REPLICATES,
        "null_k_exponent": NULL_K_EXPONENT,
        "exceedance_fraction": EXCEEDANCE_FRACTION, "mismatch_margin": CLASS_MARGIN})

    @property
    def finite(self):
        a = np.asarray(self.alpha_hat, dtype=float)
        return a[np.isfinite(a)]

    def to_json(self) -> str:
        blob = asdict(self)
        blob["alpha_hat"] = [a if np.isfinite(a) else "inf" for a in self.alpha_hat]
        return json.dumps(blob, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction", "angle", "alpha_hat"])
        for i, (v, a) in enumerate(zip(self.directions, self.alpha_hat)):
            angle = float(np.arctan2(v[1], v[0])) if len(v) == 2 else ""
            w.writerow([i, angle, a if np.isfinite(a) else "inf"])
        return buf.getvalue()


def _directional_alphas(samples, directions, k):
    alphas, r2s, gaps = [], [], []
    for v in directions:
        proj = samples @ v
        is_pl, fe, fl = upper_tail_is_power_law(proj)
        alphas.append(hill_estimator(proj, k) if is_pl else float("inf"))
        r2s.append(loglog_r2(proj, k))
        gaps.append(fe.loglik - fl.loglik)
    return np.asarray(alphas), r2s, np.asarray(gaps)


def _spread(alphas):
    fin = alphas[np.isfinite(alphas)]
    return float(fin.max() - fin.min()) if len(fin) else 0.0


def tail_parameter_function(samples, directions=None, k=None, *, null_replicates=NULL_REPLICATES,
                            seed: int = 0) -> TailReport:
    """Per-direction Hill estimates of <v, X> and an isotropy verdict.

    A direction whose upper tail is better described by an exponential-type
    law than by a logarithmic-type one gets alpha = inf.  The verdict is
    anisotropic when a clearly exponential-type direction and a clearly
    power-law one coexist, or when the spread of finite estimates exceeds
    the threshold and is extreme under a simulated isotropic null (product
    of Student-t with the median index, Hill at k = n^0.4).
    """
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    directions = direction_grid(d) if directions is None else np.asarray(directions, dtype=float)
    if len(directions) < 2:
        raise ValueError("need at least two directions")
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("directions must be unit vectors")
    k = default_k(n) if k is None else int(k)
    alphas, r2s, gaps = _directional_alphas(samples, directions, k)
    finite = np.isfinite(alphas)
    # only a clear exponential-type direction next to a clear power-law one counts
    mismatch = bool((gaps > CLASS_MARGIN).any() and (gaps < -CLASS_MARGIN).any())
    spread = _spread(alphas)
    pvalue = None
    if mismatch:
        verdict = "anisotropic"
    elif not finite.any() or finite.sum() < 2 or spread <= SPREAD_THRESHOLD:
        verdict = "isotropic"
    else:
        # the spread is recomputed at a smaller k on the power-law directions
        k_null = max(2, int(np.floor(n**NULL_K_EXPONENT)))
        fin_dirs = directions[finite]
        a_null = np.array([hill_estimator(samples @ v, k_null) for v in fin_dirs])
        pvalue = isotropic_null_pvalue(_spread(a_null), float(np.median(a_null)), n, d, fin_dirs, k_null,
                                       null_replicates, seed)
        verdict = "anisotropic" if pvalue < NULL_LEVEL else "isotropic"
    return TailReport(directions.tolist(), [float(a) for a in alphas], k, verdict, spread, pvalue,
                      mismatch, r2s, gaps.tolist())


def isotropic_null_pvalue(observed_spread, alpha, n, d, directions, k, replicates, seed):
    """Fraction of simulated isotropic samples whose Hill spread reaches the observed one."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(replicates):
        sim = rng.standard_t(alpha, size=(n, d))
        proj = sim @ directions.T
        est = np.array([hill_estimator(proj[:, j], k) for j in range(proj.shape[1])])
        hits += _spread(est) >= observed_spread
    return (hits + 1) / (replicates + 1)


# -- Kolmogorov-Smirnov ---------------------------------------------------------------

def kolmogorov_sf(lam, terms: int = 100):
    """P(K > lam) for the Kolmogorov distribution, 2 sum (-1)^(j-1) exp(-2 j^2 lam^2)."""
    lam = np.asarray(lam, dtype=float)
    j = np.arange(1, terms + 1)
    series = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * np.multiply.outer(lam**2, j**2)), axis=-1)
    return np.where(lam <= 0.2, 1.0, np.clip(series, 0.0, 1.0))


def ks_test(samples, cdf):
    """One-sample KS statistic and asymptotic p-value (sqrt(n) scaling)."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(x)
    if n < 1:
        raise InsufficientDataError("KS test needs at least one sample")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
    return d, float(kolmogorov_sf(np.sqrt(n) * d))


# -- radial cone estimator ---------------------------------------------------------------

def cone_hill(samples, angle, half_width=0.05, k=None):
    """Hill estimate of the radius restricted to a narrow cone around ``angle``."""
    samples = np.asarray(samples, dtype=float)
    theta = np.arctan2(samples[:, 1], samples[:, 0])
    inside = np.abs(np.angle(np.exp(1j * (theta - angle)))) < half_width
    r = np.hypot(samples[inside, 0], samples[inside, 1])
    return hill_estimator(r, k)


def conditional_quantile_grid(log_density, lo: float, hi: float, n: int, grid: int = 400001):
    """Deterministic quantile grid F^-1((i - 0.5)/n) of a 1-D unnormalized density.

    The density is tabulated on ``grid`` points over [lo, hi], integrated by
    the trapezoid rule and inverted by linear interpolation.
    """
    u = np.linspace(lo, hi, grid)
    lf = np.asarray(log_density(u), dtype=float)
    lf = np.where(np.isfinite(lf), lf, -np.inf)
    f = np.exp(lf - lf.max())
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(u))])
    cum /= cum[-1]
    return np.interp((np.arange(n) + 0.5) / n, cum, u)


# -- closure battery -----------------------------------------------------------------

@dataclass
class ClosureCheck:
    name: str
    passed: bool
    detail: dict


@dataclass
class ClosureReport:
    seed: int
    n: int
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n": self.n, "passed": self.passed,
                "checks": {c.name: {"passed": c.passed, **c.detail} for c in self.checks}}


RANDOM_OUTPUT_SCALE = 0.1


def _random_stack(base_kind, rng, hidden, nu=None, output_scale=RANDOM_OUTPUT_SCALE):
    """IAF stack with Kaiming hidden layers and shrunken random output layers."""
    from .flows import build_stack
    stack = build_stack(2, base_kind, hidden=hidden, rng=rng, zero_output=False)
    for key in stack.params:
        if "W_" in key or "b_" in key:
            stack.params[key] = stack.params[key] * output_scale
    if nu is not None:
        stack.params[stack.NU_KEY] = np.full_like(stack.params[stack.NU_KEY],
                                                  float(softplus_inverse(nu - stack.base.tails.floor)))
        stack.sync_tails()
    return stack


def closure_checks(seed: int = 0, n: int = 10**6, *, hidden=(32, 32), identity: bool = False,
                   output_scale: float = RANDOM_OUTPUT_SCALE,
                   powers=(2, 3, 5), sum_nus=(1.0, 2.0), iso_nu: float = 1.5,
                   iso_directions: int = 16) -> ClosureReport:
    """Sampling checks of how flows act on tail classes.

    (a) Gaussian base through a random clamped IAF stack stays exponential-type.
    (b) Cauchy base through the same stack stays logarithmic-type with index near 1.
    (c) Monomials of Gaussian draws are never logarithmic-type.
    (d) An isotropic Student-t product through a random stack stays isotropic.
    (e) A sum of independent Student-t variables takes the smaller index.
    ``identity=True`` replaces the random stacks by identity maps.
    """
    from .distributions import BaseKind
    rng = np.random.default_rng(seed)
    checks = []

    def pushed(base_kind, nu=None):
        stack_rng = np.random.default_rng(seed + 1)
        stack = _random_stack(base_kind, stack_rng, hidden, nu, output_scale)
        if identity:
            for key in stack.params:
                if key != stack.NU_KEY and ("W_" in key or "b_" in key):
                    stack.params[key] = np.zeros_like(stack.params[key])
        y, _ = stack.sample(rng, n)
        return y

    y = pushed(BaseKind.GAUSSIAN)
    verdicts = [classify_tail(y[:, j]) for j in range(2)]
    checks.append(ClosureCheck("a_gaussian_stays_exponential",
                               all(v.family == EXPONENTIAL for v in verdicts),
                               {"families": [v.family for v in verdicts], "p": [v.p for v in verdicts]}))

    y = pushed(BaseKind.STUDENT_T_PER_DIM, nu=1.0)
    verdicts = [classify_tail(y[:, j]) for j in range(2)]
    hills = [hill_estimator(np.abs(y[:, j] - np.median(y[:, j]))) for j in range(2)]
    checks.append(ClosureCheck("b_cauchy_stays_logarithmic",
                               all(v.family == LOGARITHMIC for v in verdicts)
                               and all(0.8 <= h <= 1.2 for h in hills),
                               {"families": [v.family for v in verdicts], "alpha_hat": hills}))

    z = rng.standard_normal(n)
    verdicts = {int(k): classify_tail(z**k) for k in powers}
    checks.append(ClosureCheck("c_monomials_not_logarithmic",
                               all(v.family != LOGARITHMIC for v in verdicts.values()),
                               {"families": {k: v.family for k, v in verdicts.items()},
                                "p": {k: v.p for k, v in verdicts.items()}}))

    y = pushed(BaseKind.STUDENT_T_PER_DIM, nu=iso_nu)
    rep = tail_parameter_function(y, equiangular(iso_directions), null_replicates=0)
    alphas = np.asarray(rep.alpha_hat)
    spread = _spread(alphas)
    checks.append(ClosureCheck("d_isotropic_base_stays_isotropic",
                               bool(np.all(np.isfinite(alphas)) and spread < 0.3),
                               {"spread": spread, "alpha_hat": rep.alpha_hat}))

    s = rng.standard_t(sum_nus[0], n) + rng.standard_t(sum_nus[1], n)
    h = hill_estimator(np.abs(s))
    checks.append(ClosureCheck("e_sum_takes_min_index", 0.8 <= h <= 1.2,
                               {"alpha_hat": h, "nus": list(sum_nus)}))
    return ClosureReport(seed, n, checks)
