"""Variational families, Monte-Carlo ELBO, Adam and the training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .distributions import BaseKind
from .errors import InsufficientDataError, NumericAbort, UsageError
from .flows import DEFAULT_HIDDEN, FlowStack, build_stack, params_to_hex

log = logging.getLogger(__name__)

MAX_BAD_STEPS = 50


class FamilyKind(str, Enum):
    ADVI = "advi"
    TAF = "taf"
    ATAF = "ataf"


BASE_OF = {
    FamilyKind.ADVI: BaseKind.GAUSSIAN,
    FamilyKind.TAF: BaseKind.STUDENT_T_SHARED,
    FamilyKind.ATAF: BaseKind.STUDENT_T_PER_DIM,
}


def parse_family(kind) -> FamilyKind:
    try:
        return FamilyKind(str(kind.value if isinstance(kind, Enum) else kind).lower())
    except ValueError:
        raise UsageError(f"unknown family {kind!r}; expected one of advi, taf, ataf") from None


def make_family(kind, target, *, hidden=DEFAULT_HIDDEN, n_layers: int = 2, seed: int = 0,
                nu_init: float = 2.0) -> FlowStack:
    kind = parse_family(kind)
    return build_stack(target.dim, BASE_OF[kind], target.support, hidden=hidden,
                       n_layers=n_layers, rng=np.random.default_rng(seed), nu_init=nu_init)


# -- estimators --------------------------------------------------------------

def _valid_rows(stack, target, noise, params=None):
    """Rows of ``noise`` whose pushforward is finite and inside the support."""
    with np.errstate(all="ignore"):
        y, log_q = stack.push(noise, params)
        ok = target.in_support(y) & np.isfinite(log_q)
        log_p = np.full(len(noise), -np.inf)
        if ok.any():
            log_p[ok] = target.log_density_fn(y[ok])
    ok &= np.isfinite(log_p)
    return ok, y, log_q, log_p


def log_weights(stack, target, n: int, rng):
    """log pi_bar(x_i) - log q(x_i) for n fresh draws (invalid draws dropped)."""
    noise = stack.base.noise(rng, n)
    ok, _, log_q, log_p = _valid_rows(stack, target, noise)
    if ok.sum() == 0:
        raise InsufficientDataError(f"all {n} draws fell outside the support of target {target.name!r}")
    return (log_p - log_q)[ok]


def _mean_stderr(w):
    return float(np.mean(w)), float(np.std(w, ddof=1) / np.sqrt(len(w))) if len(w) > 1 else 0.0


def _log_mean_exp_stderr(w):
    n = len(w)
    est = float(logsumexp(w) - np.log(n))
    if n < 2:
        return est, 0.0
    # delta method: se(log m) = se(m) / m, with weights rescaled by exp(-est)
    scaled = np.exp(w - est)
    return est, float(np.std(scaled, ddof=1) / np.sqrt(n))


def elbo_estimate(stack, target, n: int, rng):
    if n < 2:
        raise UsageError("ELBO estimate needs at least 2 draws")
    return _mean_stderr(log_weights(stack, target, n, rng))


def log_marginal_likelihood(stack, target, n: int, rng):
    """Importance-weighted log p(y) estimate and its delta-method stderr."""
    if n < 2:
        raise UsageError("marginal likelihood estimate needs at least 2 draws")
    return _log_mean_exp_stderr(log_weights(stack, target, n, rng))


def elbo_and_log_marginal(stack, target, n: int, rng):
    """Both estimates from one shared batch of draws."""
    w = log_weights(stack, target, n, rng)
    return _mean_stderr(w), _log_mean_exp_stderr(w)


def elbo_value_and_grad(stack, target, noise, params=None):
    """Batch ELBO and its gradient w.r.t. every entry of ``params`` on fixed noise.

    Draws whose pushforward overflows or leaves the support are dropped
    before the taped pass. Returns (elbo, grads, n_used).
    """
    params = stack.params if params is None else params
    ok, *_ = _valid_rows(stack, target, noise, params)
    if ok.sum() < 2:
        raise InsufficientDataError(f"fewer than 2 usable draws for target {target.name!r}")
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    y, log_q = stack.push(noise[ok], leaves)
    elbo = ad.mean(target.log_density_fn(y) - log_q)
    tape.backward(elbo)
    grads = {k: tape.grad(v) for k, v in leaves.items()}
    return float(elbo.value), grads, int(ok.sum())


def data_log_likelihood_and_grad(stack, data, params=None):
    """Mean log q(data) and gradient, for density estimation."""
    params = stack.params if params is None else params
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    ll = ad.mean(stack.log_prob(data, leaves))
    tape.backward(ll)
    return float(ll.value), {k: tape.grad(v) for k, v in leaves.items()}


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              ascend: bool = True, lr_scale=None):
    """One bias-corrected Adam update. Ascends by default (ELBO maximization).

    ``lr_scale`` optionally maps parameter names to learning-rate multipliers.
    """
    state.t += 1
    sign = 1.0 if ascend else -1.0
    new = {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, 0.0), dtype=float)
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - beta1**state.t)
        v_hat = v / (1 - beta2**state.t)
        step = lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
        new[k] = p + sign * step * m_hat / (np.sqrt(v_hat) + eps)
    return new, state


def clip_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if not np.isfinite(total):
        return None, total
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 10000
    lr: float = 1e-3
    elbo_samples: int = 100
    eval_samples: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    init_from: str | None = None
    nu_lr_scale: float = 1.0
    schedule: str = "constant"      # or "cosine": anneal to 5% of lr by the last step

    def __post_init__(self):
        if self.steps < 0:
            raise UsageError("steps must be non-negative")
        if self.lr <= 0 or self.eps <= 0 or self.nu_lr_scale <= 0:
            raise UsageError("learning rate and eps must be positive")
        if self.elbo_samples < 2 or self.eval_samples < 2:
            raise UsageError("sample counts must be at least 2")
        if self.schedule not in ("constant", "cosine"):
            raise UsageError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))


@dataclass
class TrainResult:
    family: str
    target: str
    params: dict
    trace: list
    elbo_mean: float
    elbo_stderr: float
    logpy_mean: float
    logpy_stderr: float
    nu_values: list | None
    seed: int
    steps: int
    skipped_steps: int = 0
    wall_time: float = 0.0

    def to_json(self, include_timing: bool = False) -> str:
        blob = asdict(self)
        blob["params"] = params_to_hex(self.params)
        if not include_timing:
            blob.pop("wall_time")
        return json.dumps(blob, indent=1, sort_keys=True)


def _family_of(stack):
    return {v: k for k, v in BASE_OF.items()}[stack.base.kind].value


def evaluate(stack, target, config: TrainConfig, rng):
    (e_mean, e_se), (l_mean, l_se) = elbo_and_log_marginal(stack, target, config.eval_samples, rng)
    return e_mean, e_se, l_mean, l_se


def train(stack: FlowStack, target, config: TrainConfig, progress=None) -> TrainResult:
    """Adam ascent on the Monte-Carlo ELBO; deterministic for a given seed."""
    if config.init_from:
        with open(config.init_from) as fh:
            stack.set_params(FlowStack.from_json(fh.read()).params)
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    trace = []
    bad = skipped = 0
    for step in range(config.steps):
        noise = stack.base.noise(rng, config.elbo_samples)
        try:
            elbo, grads, _ = elbo_value_and_grad(stack, target, noise)
            grads, _ = clip_global_norm(grads, config.clip_norm)
            if grads is None or not np.isfinite(elbo):
                raise FloatingPointError("non-finite gradient")
        except (ad.NumericOverflowError, InsufficientDataError, FloatingPointError) as exc:
            bad += 1
            skipped += 1
            trace.append(float("nan"))
            if bad >= MAX_BAD_STEPS:
                raise NumericAbort(f"{bad} consecutive non-finite steps at step {step}: {exc}",
                                   snapshot=stack.to_json()) from exc
            continue
        bad = 0
        trace.append(elbo)
        new, state = adam_step(stack.params, grads, state, config.lr_at(step), config.beta1,
                               config.beta2, config.eps,
                               lr_scale={FlowStack.NU_KEY: config.nu_lr_scale})
        stack.set_params(new)
        if progress is not None:
            progress(step, elbo)
    e_mean, e_se, l_mean, l_se = evaluate(stack, target, config, rng)
    nu = None if stack.nu is None else [float(v) for v in stack.nu]
    return TrainResult(_family_of(stack), target.name, {k: v.copy() for k, v in stack.params.items()},
                       trace, e_mean, e_se, l_mean, l_se, nu, config.seed, config.steps, skipped,
                       time.perf_counter() - start)


# -- staged initialization --------------------------------------------------------

@dataclass
class StagedInit:
    ataf: FlowStack
    advi: FlowStack
    taf: FlowStack
    advi_result: TrainResult
    taf_result: TrainResult


def copy_flow_weights(src: FlowStack, dst: FlowStack):
    params = dict(dst.params)
    for k, v in src.params.items():
        if k != FlowStack.NU_KEY:
            params[k] = np.array(v, dtype=float)
    dst.set_params(params)


def staged_init(target, config: TrainConfig, *, hidden=DEFAULT_HIDDEN, n_layers=2,
                nu_init: float = 2.0, progress=None) -> StagedInit:
    """Train ADVI, warm-start TAF from its flow, then seed ATAF with TAF's flow
    and a constant nu vector equal to TAF's fitted nu."""
    advi = make_family(FamilyKind.ADVI, target, hidden=hidden, n_layers=n_layers, seed=config.seed)
    advi_res = train(advi, target, config, progress)
    taf = make_family(FamilyKind.TAF, target, hidden=hidden, n_layers=n_layers, seed=config.seed,
                      nu_init=nu_init)
    copy_flow_weights(advi, taf)
    taf_res = train(taf, target, config, progress)
    ataf = make_family(FamilyKind.ATAF, target, hidden=hidden, n_layers=n_layers, seed=config.seed)
    copy_flow_weights(taf, ataf)
    params = dict(ataf.params)
    params[FlowStack.NU_KEY] = np.repeat(taf.params[FlowStack.NU_KEY], target.dim)
    ataf.set_params(params)
    return StagedInit(ataf, advi, taf, advi_res, taf_res)


# -- density estimation --------------------------------------------------------------

@dataclass
class DensityResult:
    family: str
    params: dict
    trace: list
    train_loglik: float
    heldout_loglik: float
    heldout_stderr: float
    nu_values: list | None
    seed: int
    steps: int
    n_train: int
    n_heldout: int

    def to_json(self) -> str:
        blob = asdict(self)
        blob["params"] = params_to_hex(self.params)
        return json.dumps(blob, indent=1, sort_keys=True)


def split_data(data, seed: int, train_fraction: float = 0.8):
    """Seeded shuffle, then the first 80% for training and the rest held out."""
    data = np.asarray(data, dtype=float)
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_fraction * len(data)))
    return data[order[:cut]], data[order[cut:]]


def fit_density(stack: FlowStack, data, config: TrainConfig, batch: int | None = None) -> DensityResult:
    """Maximize mean log q on a training split; report train and held-out mean log q."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] == 0:
        raise UsageError("density data must be an n x d matrix with d >= 1")
    if len(data) < 10:
        raise UsageError(f"density estimation needs at least 10 rows, got {len(data)}")
    if data.shape[1] != stack.dim:
        raise UsageError(f"data has {data.shape[1]} columns but the flow has dimension {stack.dim}")
    train_x, held = split_data(data, config.seed)
    batch = config.elbo_samples if batch is None else batch
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    trace = []
    bad = 0
    for step in range(config.steps):
        rows = train_x if batch >= len(train_x) else train_x[rng.choice(len(train_x), batch, replace=False)]
        try:
            ll, grads = data_log_likelihood_and_grad(stack, rows)
            grads, _ = clip_global_norm(grads, config.clip_norm)
            if grads is None or not np.isfinite(ll):
                raise FloatingPointError("non-finite gradient")
        except (ad.NumericOverflowError, FloatingPointError) as exc:
            bad += 1
            trace.append(float("nan"))
            if bad >= MAX_BAD_STEPS:
                raise NumericAbort(f"{bad} consecutive non-finite steps at step {step}: {exc}",
                                   snapshot=stack.to_json()) from exc
            continue
        bad = 0
        trace.append(ll)
        new, state = adam_step(stack.params, grads, state, config.lr_at(step), config.beta1,
                               config.beta2, config.eps,
                               lr_scale={FlowStack.NU_KEY: config.nu_lr_scale})
        stack.set_params(new)
    train_ll = float(np.mean(stack.log_prob(train_x)))
    held_lp = np.asarray(stack.log_prob(held), dtype=float)
    h_mean, h_se = _mean_stderr(held_lp)
    nu = None if stack.nu is None else [float(v) for v in stack.nu]
    return DensityResult(_family_of(stack), {k: v.copy() for k, v in stack.params.items()}, trace,
                         train_ll, h_mean, h_se, nu, config.seed, config.steps, len(train_x), len(held))
