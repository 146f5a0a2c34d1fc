"""Inverse autoregressive flows with masked dense conditioners.

Parameters live in a flat ``dict[str, ndarray]`` owned by :class:`FlowStack`.
Every evaluation function takes a parameter mapping explicitly, so the same
code runs on plain arrays (sampling, diagnostics) or on tape variables
(training).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from .distributions import BaseDistribution, BaseKind, TailParams
from .errors import DomainError

DEFAULT_CLAMP = 5.0
DEFAULT_HIDDEN = (32, 32)


def made_masks(ordering, hidden):
    """Binary masks (input->h1, h1->h2, h2->output) for an autoregressive MLP.

    ``ordering[i]`` is the coordinate placed at position i; output j may only
    see inputs that come strictly earlier in the ordering.
    """
    ordering = np.asarray(ordering)
    d = len(ordering)
    degree = np.empty(d, dtype=int)
    degree[ordering] = np.arange(d)
    masks = []
    prev = degree
    hidden_degrees = []
    for width in hidden:
        deg = np.arange(width) % (d - 1) if d > 1 else np.full(width, -1)
        hidden_degrees.append(deg)
        masks.append((prev[:, None] <= deg[None, :]).astype(float))
        prev = deg
    masks.append((prev[:, None] < degree[None, :]).astype(float))
    return masks


@dataclass
class MaskedConditioner:
    dim: int
    ordering: np.ndarray
    hidden: tuple = DEFAULT_HIDDEN

    def __post_init__(self):
        self.ordering = np.asarray(self.ordering, dtype=int)
        self.masks = made_masks(self.ordering, self.hidden)

    def init_params(self, rng, prefix: str, zero_output: bool = True) -> dict:
        """Uniform(+-1/sqrt(fan_in)) weights; the output layer optionally zeroed."""
        params = {}
        sizes = (self.dim, *self.hidden)
        for i in range(len(self.hidden)):
            bound = 1.0 / np.sqrt(sizes[i])
            params[f"{prefix}W{i}"] = rng.uniform(-bound, bound, (sizes[i], sizes[i + 1]))
            params[f"{prefix}b{i}"] = rng.uniform(-bound, bound, sizes[i + 1])
        bound = 1.0 / np.sqrt(sizes[-1])
        for name in ("mu", "scale"):
            if zero_output:
                params[f"{prefix}W_{name}"] = np.zeros((sizes[-1], self.dim))
                params[f"{prefix}b_{name}"] = np.zeros(self.dim)
            else:
                params[f"{prefix}W_{name}"] = rng.uniform(-bound, bound, (sizes[-1], self.dim))
                params[f"{prefix}b_{name}"] = rng.uniform(-bound, bound, self.dim)
        return params

    def __call__(self, z, p, prefix: str):
        h = z
        for i in range(len(self.hidden)):
            h = ad.elu(ad.matmul(h, p[f"{prefix}W{i}"] * self.masks[i]) + p[f"{prefix}b{i}"])
        out_mask = self.masks[-1]
        mu = ad.matmul(h, p[f"{prefix}W_mu"] * out_mask) + p[f"{prefix}b_mu"]
        lam = ad.matmul(h, p[f"{prefix}W_scale"] * out_mask) + p[f"{prefix}b_scale"]
        return mu, lam


@dataclass
class IafLayer:
    conditioner: MaskedConditioner
    prefix: str
    clamp: float = DEFAULT_CLAMP

    @property
    def ordering(self):
        return self.conditioner.ordering

    @property
    def dim(self):
        return self.conditioner.dim

    def shift_and_log_scale(self, z, p):
        mu, lam = self.conditioner(z, p, self.prefix)
        return mu, self.clamp * ad.tanh(lam / self.clamp)

    def forward(self, z, p):
        """x = z * exp(log_scale(z)) + shift(z); returns (x, per-row log det)."""
        mu, log_scale = self.shift_and_log_scale(z, p)
        return z * ad.exp(log_scale) + mu, ad.sum(log_scale, axis=-1)

    def inverse(self, x, p):
        """Solve for z one ordering position per sweep (d sweeps in total).

        Position j of the iterate is exact after j+1 sweeps, so the final
        iterate and the log-scale from the last sweep are both exact.
        """
        z = x
        log_scale = None
        for _ in range(self.dim):
            mu, log_scale = self.shift_and_log_scale(z, p)
            z = (x - mu) * ad.exp(-log_scale)
        return z, -ad.sum(log_scale, axis=-1)


class SupportKind(IntEnum):
    IDENTITY = 0
    POSITIVE = 1   # exp
    UNIT = 2       # sigmoid


@dataclass
class SupportBijection:
    kinds: np.ndarray

    def __post_init__(self):
        self.kinds = np.asarray([SupportKind(int(k)) for k in np.atleast_1d(self.kinds)], dtype=int)
        self._pos = (self.kinds == SupportKind.POSITIVE).astype(float)
        self._unit = (self.kinds == SupportKind.UNIT).astype(float)
        self._ident = (self.kinds == SupportKind.IDENTITY).astype(float)

    @property
    def trivial(self):
        return bool(np.all(self.kinds == SupportKind.IDENTITY))

    def forward(self, x):
        """Map unconstrained x onto the support; returns (y, per-row log det)."""
        if self.trivial:
            return x, 0.0
        pos, unit, ident = self._pos, self._unit, self._ident
        log_sig = -ad.softplus(-(x * unit))
        log_one_minus = -ad.softplus(x * unit)
        y = x * ident + ad.exp(x * pos) * pos + ad.exp(log_sig) * unit
        ld = x * pos + (log_sig + log_one_minus) * unit
        return y, ad.sum(ld, axis=-1)

    def check_range(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        for j, kind in enumerate(self.kinds):
            col = y[:, j]
            if kind == SupportKind.POSITIVE and np.any(col <= 0):
                raise DomainError(f"coordinate {j} must be positive")
            if kind == SupportKind.UNIT and np.any((col <= 0) | (col >= 1)):
                raise DomainError(f"coordinate {j} must lie in (0, 1)")

    def inverse(self, y):
        """Unconstrained preimage of y and the per-row inverse log det."""
        if self.trivial:
            return y, 0.0
        pos, unit, ident = self._pos, self._unit, self._ident
        safe_y = y * (pos + unit) + ident
        log_y = ad.log(safe_y)
        log_1my = ad.log(1.0 - y * unit)
        x = y * ident + log_y * pos + (log_y - log_1my) * unit
        ld = -(log_y * pos + (log_y + log_1my) * unit)
        return x, ad.sum(ld, axis=-1)


@dataclass
class FlowStack:
    layers: list
    support: SupportBijection
    base: BaseDistribution
    params: dict = field(default_factory=dict)
    hidden: tuple = DEFAULT_HIDDEN

    def __post_init__(self):
        dims = {self.base.dim, len(self.support.kinds), *(layer.dim for layer in self.layers)}
        if len(dims) != 1:
            raise DomainError(f"inconsistent dimensions in flow stack: {sorted(dims)}")
        self.sync_tails()

    @property
    def dim(self):
        return self.base.dim

    NU_KEY = "base.nu_raw"

    def sync_tails(self):
        """Keep ``params['base.nu_raw']`` and the base TailParams in step."""
        if self.base.tails is None:
            self.params.pop(self.NU_KEY, None)
        elif self.NU_KEY in self.params:
            self.base.tails.raw = np.asarray(self.params[self.NU_KEY], dtype=float)
        else:
            self.params[self.NU_KEY] = np.array(self.base.tails.raw, dtype=float)

    @property
    def nu(self):
        return None if self.base.tails is None else self.base.tails.nu

    def set_params(self, params):
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.sync_tails()

    def _nu(self, p):
        if self.base.tails is None:
            return None
        return self.base.tails.floor + ad.softplus(p[self.NU_KEY])

    def push(self, noise, p=None):
        """Push raw base noise through the flow: returns (y, log q(y)) per row."""
        p = self.params if p is None else p
        nu = self._nu(p)
        z = self.base.draw(noise, nu)
        log_q = self.base.log_prob(z, nu)
        for layer in self.layers:
            z, ld = layer.forward(z, p)
            log_q = log_q - ld
        y, ld = self.support.forward(z)
        return y, log_q - ld

    def unconstrained(self, noise, p=None):
        p = self.params if p is None else p
        z = self.base.draw(noise, self._nu(p))
        for layer in self.layers:
            z, _ = layer.forward(z, p)
        return z

    def log_prob(self, y, p=None):
        p = self.params if p is None else p
        self.support.check_range(ad.value_of(y))
        x, ld_total = self.support.inverse(y)
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, p)
            ld_total = ld_total + ld
        return self.base.log_prob(x, self._nu(p)) + ld_total

    def sample(self, rng, n: int):
        noise = self.base.noise(rng, n)
        y, log_q = self.push(noise)
        return np.asarray(y), np.asarray(log_q)

    # -- serialization -------------------------------------------------
    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "base": self.base.kind.value,
            "nu_floor": None if self.base.tails is None else self.base.tails.floor,
            "hidden": list(self.hidden),
            "clamp": self.layers[0].clamp if self.layers else DEFAULT_CLAMP,
            "orderings": [layer.ordering.tolist() for layer in self.layers],
            "support": self.support.kinds.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps({"flow": self.describe(), "params": params_to_hex(self.params)},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FlowStack":
        blob = json.loads(text)
        meta = blob["flow"]
        params = params_from_hex(blob["params"])
        stack = build_stack(meta["dim"], BaseKind(meta["base"]), meta["support"],
                            hidden=tuple(meta["hidden"]), orderings=meta["orderings"],
                            clamp=meta["clamp"], rng=None)
        if meta.get("nu_floor") is not None:
            stack.base.tails.floor = meta["nu_floor"]
        stack.set_params(params)
        return stack


def params_to_hex(params: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "hex": [float(x).hex() for x in np.ravel(v)]}
            for k, v in sorted(params.items())}


def params_from_hex(blob: dict) -> dict:
    return {k: np.array([float.fromhex(h) for h in v["hex"]], dtype=float).reshape(v["shape"])
            for k, v in blob.items()}


def default_orderings(dim: int, n_layers: int = 2):
    ident = np.arange(dim)
    return [ident if i % 2 == 0 else ident[::-1] for i in range(n_layers)]


def build_stack(dim, base_kind, support_kinds=None, *, hidden=DEFAULT_HIDDEN, n_layers=2,
                orderings=None, clamp=DEFAULT_CLAMP, rng=None, zero_output=True, nu_init=2.0):
    """Assemble base + IAF layers + support bijection with fresh parameters."""
    base_kind = BaseKind(base_kind)
    if support_kinds is None:
        support_kinds = np.zeros(dim, dtype=int)
    orderings = default_orderings(dim, n_layers) if orderings is None else orderings
    rng = np.random.default_rng(0) if rng is None else rng
    layers, params = [], {}
    for i, order in enumerate(orderings):
        cond = MaskedConditioner(dim, np.asarray(order), tuple(hidden))
        layer = IafLayer(cond, prefix=f"layer{i}.", clamp=clamp)
        params.update(cond.init_params(rng, layer.prefix, zero_output=zero_output))
        layers.append(layer)
    tails = None
    if base_kind is BaseKind.STUDENT_T_SHARED:
        tails = TailParams.from_nu(np.full(1, nu_init))
    elif base_kind is BaseKind.STUDENT_T_PER_DIM:
        tails = TailParams.from_nu(np.full(dim, nu_init))
    base = BaseDistribution(base_kind, dim, tails)
    return FlowStack(layers, SupportBijection(support_kinds), base, params, tuple(hidden))
