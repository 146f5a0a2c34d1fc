"""Reproduction presets: staged ADVI/TAF/ATAF sweeps and their diagnostics."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import jsonschema
import numpy as np

from . import tails
from .flows import FlowStack
from .targets import (aniso_product_target, blr_conjugate, blr_dataset, cauchy_target,
                      eight_schools, normal_normal)
from .vi import FamilyKind, TrainConfig, staged_init, train

FAMILIES = ("advi", "taf", "ataf")

SCALES = {
    # desk: short runs on one core; nu gets a larger step and the rate anneals
    "desk": dict(steps=2000, lr=1e-2, nu_lr_scale=5.0, schedule="cosine", elbo_samples=100,
                 eval_samples=1000),
    # published schedule: Adam at 1e-3 for 10000 iterations, 1000-sample evaluation
    "paper": dict(steps=10000, lr=1e-3, nu_lr_scale=1.0, schedule="constant", elbo_samples=100,
                  eval_samples=1000),
}


@dataclass(frozen=True)
class Preset:
    name: str
    target: str
    seeds: dict                      # scale -> tuple of seeds
    overrides: dict = field(default_factory=dict)   # scale -> TrainConfig overrides
    tail_samples: int = 10**5

    def config(self, scale: str, seed: int) -> TrainConfig:
        kw = dict(SCALES[scale])
        kw.update(self.overrides.get(scale, {}))
        return TrainConfig(seed=seed, **kw)


PRESETS = {
    "cauchy-appB": Preset("cauchy-appB", "cauchy", {"desk": tuple(range(5)), "paper": tuple(range(5))}),
    "aniso-fig1": Preset("aniso-fig1", "aniso_product", {"desk": (0,), "paper": (0,)},
                         {"desk": {"steps": 3000}}, tail_samples=10**6),
    "blr-fig3": Preset("blr-fig3", "blr", {"desk": (0,), "paper": (0,)},
                       {"desk": {"steps": 3000}}, tail_samples=10**6),
    "eight-schools": Preset("eight-schools", "eight_schools",
                            {"desk": tuple(range(10)), "paper": tuple(range(100))},
                            {"desk": {"eval_samples": 10000}, "paper": {"steps": 5000}}),
    "normal-normal": Preset("normal-normal", "normal_normal", {"desk": (0, 1, 2), "paper": tuple(range(10))},
                            {"desk": {"eval_samples": 10000}, "paper": {"eval_samples": 10000}}),
    "closure-battery": Preset("closure-battery", "", {"desk": (0,), "paper": (0,)}),
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["preset", "scale", "target", "hidden", "seeds", "families", "checks"],
    "properties": {
        "preset": {"enum": list(PRESETS)},
        "scale": {"enum": list(SCALES)},
        "hidden": {"type": "integer"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "families": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["family", "elbo_mean", "elbo_stderr", "logpy_mean", "logpy_stderr",
                             "nu_values", "tail_verdict"],
                "properties": {
                    "family": {"enum": list(FAMILIES)},
                    "elbo_mean": {"type": "number"},
                    "elbo_stderr": {"type": "number", "minimum": 0},
                    "logpy_mean": {"type": "number"},
                    "logpy_stderr": {"type": "number", "minimum": 0},
                    "nu_values": {"type": ["array", "null"]},
                    "tail_verdict": {},
                },
            },
        },
        "checks": {"type": "object"},
    },
}


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, SUMMARY_SCHEMA)


def hidden_for(dim: int) -> int:
    """32 hidden units up to ten dimensions, 256 above."""
    return 32 if dim <= 10 else 256


def thread_count() -> int:
    env = os.environ.get("ATAFLOW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def make_target(name: str):
    if name == "cauchy":
        return cauchy_target()
    if name == "aniso_product":
        return aniso_product_target()
    if name == "blr":
        return blr_conjugate(*blr_dataset())[0]
    if name == "eight_schools":
        return eight_schools()
    if name == "normal_normal":
        return normal_normal(np.random.default_rng(0).normal(1.0, 1.0, 10))
    raise KeyError(name)


# -- sweeps ------------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    results: dict    # family -> TrainResult
    stacks: dict     # family -> FlowStack JSON


def _staged_job(args):
    target_name, config, hidden = args
    target = make_target(target_name)
    staged = staged_init(target, config, hidden=(hidden, hidden))
    ataf_res = train(staged.ataf, target, config)
    return SeedRun(config.seed,
                   {"advi": staged.advi_result, "taf": staged.taf_result, "ataf": ataf_res},
                   {"advi": staged.advi.to_json(), "taf": staged.taf.to_json(),
                    "ataf": staged.ataf.to_json()})


def run_sweep(target_name: str, configs, hidden: int, workers: int | None = None):
    """Staged ADVI -> TAF -> ATAF per config, in seed order."""
    jobs = [(target_name, c, hidden) for c in configs]
    workers = thread_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_staged_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_staged_job, jobs))


def _aggregate(values, stderrs):
    values = np.asarray(values, dtype=float)
    if len(values) > 1:
        return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))
    return float(values[0]), float(stderrs[0])


def family_record(family: str, runs, tail_verdict) -> dict:
    res = [r.results[family] for r in runs]
    e_mean, e_se = _aggregate([r.elbo_mean for r in res], [r.elbo_stderr for r in res])
    l_mean, l_se = _aggregate([r.logpy_mean for r in res], [r.logpy_stderr for r in res])
    return {
        "family": family,
        "elbo_mean": e_mean, "elbo_stderr": e_se,
        "logpy_mean": l_mean, "logpy_stderr": l_se,
        "nu_values": None if res[0].nu_values is None else [r.nu_values for r in res],
        "tail_verdict": tail_verdict,
        "per_seed": [{"seed": r.seed, "elbo_mean": r.elbo_mean, "elbo_stderr": r.elbo_stderr,
                      "logpy_mean": r.logpy_mean, "logpy_stderr": r.logpy_stderr,
                      "skipped_steps": r.skipped_steps} for r in res],
    }


# -- diagnostics ---------------------------------------------------------------------

def ks_pvalues(stack: FlowStack, cdf, rng, tests: int = 1000, n: int = 100):
    y, _ = stack.sample(rng, tests * n)
    y = y[:, 0].reshape(tests, n)
    return np.array([tails.ks_test(row, cdf)[1] for row in y])


def blr_slice_verdicts(log_density, post, n: int = 10**6) -> dict:
    """Tail class of beta | sigma^2 and of sigma^2 | beta at the posterior centre."""
    beta0 = float(np.ravel(post.mu_n)[0])
    s20 = float(post.b_n / (post.a_n + 1.0))
    b = tails.conditional_quantile_grid(
        lambda u: log_density(np.column_stack([u, np.full_like(u, s20)])), beta0 - 60, beta0 + 60, n)
    # sigma^2 slice on the log scale, Jacobian included, mapped back
    ls = tails.conditional_quantile_grid(
        lambda u: log_density(np.column_stack([np.full_like(u, beta0), np.exp(u)])) + u,
        np.log(s20) - 15, np.log(s20) + 40, n)
    vb, vs = tails.classify_tail(b), tails.classify_tail(np.exp(ls))
    return {"beta_given_sigma2": vb.family, "sigma2_given_beta": vs.family,
            "beta_p": vb.p, "sigma2_p": vs.p, "beta_gap": vb.loglik_gap, "sigma2_gap": vs.loglik_gap}


def density_slices(target, stacks: dict, lo=-20.0, hi=20.0, points=401) -> str:
    """CSV of log-densities along each coordinate axis through the origin
    (or through 1 for positive coordinates)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["coordinate", "x", "source", "log_density"])
    anchor = np.array([1.0 if k == 1 else 0.5 if k == 2 else 0.0 for k in target.support])
    for j in range(target.dim):
        grid = np.linspace(lo, hi, points)
        if target.support[j] == 1:
            grid = np.exp(np.linspace(-5, 5, points))
        elif target.support[j] == 2:
            grid = np.linspace(1e-3, 1 - 1e-3, points)
        pts = np.tile(anchor, (points, 1))
        pts[:, j] = grid
        sources = {"target": np.asarray(target.log_density(pts)) - (target.log_normalizer or 0.0)}
        for fam, text in stacks.items():
            sources[fam] = np.asarray(FlowStack.from_json(text).log_prob(pts))
        for name, vals in sources.items():
            for x, v in zip(grid, vals):
                w.writerow([j, repr(float(x)), name, repr(float(v))])
    return buf.getvalue()


def tail_curves(samples_by_source: dict, points: int = 200) -> str:
    """CSV of empirical log-survival of |x_j - median| on a log-spaced grid."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["coordinate", "source", "x", "log_survival"])
    for name, y in samples_by_source.items():
        for j in range(y.shape[1]):
            t = np.sort(np.abs(y[:, j] - np.median(y[:, j])))
            n = len(t)
            idx = np.unique(np.geomspace(1, n - 1, points).astype(int))
            for i in idx:
                w.writerow([j, name, repr(float(t[n - i - 1])), repr(float(np.log(i / n)))])
    return buf.getvalue()


# -- reproduce ------------------------------------------------------------------------

@dataclass
class ReproduceOutput:
    summary: dict
    files: dict      # relative name -> text


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def reproduce(name: str, scale: str = "desk", seeds=None, workers=None, overrides=None) -> ReproduceOutput:
    preset = PRESETS[name]
    seeds = tuple(preset.seeds[scale]) if not seeds else tuple(seeds)
    if name == "closure-battery":
        reports = [tails.closure_checks(s) for s in seeds]
        summary = {"preset": name, "scale": scale, "target": "", "hidden": 32, "seeds": list(seeds),
                   "families": [], "checks": {f"seed_{r.seed}": r.to_dict() for r in reports}}
        validate_summary(summary)
        return ReproduceOutput(summary, {"summary.json": _dump(summary)})

    target = make_target(preset.target)
    hidden = hidden_for(target.dim)
    configs = [replace(preset.config(scale, s), **(overrides or {})) for s in seeds]
    runs = run_sweep(preset.target, configs, hidden, workers)
    first = runs[0]
    rng = np.random.default_rng(seeds[0] + 12345)
    files, checks, verdicts = {}, {}, {}

    samples = {fam: FlowStack.from_json(first.stacks[fam]).sample(rng, preset.tail_samples)[0]
               for fam in FAMILIES}
    if target.sampler is not None:
        samples["target"] = target.sample(rng, preset.tail_samples)

    if name == "cauchy-appB":
        cdf = target.analytic_reference.cdf
        rows = ["seed,family,pvalue"]
        medians = {fam: [] for fam in FAMILIES}
        for run in runs:
            krng = np.random.default_rng(run.seed + 777)
            for fam in FAMILIES:
                p = ks_pvalues(FlowStack.from_json(run.stacks[fam]), cdf, krng)
                medians[fam].append(float(np.median(p)))
                rows.extend(f"{run.seed},{fam},{float(v)!r}" for v in p)
        files["ks_pvalues.csv"] = "\n".join(rows) + "\n"
        checks["ks_median_pvalue"] = medians
        for fam in FAMILIES:
            verdicts[fam] = tails.classify_tail(samples[fam][:, 0]).family
    elif name == "blr-fig3":
        post = target.analytic_reference
        verdicts["target"] = blr_slice_verdicts(lambda y: target.log_density(y), post)
        for fam in FAMILIES:
            stack = FlowStack.from_json(first.stacks[fam])
            verdicts[fam] = blr_slice_verdicts(stack.log_prob, post)
        checks["a_n"] = post.a_n
        checks["a_n_expected"] = 1.0 + 0.5 * 10
    elif name == "normal-normal":
        checks["analytic_log_marginal"] = target.log_normalizer
        for fam in FAMILIES:
            verdicts[fam] = tails.classify_tail(samples[fam][:, 0]).family
    else:
        reports = {}
        for fam in FAMILIES:
            rep = tails.tail_parameter_function(samples[fam], seed=seeds[0])
            reports[fam] = rep
            verdicts[fam] = rep.isotropy
            files[f"tails_{fam}.json"] = rep.to_json() + "\n"
            files[f"tails_{fam}.csv"] = rep.to_csv()
        if name == "aniso-fig1":
            for fam, rep in reports.items():
                # directions 0 and 16 of the 64-point grid are e_x and e_y
                checks[f"{fam}_alpha_ex"] = rep.alpha_hat[0]
                checks[f"{fam}_alpha_ey"] = rep.alpha_hat[16]

    families = [family_record(fam, runs, verdicts[fam]) for fam in FAMILIES]
    summary = {"preset": name, "scale": scale, "target": target.name, "hidden": hidden,
               "seeds": list(seeds), "families": families, "checks": checks,
               "config": {k: v for k, v in asdict(configs[0]).items() if k != "seed"}}
    if "target" in verdicts:
        summary["target_verdict"] = verdicts["target"]
    validate_summary(summary)
    files["summary.json"] = _dump(summary)
    files["density_slices.csv"] = density_slices(target, first.stacks)
    files["tail_curves.csv"] = tail_curves(samples)
    for run in runs:
        for fam in FAMILIES:
            files[f"seed{run.seed}/{fam}_params.json"] = run.stacks[fam] + "\n"
            files[f"seed{run.seed}/{fam}_trace.csv"] = trace_csv(run.results[fam].trace)
    return ReproduceOutput(summary, files)


def trace_csv(trace) -> str:
    return "step,elbo\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(map(float, trace)))
