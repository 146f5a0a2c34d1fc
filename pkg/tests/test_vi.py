import json

import numpy as np
import pytest

from ataflow import autodiff as ad
from ataflow.errors import NumericAbort, UsageError
from ataflow.flows import FlowStack
from ataflow.targets import aniso_product_target, cauchy_target, gaussian_target
from ataflow.vi import (
    AdamState, FamilyKind, TrainConfig, adam_step, clip_global_norm, elbo_estimate,
    elbo_value_and_grad, fit_density, log_marginal_likelihood, make_family, parse_family,
    split_data, staged_init, train,
)


def _perturbed(stack, rng, scale=0.3):
    stack.set_params({k: v + scale * rng.standard_normal(np.shape(v)) for k, v in stack.params.items()})
    return stack


def test_family_nu_counts():
    t = aniso_product_target()
    assert make_family("advi", t).nu is None
    assert len(make_family("taf", t).nu) == 1
    assert len(make_family("ATAF", t).nu) == 2
    with pytest.raises(UsageError):
        parse_family("maf")


def test_elbo_gradient_matches_finite_differences(rng):
    t = aniso_product_target()
    stack = _perturbed(make_family(FamilyKind.ATAF, t, hidden=(8, 8), seed=1), rng)
    noise = stack.base.noise(rng, 64)
    _, grads, used = elbo_value_and_grad(stack, t, noise)
    assert used == 64
    h = 1e-6
    for key in sorted(stack.params):
        p = stack.params[key]
        flat = np.ravel(p)
        for idx in rng.choice(flat.size, min(3, flat.size), replace=False):
            bumped = []
            for sign in (1, -1):
                q = dict(stack.params)
                arr = flat.copy()
                arr[idx] += sign * h
                q[key] = arr.reshape(np.shape(p))
                bumped.append(elbo_value_and_grad(stack, t, noise, q)[0])
            fd = (bumped[0] - bumped[1]) / (2 * h)
            assert np.ravel(grads[key])[idx] == pytest.approx(fd, abs=1e-3, rel=1e-3), key


def test_adam_matches_hand_computation():
    params = {"w": np.array([1.0, -2.0])}
    grads = [np.array([0.5, 1.0]), np.array([-0.2, 0.4]), np.array([0.1, 0.0])]
    state = AdamState()
    m = v = np.zeros(2)
    w = params["w"].copy()
    for t, g in enumerate(grads, start=1):
        params, state = adam_step(params, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w + 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(params["w"], w, rtol=0, atol=1e-15)


def test_adam_first_step_is_lr_and_zero_grad_is_noop():
    params = {"a": np.array([3.0, 3.0])}
    out, _ = adam_step(params, {"a": np.array([2.0, -7.0])}, AdamState(), lr=0.05)
    assert np.allclose(out["a"] - 3.0, [0.05, -0.05], atol=1e-9)
    out, _ = adam_step(params, {"a": np.zeros(2)}, AdamState(), lr=0.05)
    assert np.array_equal(out["a"], params["a"])
    out, _ = adam_step(params, {"a": np.array([1.0, 1.0])}, AdamState(), lr=0.05, lr_scale={"a": 2.0})
    assert np.allclose(out["a"] - 3.0, 0.1, atol=1e-9)


def test_clip_global_norm():
    g, total = clip_global_norm({"a": np.array([30.0, 40.0])}, 10.0)
    assert total == 50.0
    assert np.allclose(g["a"], [6.0, 8.0])
    assert clip_global_norm({"a": np.array([np.inf])}, 10.0)[0] is None


def test_jensen_gap(rng):
    t = cauchy_target()
    stack = make_family("advi", t)
    elbo, _ = elbo_estimate(stack, t, 20_000, rng)
    logz, _ = log_marginal_likelihood(stack, t, 20_000, rng)
    assert elbo < logz <= t.log_normalizer + 0.05


def test_exact_family_recovers_normalizer(rng):
    # identity flow on a Gaussian base matches N(0, 1) exactly, so every weight is 1
    t = gaussian_target(log_scale=1.7)
    stack = make_family("advi", t)
    elbo, se = elbo_estimate(stack, t, 100, rng)
    assert elbo == pytest.approx(1.7, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_constant_shift_moves_elbo_only_by_constant(rng):
    cfg = TrainConfig(steps=30, lr=1e-2, seed=4)
    a = train(make_family("taf", gaussian_target(2.0, 1.5), seed=4), gaussian_target(2.0, 1.5), cfg)
    b = train(make_family("taf", gaussian_target(2.0, 1.5, 3.0), seed=4),
              gaussian_target(2.0, 1.5, 3.0), cfg)
    assert np.allclose(np.array(b.trace) - np.array(a.trace), 3.0, atol=1e-9)
    assert b.elbo_mean - a.elbo_mean == pytest.approx(3.0, abs=1e-9)


def test_training_is_deterministic():
    t = aniso_product_target()
    cfg = TrainConfig(steps=15, lr=1e-2, seed=11)
    r1 = train(make_family("ataf", t, hidden=(8, 8), seed=11), t, cfg)
    r2 = train(make_family("ataf", t, hidden=(8, 8), seed=11), t, cfg)
    assert r1.to_json() == r2.to_json()
    assert "wall_time" not in json.loads(r1.to_json())


def test_zero_steps_returns_initial_params():
    t = cauchy_target()
    stack = make_family("taf", t)
    before = {k: v.copy() for k, v in stack.params.items()}
    res = train(stack, t, TrainConfig(steps=0))
    assert res.trace == []
    assert all(np.array_equal(before[k], res.params[k]) for k in before)


def test_abort_after_persistent_failures():
    t = cauchy_target()

    bad = type(t)("broken", 1, lambda y: np.full(len(ad.value_of(y)), np.nan), (0,))
    with pytest.raises(NumericAbort) as info:
        train(make_family("advi", bad), bad, TrainConfig(steps=200))
    assert "50 consecutive" in str(info.value)
    assert FlowStack.from_json(info.value.snapshot).dim == 1


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(steps=-1)
    with pytest.raises(UsageError):
        TrainConfig(lr=0.0)
    with pytest.raises(UsageError):
        TrainConfig(elbo_samples=1)
    with pytest.raises(UsageError):
        TrainConfig(schedule="linear")


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(steps=101, lr=0.02, schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(0.02)
    assert cfg.lr_at(50) == pytest.approx(0.02 * (0.05 + 0.95 * 0.5))
    assert cfg.lr_at(100) == pytest.approx(0.001)
    assert TrainConfig(lr=0.02).lr_at(77) == 0.02


def test_staged_init_gives_constant_nu():
    t = aniso_product_target()
    st = staged_init(t, TrainConfig(steps=5, lr=1e-2, seed=2), hidden=(8, 8))
    assert np.allclose(st.ataf.nu, st.taf.nu[0])
    key = "layer0.W0"
    if key in st.taf.params:
        assert np.array_equal(st.ataf.params[key], st.taf.params[key])


def test_split_data_partition():
    data = np.arange(50.0).reshape(25, 2)
    tr, he = split_data(data, seed=3)
    assert len(tr) == 20 and len(he) == 5
    assert sorted(np.concatenate([tr, he])[:, 0]) == list(data[:, 0])


def test_fit_density_improves_and_validates(rng):
    data = rng.standard_cauchy((400, 1))
    stack = make_family("ataf", cauchy_target(), hidden=(8, 8))
    res = fit_density(stack, data, TrainConfig(steps=60, lr=2e-2, elbo_samples=64))
    assert res.n_train == 320 and res.n_heldout == 80
    assert np.nanmean(res.trace[-10:]) > res.trace[0]
    with pytest.raises(UsageError):
        fit_density(stack, data[:5], TrainConfig(steps=1))
    with pytest.raises(UsageError):
        fit_density(stack, np.ones((20, 2)), TrainConfig(steps=1))


def test_staged_ataf_starts_at_taf_distribution():
    t = aniso_product_target()
    st = staged_init(t, TrainConfig(steps=40, lr=1e-2, seed=6), hidden=(8, 8))
    noise_rng = np.random.default_rng(9)
    z = st.taf.base.noise(noise_rng, 4000)
    # same noise gives the same pushforward and density
    y_taf, lq_taf = st.taf.push(z)
    y_ataf, lq_ataf = st.ataf.push(z)
    assert np.allclose(y_taf, y_ataf, atol=1e-12) and np.allclose(lq_taf, lq_ataf, atol=1e-10)
    e_taf, se = elbo_estimate(st.taf, t, 4000, np.random.default_rng(1))
    e_ataf, _ = elbo_estimate(st.ataf, t, 4000, np.random.default_rng(1))
    assert abs(e_taf - e_ataf) < 3 * se + 1e-9
