import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaham.objective import (
    KL_FLOOR,
    LossKind,
    ProblemInstance,
    QuadraticObjective,
    QuenchDataset,
    QuenchObjective,
    dataset_from_json,
    dataset_to_json,
    default_times,
    derive_seed,
    dumps,
    finite_diff_grad,
    generate_dataset,
    loss_and_grad,
    loss_value,
    make_rng,
    population_jacobian,
    predict,
    problem_from_seed,
    sample_problem,
)
from metaham.spin import DEFAULT_INITIAL_STATES, build_model, initial_state

KINDS = ["TFIM", "AllToAllIsing", "XY"]


def test_default_time_grid():
    t = default_times()
    assert t.size == 50
    assert t[0] == 0.0 and t[-1] == 10.0
    np.testing.assert_allclose(np.diff(t), 10 / 49)


def test_zero_noise_is_exact(rng):
    spec = build_model("TFIM", 4)
    theta = rng.uniform(1, 2, 8)
    ds = generate_dataset(spec, theta, sigma=0.0)
    np.testing.assert_array_equal(ds.observed, predict(spec, theta, default_times()))
    assert ds.observed.shape == (2, 50, 16)


def test_noise_standard_deviation():
    spec = build_model("TFIM", 6)
    rng = make_rng(7)
    resid = []
    while sum(r.size for r in resid) < 100_000:
        theta = rng.uniform(1, 2, spec.n_params)
        exact = predict(spec, theta, default_times())
        noisy = generate_dataset(spec, theta, sigma=0.001, rng=rng).observed
        inside = (exact > 0.01) & (exact < 0.99)
        resid.append((noisy - exact)[inside])
    s = np.concatenate(resid).std()
    assert 0.00095 <= s <= 0.00105


def test_observations_clipped(rng):
    spec = build_model("TFIM", 3)
    ds = generate_dataset(spec, rng.uniform(1, 2, 6), sigma=0.2, rng=rng)
    assert ds.observed.min() >= 0.0 and ds.observed.max() <= 1.0
    assert np.any(ds.observed == 0.0)


def test_dataset_validation():
    obs = np.full((2, 3, 4), 0.25)
    with pytest.raises(ValueError):
        QuenchDataset([0.0, 1.0, 1.0], DEFAULT_INITIAL_STATES, obs, 0.0)
    with pytest.raises(ValueError):
        QuenchDataset([0.0, 1.0, 2.0], DEFAULT_INITIAL_STATES, obs + 1.0, 0.0)
    with pytest.raises(ValueError):
        QuenchDataset([0.0, 1.0], DEFAULT_INITIAL_STATES, obs, 0.0)
    with pytest.raises(ValueError):
        generate_dataset(build_model("TFIM", 3), np.ones(6), sigma=0.1)


def test_sample_problem_ranges():
    spec = build_model("TFIM", 4)
    for i in range(20):
        p = problem_from_seed(spec, derive_seed(0, 0, i))
        assert np.all((p.theta_true >= 1) & (p.theta_true <= 2))
        assert p.theta_init.shape == (8,)


def test_sample_problem_zero_prior_width(rng):
    p = sample_problem(build_model("XY", 3), rng, sigma_in=0.0)
    np.testing.assert_array_equal(p.theta_init, p.theta_true)


def test_sample_problem_rejects_bad_range(rng):
    with pytest.raises(ValueError):
        sample_problem(build_model("TFIM", 3), rng, param_range=(2, 1))
    with pytest.raises(ValueError):
        sample_problem(build_model("TFIM", 3), rng, sigma_in=-1)


def test_problem_from_seed_is_deterministic():
    spec = build_model("TFIM", 4)
    a, b = problem_from_seed(spec, 99), problem_from_seed(spec, 99)
    np.testing.assert_array_equal(a.theta_true, b.theta_true)
    np.testing.assert_array_equal(a.theta_init, b.theta_init)
    np.testing.assert_array_equal(a.dataset.observed, b.dataset.observed)


def test_derive_seed_streams_differ():
    seeds = {derive_seed(0, s, i) for s in range(4) for i in range(50)}
    assert len(seeds) == 200
    assert derive_seed(3, 1, 4) == derive_seed(3, 1, 4)


def test_problem_shape_check():
    spec = build_model("TFIM", 3)
    ds = generate_dataset(spec, np.ones(6), sigma=0.0)
    with pytest.raises(ValueError):
        ProblemInstance(spec, np.ones(5), ds, np.ones(6))


@pytest.mark.parametrize("kind", KINDS)
def test_zero_loss_and_gradient_at_truth(kind, rng):
    spec = build_model(kind, 3)
    theta = rng.uniform(1, 2, spec.n_params)
    ds = generate_dataset(spec, theta, sigma=0.0)
    for loss in LossKind:
        ev = loss_and_grad(spec, theta, ds, loss)
        assert abs(ev.value) <= (1e-18 if loss is LossKind.SQUARED_ERROR else 1e-9)
        assert np.abs(ev.gradient).max() < 1e-9


def test_kl_of_identical_rows():
    spec = build_model("TFIM", 3)
    theta = np.full(6, 1.5)
    ds = generate_dataset(spec, theta, sigma=0.0)
    # the 1e-12 floor on empty model entries shifts the renormalized row by O(1e-12) per row
    assert loss_value(spec, theta, ds, "KL") == pytest.approx(0.0, abs=1e-9)


def test_kl_rejects_empty_row(rng):
    spec = build_model("TFIM", 3)
    ds = generate_dataset(spec, np.full(6, 1.5), sigma=0.0)
    obs = ds.observed.copy()
    obs[1, 3] = 0.0
    bad = QuenchDataset(ds.times, ds.initial_states, obs, 0.0)
    with pytest.raises(ValueError):
        loss_value(spec, np.full(6, 1.2), bad, LossKind.KL)


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(KINDS), seed=st.integers(0, 2**32 - 1), sigma=st.sampled_from([0.0, 0.001, 0.05]))
def test_losses_nonnegative(kind, seed, sigma):
    rng = np.random.default_rng(seed)
    spec = build_model(kind, 3)
    ds = generate_dataset(spec, rng.uniform(1, 2, spec.n_params), sigma=sigma, rng=rng)
    theta = rng.uniform(0, 3, spec.n_params)
    assert loss_value(spec, theta, ds, "SquaredError") >= 0
    assert loss_value(spec, theta, ds, "KL") >= -1e-12


@pytest.mark.parametrize("loss", list(LossKind))
@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind, loss):
    spec = build_model(kind, 3)
    p = problem_from_seed(spec, 1234, loss_kind=loss, sigma_in=0.3)
    obj = p.objective()
    ev = obj.value_and_grad(p.theta_init)
    fd = finite_diff_grad(obj, p.theta_init, 1e-5)
    np.testing.assert_allclose(ev.gradient, fd, rtol=1e-5)
    assert ev.value == pytest.approx(obj.value(p.theta_init), rel=1e-13)


def test_fast_gradient_matches_jacobian_route(rng):
    spec = build_model("TFIM", 4)
    p = problem_from_seed(spec, 5)
    theta = p.theta_init
    ds = p.dataset
    grad = np.zeros(spec.n_params)
    for j, s in enumerate(ds.initial_states):
        jac = population_jacobian(spec, theta, initial_state(s, 4), ds.times)  # [t, a, i]
        pred = predict(spec, theta, ds.times, [s])[0]
        grad += np.einsum("ti,tai->a", 2 * (pred - ds.observed[j]), jac)
    np.testing.assert_allclose(loss_and_grad(spec, theta, ds).gradient, grad, rtol=1e-10, atol=1e-12)


def test_fast_gradient_with_degenerate_spectrum():
    # fields equal and couplings zero: heavily degenerate H, the close-pair branch does the work
    spec = build_model("TFIM", 3)
    truth = np.array([1.1, 1.2, 1.3, 1.5, 1.6, 1.7])
    ds = generate_dataset(spec, truth, sigma=0.0)
    theta = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    obj = QuenchObjective(spec, ds)
    np.testing.assert_allclose(obj.value_and_grad(theta).gradient, finite_diff_grad(obj, theta), rtol=1e-6, atol=1e-8)


def test_finite_difference_is_second_order():
    spec = build_model("TFIM", 3)
    p = problem_from_seed(spec, 77, sigma_in=0.3)
    obj = p.objective()
    exact = obj.value_and_grad(p.theta_init).gradient
    e1 = np.abs(finite_diff_grad(obj, p.theta_init, 2e-3) - exact).max()
    e2 = np.abs(finite_diff_grad(obj, p.theta_init, 1e-3) - exact).max()
    assert 3.5 < e1 / e2 < 4.5


def test_finite_difference_of_quadratic_is_exact():
    obj = QuadraticObjective(np.zeros(3))
    theta = np.array([0.5, -1.25, 2.0])
    # dyadic steps keep every intermediate exactly representable
    for h in (0.5, 0.25, 2.0**-10):
        np.testing.assert_array_equal(finite_diff_grad(obj, theta, h), 2 * theta)
    for h in (0.3, 1e-3, 1e-6):
        np.testing.assert_allclose(finite_diff_grad(obj, theta, h), 2 * theta, rtol=1e-9)
    with pytest.raises(ValueError):
        finite_diff_grad(obj, theta, 0.0)


def test_loss_invariant_to_state_order():
    spec = build_model("TFIM", 3)
    p = problem_from_seed(spec, 3)
    ds = p.dataset
    swapped = QuenchDataset(ds.times, ds.initial_states[::-1], ds.observed[::-1], ds.noise_sigma)
    for loss in LossKind:
        a = loss_and_grad(spec, p.theta_init, ds, loss)
        b = loss_and_grad(spec, p.theta_init, swapped, loss)
        assert a.value == pytest.approx(b.value, rel=1e-13)
        np.testing.assert_allclose(a.gradient, b.gradient, rtol=1e-11)


def test_kl_floor_is_respected():
    assert KL_FLOOR == 1e-12
    # AllZeroZ at t=0 puts zero population on most basis states of the model
    spec = build_model("TFIM", 3)
    ds = generate_dataset(spec, np.full(6, 1.5), sigma=0.01, rng=make_rng(0))
    ev = loss_and_grad(spec, np.full(6, 1.4), ds, "KL")
    assert np.isfinite(ev.value) and np.all(np.isfinite(ev.gradient))


def test_objective_counters():
    p = problem_from_seed(build_model("TFIM", 3), 1)
    obj = p.objective()
    obj.value(p.theta_init)
    obj.value_and_grad(p.theta_init)
    obj.value_and_grad(p.theta_init)
    assert (obj.n_value, obj.n_grad) == (1, 2)


def test_dataset_json_round_trip():
    p = problem_from_seed(build_model("XY", 3), 11)
    text = dumps(dataset_to_json(p))
    q = dataset_from_json(json.loads(text))
    np.testing.assert_array_equal(q.dataset.observed, p.dataset.observed)
    np.testing.assert_array_equal(q.theta_true, p.theta_true)
    np.testing.assert_array_equal(q.theta_init, p.theta_init)
    assert dumps(dataset_to_json(q)) == text
    assert q.objective().value(p.theta_init) == p.objective().value(p.theta_init)


def test_dataset_json_missing_keys():
    with pytest.raises(ValueError):
        dataset_from_json({"model_kind": "TFIM"})
