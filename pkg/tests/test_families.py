import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbirr.errors import DivergedFit, InvalidParameterError
from sbirr.families import (
    GradientField,
    LotkaVolterra,
    ParamVector,
    Repressilator,
    Vortex,
    Zero,
    eval_drift,
    fit_mle,
    get_family,
    loss_and_grad,
    second_projection_loss,
    stack_increments,
)
from sbirr.sde import Trajectory, rng_stream, simulate_paths

from oracles import fd_gradient_error, oracle_loss

LV_TRUE = (1.0, 0.4, 0.1, 0.4)


def toy_trajs(d, n=3, steps=6, seed=0, dt=0.05, scale=1.0):
    rng = np.random.default_rng(seed)
    return [Trajectory(0.0, dt, 1.0 + scale * rng.random((steps + 1, d))) for _ in range(n)]


# ------------------------------------------------------------ evaluation


def test_lotka_volterra_hand_value():
    np.testing.assert_allclose(eval_drift(LotkaVolterra(), LV_TRUE, [5.0, 4.0]), [-3.0, 0.4], atol=1e-12)


def test_repressilator_hand_value():
    got = eval_drift(Repressilator(), (10.0, 3.0, 1.0, 1.0), [1.0, 1.0, 2.0])
    np.testing.assert_allclose(got, [10 / 9 - 1, 4.0, 3.0], atol=1e-12)
    assert got[0] == pytest.approx(0.1111, abs=1e-4)


def test_repressilator_negative_states_finite():
    got = eval_drift(Repressilator(), (10.0, 2.5, 1.0, 1.0), [-0.3, 0.2, -1.0])
    assert np.all(np.isfinite(got))


def test_vortex_center_and_invariant():
    fam = Vortex()
    theta = (0.5, -1.0, 2.0, 0.3)
    np.testing.assert_array_equal(eval_drift(fam, theta, [0.5, -1.0]), [0.0, 0.0])
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 2))
    b = eval_drift(fam, theta, x)
    # the conserved quadratic has zero time derivative along the field
    grad_q = np.column_stack([2 * (x[:, 0] - 0.5), 2 * math.exp(-0.3) * (x[:, 1] + 1.0)])
    np.testing.assert_allclose(np.sum(grad_q * b, axis=1), 0.0, atol=1e-12)


def test_vortex_divergence_free():
    fam = Vortex()
    theta = np.array([0.2, 0.1, 1.3, -0.4])
    rng = np.random.default_rng(1)
    h = 1e-5
    for x in rng.normal(size=(10, 2)):
        div = 0.0
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            div += (eval_drift(fam, theta, x + e)[k] - eval_drift(fam, theta, x - e)[k]) / (2 * h)
        assert abs(div) <= 1e-8


def test_dimension_mismatch():
    with pytest.raises(InvalidParameterError):
        eval_drift(LotkaVolterra(), LV_TRUE, [1.0, 2.0, 3.0])
    with pytest.raises(InvalidParameterError):
        get_family("lotka_volterra", 3)
    with pytest.raises(InvalidParameterError):
        get_family("nope")
    with pytest.raises(InvalidParameterError):
        LotkaVolterra().params([1.0, 2.0])


def test_param_vector_json_roundtrip():
    pv = LotkaVolterra().params(LV_TRUE)
    back = ParamVector.from_json(pv.to_json())
    assert back == pv
    with pytest.raises(InvalidParameterError):
        ParamVector("x", (1.0, math.nan))


def test_gradient_field_is_gradient():
    fam = GradientField(2)
    theta = fam.initial_params(seed=3).as_array()
    rng = np.random.default_rng(2)
    h = 1e-6
    for x in rng.normal(size=(8, 2)):
        jac = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            jac[:, k] = (eval_drift(fam, theta, x + e) - eval_drift(fam, theta, x - e)) / (2 * h)
        np.testing.assert_allclose(jac, jac.T, atol=1e-4)
        # drift is minus the gradient of the potential
        g = np.array(
            [(fam.potential(theta, x + e) - fam.potential(theta, x - e)).item() / (2 * h) for e in np.eye(2) * h]
        )
        np.testing.assert_allclose(eval_drift(fam, theta, x), -g, atol=1e-5)


def test_gradient_field_init_deterministic():
    a = GradientField(3).initial_params(seed=5)
    b = GradientField(3).initial_params(seed=5)
    c = GradientField(3).initial_params(seed=6)
    assert a == b and a != c
    n = 3 * 128 + 128 + 128 * 64 + 64 + 64 * 64 + 64 + 64 + 1
    assert len(a) == n == GradientField(3).n_params


# ------------------------------------------------------------------ loss


@pytest.mark.parametrize(
    "family,theta",
    [
        (LotkaVolterra(), (0.9, 0.3, 0.2, 0.5)),
        (Repressilator(), (8.0, 2.5, 1.2, 0.9)),
        (Vortex(), (0.1, -0.2, 1.5, 0.2)),
        (Zero(2), ()),
    ],
)
def test_second_projection_loss_oracle(family, theta):
    d = family.dim or 2
    trajs = toy_trajs(d, n=3, steps=5)
    got = second_projection_loss(family, theta, trajs, 0.1)
    want = oracle_loss(family, theta, trajs, 0.1)
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_loss_zero_at_truth_on_noiseless_paths():
    fam = LotkaVolterra()
    paths = simulate_paths(fam.bind(LV_TRUE), np.array([[5.0, 4.0], [4.0, 3.0]]), 0.0, 50, 0.01, 0.0)
    trajs = [Trajectory(0.0, 0.01, paths[:, i]) for i in range(2)]
    assert second_projection_loss(fam, LV_TRUE, trajs, 0.1) == pytest.approx(0.0, abs=1e-20)
    const = [Trajectory(0.0, 0.01, np.ones((5, 2)))]
    assert second_projection_loss(Zero(2), (), const, 0.1) == 0.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradients_match_finite_differences_parametric(seed):
    rng = np.random.default_rng(seed)
    for family, d in ((LotkaVolterra(), 2), (Repressilator(), 3), (Vortex(), 2)):
        z = rng.uniform(0.2, 1.5, size=family.n_params)
        assert fd_gradient_error(family, z, toy_trajs(d, seed=seed), 0.1) <= 1e-4


def test_gradient_field_gradient_matches_finite_differences():
    fam = GradientField(2)
    z = fam.initial_params(seed=1).as_array()
    trajs = toy_trajs(2, n=2, steps=4, seed=3)
    x, dx, dt = stack_increments(trajs)
    _, grad = fam.loss_grad(z, x, dx, dt, 0.1)
    rng = np.random.default_rng(0)
    # a random sample of coordinates from every layer
    idx = np.unique(np.concatenate([rng.choice(z.size, 40, replace=False), [z.size - 2, z.size - 1]]))
    for i in idx:
        h = 1e-5 * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd = (fam.loss_grad(zp, x, dx, dt, 0.1)[0] - fam.loss_grad(zm, x, dx, dt, 0.1)[0]) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), np.max(np.abs(grad)) * 1e-2, 1e-10)


def test_loss_and_grad_wraps_internal_parameters():
    fam = Repressilator()
    trajs = toy_trajs(3)
    loss, _ = loss_and_grad(fam, (8.0, 2.5, 1.2, 0.9), trajs, 0.1)
    assert loss == pytest.approx(second_projection_loss(fam, (8.0, 2.5, 1.2, 0.9), trajs, 0.1), rel=1e-12)
    np.testing.assert_allclose(fam.from_internal(fam.to_internal([8.0, 2.5, 1.2, 0.9])), [8.0, 2.5, 1.2, 0.9])


# ------------------------------------------------------------------- fit


def _lv_paths(gamma, n, steps=200, seed=0):
    fam = LotkaVolterra()
    rng = rng_stream(seed)
    x0 = np.column_stack([rng.uniform(2, 6, n), rng.uniform(2, 6, n)])
    paths = simulate_paths(fam.bind(LV_TRUE), x0, 0.0, steps, 0.01, gamma, rng)
    return [Trajectory(0.0, 0.01, paths[:, i]) for i in range(n)]


@pytest.mark.parametrize("method", ["gd", "lbfgs"])
def test_fit_recovers_noiseless_lv(method):
    fam = LotkaVolterra()
    trajs = _lv_paths(0.0, 20)
    init = fam.params(np.array(LV_TRUE) + 0.1)
    kw = dict(lr=0.05, epochs=2000) if method == "gd" else dict(epochs=200)
    theta = fit_mle(fam, init, trajs, 0.1, method=method, **kw)
    np.testing.assert_allclose(theta.values, LV_TRUE, rtol=0.01)


def test_gd_loss_trace_non_increasing():
    fam = LotkaVolterra()
    trajs = _lv_paths(0.1, 10)
    trace = []
    theta = fit_mle(fam, fam.params([0.5] * 4), trajs, 0.1, lr=0.05, epochs=30, callback=lambda e, l: trace.append(l))
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert second_projection_loss(fam, theta, trajs, 0.1) <= trace[0]


def test_lbfgs_never_worse_than_init():
    fam = Vortex()
    trajs = toy_trajs(2, n=4, steps=20, seed=8, scale=0.1)
    init = fam.initial_params(np.concatenate([t.states for t in trajs]))
    theta = fit_mle(fam, init, trajs, 0.1, epochs=5, method="lbfgs")
    assert second_projection_loss(fam, theta, trajs, 0.1) <= second_projection_loss(fam, init, trajs, 0.1)


def test_vortex_fit_on_static_paths_gives_zero_scale():
    fam = Vortex()
    trajs = [Trajectory(0.0, 0.01, np.tile(p, (30, 1))) for p in np.random.default_rng(0).normal(size=(5, 2))]
    theta = fit_mle(fam, fam.params([0.0, 0.0, 0.5, 0.0]), trajs, 0.1, epochs=100, method="lbfgs")
    assert abs(theta.values[2]) < 1e-4


def test_fit_is_deterministic():
    fam = GradientField(2)
    trajs = toy_trajs(2, n=2, steps=10)
    a = fit_mle(fam, fam.initial_params(seed=0), trajs, 0.1, lr=0.01, epochs=3)
    b = fit_mle(fam, fam.initial_params(seed=0), trajs, 0.1, lr=0.01, epochs=3)
    assert a == b


def test_fit_divergence_raises():
    fam = LotkaVolterra()
    trajs = [Trajectory(0.0, 0.01, np.full((4, 2), 1e200))]
    with pytest.raises(DivergedFit) as info:
        fit_mle(fam, fam.params(LV_TRUE), trajs, 0.1)
    assert info.value.epoch == 0


def test_fit_rejects_unknown_method():
    fam = LotkaVolterra()
    with pytest.raises(InvalidParameterError):
        fit_mle(fam, fam.params(LV_TRUE), toy_trajs(2), 0.1, method="adam")
