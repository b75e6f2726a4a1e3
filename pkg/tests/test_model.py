import json

import numpy as np
import pytest

from pdelearn.datagen import (
    InitSpec,
    sample_initial_condition,
    solve_linear_convdiff,
    default_convection_x,
    default_convection_y,
)
from pdelearn.fields import Boundary, Field, Grid2D, field_from_function
from pdelearn.model import (
    BlowUpError,
    FilterMode,
    ModelConfig,
    StepModel,
    derivative_orders,
    load_checkpoint,
    save_checkpoint,
)

TRUE_LINEAR = {
    (1, 0): default_convection_x,
    (0, 1): default_convection_y,
    (2, 0): lambda X, Y: 0.2,
    (0, 2): lambda X, Y: 0.3,
}


def small_model(mode=FilterMode.CONSTRAINED, kind="linear", n=3, coef=4,
                grid=None, max_order=2):
    grid = grid or Grid2D(8, 8, boundary=(Boundary.PERIODIC if kind == "linear"
                                          else Boundary.DIRICHLET))
    return StepModel(ModelConfig(kind, grid, filter_size=n, max_order=max_order,
                                 mode=mode, coef_points=coef))


def test_derivative_orders_enumeration():
    assert derivative_orders(2) == [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert len(derivative_orders(4)) == 14


def test_config_validation():
    g = Grid2D(8, 8)
    with pytest.raises(ValueError):
        ModelConfig("weird", g)
    with pytest.raises(ValueError):
        ModelConfig("linear", g, filter_size=4)
    with pytest.raises(ValueError):
        ModelConfig("linear", g, filter_size=3, max_order=3)
    with pytest.raises(ValueError):
        ModelConfig("nonlinear", g, max_order=4)


def test_parameter_count_ordering():
    counts = {}
    for mode in FilterMode:
        m = small_model(mode=mode)
        counts[mode] = m.n_params
        groups = m.param_count_breakdown()
        assert groups["total"] == m.n_params
    assert counts[FilterMode.FREED] > counts[FilterMode.CONSTRAINED]
    assert counts[FilterMode.CONSTRAINED] > counts[FilterMode.FROZEN]


def test_identity_dynamics():
    m = small_model()
    theta = m.default_params()  # zero coefficients, delta averages
    u = Field(m.config.grid, np.random.default_rng(0).standard_normal((8, 8)))
    out = m.block_forward(u, theta)
    np.testing.assert_array_equal(out.values, u.values)
    final = m.net_forward(u, theta, 5)
    np.testing.assert_array_equal(final.values, u.values)


def test_net_forward_composes_block_forward():
    m = small_model()
    rng = np.random.default_rng(1)
    theta = m.default_params() + 0.01 * rng.standard_normal(m.n_params)
    u = Field(m.config.grid, rng.standard_normal((8, 8)))
    two = m.net_forward(u, theta, 2)
    composed = m.block_forward(m.block_forward(u, theta), theta)
    np.testing.assert_allclose(two.values, composed.values, atol=1e-14)

    one = m.net_forward(u, theta, 1)
    np.testing.assert_array_equal(one.values, m.block_forward(u, theta).values)


def test_shared_parameters_have_single_layout():
    m = small_model()
    spans = sorted((sl.start, sl.stop) for sl in m.layout.values())
    covered = 0
    for start, stop in spans:
        assert start == covered
        covered = stop
    assert covered == m.n_params  # exactly one copy of every parameter


def test_frozen_true_one_step_matches_reference():
    # frozen stencils + true coefficients vs the spectral reference over one
    # dt: the gap is O(dt^2) + O(dx^2).  With 4th-order stencils on smooth
    # data the dt^2 part dominates, so stepping twice with dt/2 must cut the
    # error roughly in half.
    g = Grid2D(50, 50)
    u0 = sample_initial_condition(g, InitSpec(n_max=3), np.random.default_rng(2))
    ref = solve_linear_convdiff(u0, 0.01, dt=0.01).fields[-1]
    errs = {}
    for dt, steps in ((0.01, 1), (0.005, 2)):
        m = StepModel(ModelConfig("linear", g, filter_size=5, max_order=2,
                                  mode=FilterMode.FROZEN, coef_points=26, dt=dt))
        theta = m.set_coefficients_from_functions(m.default_params(), TRUE_LINEAR)
        out = m.net_forward(u0, theta, steps)
        errs[dt] = np.abs(out.values - ref.values).max()
    assert errs[0.01] < 0.06
    assert errs[0.005] < 0.7 * errs[0.01]


def test_frozen_true_twenty_steps_normalized_error():
    g = Grid2D(50, 50)
    m = StepModel(ModelConfig("linear", g, filter_size=5, max_order=2,
                              mode=FilterMode.FROZEN, coef_points=26))
    theta = m.set_coefficients_from_functions(m.default_params(), TRUE_LINEAR)
    u0 = sample_initial_condition(g, InitSpec(n_max=3), np.random.default_rng(3))
    out = m.net_forward(u0, theta, 20)
    ref = solve_linear_convdiff(u0, 0.2, dt=0.01).fields[-1]
    num = float(((out.values - ref.values) ** 2).sum())
    den = float(((ref.values - ref.values.mean()) ** 2).sum())
    assert num / den < 0.1


def test_rollout_matches_net_forward_and_truncates():
    m = small_model()
    rng = np.random.default_rng(4)
    theta = m.default_params() + 0.01 * rng.standard_normal(m.n_params)
    u = Field(m.config.grid, rng.standard_normal((8, 8)))
    traj, blown = m.rollout(u, theta, 4)
    assert blown is None
    np.testing.assert_allclose(traj.fields[-1].values,
                               m.net_forward(u, theta, 4).values, atol=1e-14)
    assert len(traj) == 5

    # identity block: constant trajectory
    traj_id, _ = m.rollout(u, m.default_params(), 3)
    for f in traj_id.fields:
        np.testing.assert_array_equal(f.values, u.values)


def test_rollout_blowup_flag():
    m = small_model(mode=FilterMode.FREED)
    theta = m.default_params()
    theta[m.layout["q0"]] = 50.0  # wildly amplifying average
    u = Field(m.config.grid, np.random.default_rng(5).standard_normal((8, 8)))
    traj, blown = m.rollout(u, theta, 300)
    assert blown is not None
    assert len(traj.fields) == blown


def test_forward_blowup_error_names_block():
    m = small_model(mode=FilterMode.FREED)
    theta = m.default_params()
    theta[m.layout["q0"]] = 50.0
    u = np.random.default_rng(6).standard_normal((1, 8, 8))
    with pytest.raises(BlowUpError) as exc:
        m.forward_batch(u, theta, 300)
    assert exc.value.block >= 1


def test_constraints_hold_for_any_parameters():
    m = small_model(mode=FilterMode.CONSTRAINED, n=5, max_order=2,
                    grid=Grid2D(12, 12))
    rng = np.random.default_rng(7)
    theta = rng.standard_normal(m.n_params)
    assert m.verify_constraints(theta, tol=1e-9) == {}
    # freed filters generically violate the patterns
    mf = small_model(mode=FilterMode.FREED, n=5, max_order=2,
                     grid=Grid2D(12, 12))
    theta_f = rng.standard_normal(mf.n_params)
    assert mf.verify_constraints(theta_f, tol=1e-9) != {}


def test_frozen_mode_has_classical_stencils():
    from pdelearn.moments import frozen_filter

    m = small_model(mode=FilterMode.FROZEN, n=3)
    W = m.filters(m.default_params())
    np.testing.assert_allclose(W[0], frozen_filter((0, 0), 3), atol=1e-14)
    for slot, w in zip(m.slots, W):
        if slot.order is not None:
            np.testing.assert_allclose(w, frozen_filter(slot.order, 3),
                                       atol=1e-14)


@pytest.mark.parametrize("kind,mode,depth", [
    ("linear", FilterMode.CONSTRAINED, 1),
    ("linear", FilterMode.CONSTRAINED, 3),
    ("linear", FilterMode.FREED, 2),
    ("nonlinear", FilterMode.CONSTRAINED, 2),
])
def test_gradient_matches_finite_differences(kind, mode, depth):
    m = small_model(mode=mode, kind=kind)
    rng = np.random.default_rng(8)
    theta = m.default_params() + 0.01 * rng.standard_normal(m.n_params)
    inputs = rng.standard_normal((2, 8, 8))
    labels = rng.standard_normal((2, 8, 8))

    def loss(t):
        out, _ = m.forward_batch(inputs, t, depth)
        return float(((out - labels) ** 2).sum())

    out, states = m.forward_batch(inputs, theta, depth, keep_states=True)
    grad = m.backward_batch(states, theta, 2.0 * (out - labels))
    fd = np.zeros_like(grad)
    for k in range(m.n_params):
        e = np.zeros_like(theta)
        h = 1e-6 * max(1.0, abs(theta[k]))
        e[k] = h
        fd[k] = (loss(theta + e) - loss(theta - e)) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(grad) < 1e-6


def test_gradient_zero_at_perfect_fit():
    m = small_model()
    rng = np.random.default_rng(9)
    theta = m.default_params() + 0.01 * rng.standard_normal(m.n_params)
    inputs = rng.standard_normal((2, 8, 8))
    out, states = m.forward_batch(inputs, theta, 2, keep_states=True)
    grad = m.backward_batch(states, theta, np.zeros_like(out))
    np.testing.assert_array_equal(grad, 0.0)


def test_nonlinear_zero_is_fixed_point_with_fitted_source():
    m = small_model(kind="nonlinear")
    theta = m.default_params()
    u_fit = np.linspace(m.source.lo, m.source.hi, 4001)
    theta[m.layout["source"]] = m.source.fit(u_fit, 15.0 * np.sin(u_fit))
    u = Field(m.config.grid, np.zeros((8, 8)))
    out = m.block_forward(u, theta)
    assert np.abs(out.values).max() < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(mode=FilterMode.CONSTRAINED, kind="nonlinear")
    rng = np.random.default_rng(10)
    theta = m.default_params() + rng.standard_normal(m.n_params)
    p = tmp_path / "ck.json"
    save_checkpoint(p, m, theta, 3, extra={"loss": 1.25})
    m2, theta2, n_blocks, extra = load_checkpoint(p)
    assert n_blocks == 3
    assert extra["loss"] == 1.25
    assert m2.config == m.config
    np.testing.assert_array_equal(theta2, theta)

    save_checkpoint(p, m, theta, 3, extra={"loss": 1.25})
    again = p.read_bytes()
    save_checkpoint(p, m, theta, 3, extra={"loss": 1.25})
    assert p.read_bytes() == again  # byte-stable


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(p)


def test_sensitivities_positive_and_ordered():
    m = small_model(n=5, max_order=2, grid=Grid2D(16, 16), coef=4)
    theta = m.default_params()
    u = np.random.default_rng(11).standard_normal((4, 16, 16))
    s = m.param_sensitivities(theta, u)
    assert s.shape == (m.n_params,)
    assert (s > 0).all()
    # second-order terms are more sensitive than first-order ones
    s10 = s[m.layout["c10"]].mean()
    s20 = s[m.layout["c20"]].mean()
    assert s20 > s10
