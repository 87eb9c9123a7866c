import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmpclab.dynamics import (
    ExtendedState,
    IntegrationOverflowError,
    ModelSpec,
    double_integrator,
    extended_step,
    linear_model,
    rk4_step,
    rollout,
    step_jacobians,
    rollout_with_stages,
)
from nmpclab.pvtol import pvtol_fc

TAU = 0.1


def decay_model(tau=TAU):
    return linear_model([[-1.0]], [[0.0]], [-1.0], [1.0], tau, "decay")


def zero_model():
    def fc(x, u):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (3,))

    def jac(x, u):
        lead = np.shape(x)[:-1]
        return np.zeros(lead + (3, 3)), np.zeros(lead + (3, 1))

    return ModelSpec("zero", 3, 1, fc, jac, np.array([-1.0]), np.array([1.0]), TAU)


def test_zero_field_leaves_state_unchanged():
    x = np.array([0.3, -1.2, 7.0])
    assert np.array_equal(rk4_step(zero_model(), x, np.array([0.4])), x)


def test_hover_is_fixed(pvtol):
    x = np.zeros(6)
    assert np.array_equal(rk4_step(pvtol, x, np.array([1.0, 0.0])), x)


def test_decay_matches_rk4_polynomial():
    h = TAU
    poly = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
    x1 = rk4_step(decay_model(), np.array([1.0]), np.array([0.0]))[0]
    assert x1 == pytest.approx(poly, abs=1e-15)


def test_decay_close_to_exponential():
    # local truncation error of one RK4 step is h^5/120 + O(h^6)
    h = TAU
    x1 = rk4_step(decay_model(), np.array([1.0]), np.array([0.0]))[0]
    err = abs(x1 - math.exp(-h))
    assert err <= h**5 / 120 * (1 + h)
    assert err == pytest.approx(h**5 / 120, rel=0.1)


def test_decay_error_shrinks_with_fifth_power():
    errs = [abs(rk4_step(decay_model(h), np.array([1.0]), np.array([0.0]))[0] - math.exp(-h)) for h in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(32, rel=0.05)


def test_overflow_reports_step():
    blowup = linear_model([[1e200]], [[0.0]], [-1.0], [1.0], 1.0)
    with pytest.raises(IntegrationOverflowError) as info:
        rk4_step(blowup, np.array([1e200]), np.array([0.0]), step=7)
    assert info.value.step == 7


def test_extended_step_fixed_point(pvtol, reference_pair):
    z = extended_step(pvtol, reference_pair, np.array([1.0, 0.0]))
    assert np.array_equal(z.x, reference_pair.x)
    assert np.array_equal(z.u, reference_pair.u)


def test_extended_step_only_replaces_control(pvtol, reference_pair):
    z = extended_step(pvtol, reference_pair, np.array([0.3, -0.2]))
    assert np.array_equal(z.x, reference_pair.x)
    assert np.array_equal(z.u, [0.3, -0.2])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=6, max_size=6),
    st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2),
    st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2),
)
def test_extended_step_control_bitwise(pvtol, x, u, u_next):
    z = extended_step(pvtol, ExtendedState(x, u), np.array(u_next))
    assert z.u.tobytes() == np.array(u_next, dtype=float).tobytes()


def test_rollout_steady_sequence(pvtol, reference_pair):
    traj = rollout(pvtol, reference_pair, np.tile([1.0, 0.0], (15, 1)))
    assert len(traj) == 16
    assert np.all(traj.stacked() == reference_pair.as_vector())


def test_rollout_single_step(pvtol, rng):
    z = ExtendedState(rng.normal(size=6), [1.0, 0.1])
    seq = np.array([[0.8, -0.2]])
    traj = rollout(pvtol, z, seq)
    nxt = extended_step(pvtol, z, seq[0])
    assert len(traj) == 2
    assert np.array_equal(traj[0].as_vector(), z.as_vector())
    assert np.array_equal(traj[1].as_vector(), nxt.as_vector())


def test_rollout_semigroup(pvtol, rng):
    z = ExtendedState(rng.normal(scale=0.3, size=6), [1.0, 0.0])
    s1 = rng.uniform([-1.5, -0.5], [1.5, 0.5], size=(6, 2))
    s2 = rng.uniform([-1.5, -0.5], [1.5, 0.5], size=(9, 2))
    whole = rollout(pvtol, z, np.vstack([s1, s2]))
    first = rollout(pvtol, z, s1)
    second = rollout(pvtol, first.last, s2)
    joined = np.vstack([first.stacked(), second.stacked()[1:]])
    assert np.allclose(whole.stacked(), joined, atol=1e-12, rtol=0)


def test_control_pass_through(pvtol, rng):
    seq = rng.uniform([-1.5, -0.5], [1.5, 0.5], size=(15, 2))
    traj = rollout(pvtol, ExtendedState(np.zeros(6), [1.0, 0.0]), seq)
    for i in range(15):
        assert traj[i + 1].u.tobytes() == seq[i].tobytes()


def test_rollout_rejects_bad_shapes(pvtol):
    z = ExtendedState(np.zeros(6), [1.0, 0.0])
    with pytest.raises(ValueError):
        rollout(pvtol, z, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        rollout(pvtol, z, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        rollout(pvtol, ExtendedState(np.zeros(5), [1.0, 0.0]), np.zeros((3, 2)))


def test_extended_state_rejects_nan():
    with pytest.raises(ValueError):
        ExtendedState([0.0, np.nan], [1.0])


def test_step_jacobians_match_finite_differences(pvtol, rng):
    x = rng.normal(scale=0.5, size=6)
    u = np.array([1.1, 0.3])
    _, _, stages = rollout_with_stages(pvtol, x, u, u[None, :])
    Phi, Gam = step_jacobians(pvtol, stages[:1], u[None, :])
    h = 1e-6
    fd_x = np.column_stack([(rk4_step(pvtol, x + h * e, u) - rk4_step(pvtol, x - h * e, u)) / (2 * h) for e in np.eye(6)])
    fd_u = np.column_stack([(rk4_step(pvtol, x, u + h * e) - rk4_step(pvtol, x, u - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(Phi[0], fd_x, atol=1e-8)
    assert np.allclose(Gam[0], fd_u, atol=1e-8)


def test_double_integrator_discretization_is_exact():
    # RK4 is exact for polynomial flows of degree <= 4
    model = double_integrator(0.1)
    x1 = rk4_step(model, np.array([0.5, -1.0]), np.array([0.7]))
    assert np.allclose(x1, [0.5 - 0.1 + 0.5 * 0.7 * 0.01, -1.0 + 0.07], atol=1e-15)


def test_model_spec_validation():
    with pytest.raises(ValueError):
        linear_model([[0.0]], [[1.0]], [1.0], [-1.0], 0.1)
    with pytest.raises(ValueError):
        linear_model([[0.0]], [[1.0]], [-1.0], [1.0], 0.0)


@pytest.mark.parametrize("theta", [0.0, 0.3, -1.1])
def test_pvtol_vector_field_broadcast_matches_scalar(theta):
    x = np.array([0.1, 0.2, theta, 0.3, -0.2, 0.05])
    u = np.array([1.2, -0.3])
    batch = pvtol_fc(0.4, np.stack([x, x]), np.stack([u, u]))
    assert np.allclose(batch[0], pvtol_fc(0.4, x, u), atol=1e-15)
