import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import numeric_grad
from kcgg import autodiff as ad
from kcgg.kinematics import (
    ArmSpec,
    ArmSpecError,
    ArmState,
    clamp_to_limits,
    fk,
    fk_jacobian,
    forward_kinematics,
    within_limits,
)

TWO = ArmSpec((1.0, 1.0), (0.0, 0.0), ((-3.2, 3.2), (-3.2, 3.2)), (5.0, 5.0))
ARM = ArmSpec()
angles = arrays(np.float64, 3, elements=st.floats(-np.pi, np.pi))


@pytest.mark.parametrize(
    "q, expected", [((0.0, 0.0), (2.0, 0.0)), ((np.pi / 2, 0.0), (0.0, 2.0)), ((0.0, np.pi / 2), (1.0, 1.0))]
)
def test_two_link_positions(q, expected):
    assert np.allclose(fk(TWO, q), expected, atol=1e-12)
    node = forward_kinematics(TWO, ad.constant(np.array([q])))
    assert np.allclose(node.value[0], expected, atol=1e-12)


def test_two_link_jacobian_at_extension():
    assert np.allclose(fk_jacobian(TWO, [0.0, 0.0]), [[0.0, 0.0], [2.0, 1.0]], atol=1e-12)


def test_wrong_dimension_rejected():
    with pytest.raises(ad.DimensionError):
        fk(TWO, [0.0, 0.0, 0.0])
    with pytest.raises(ad.DimensionError):
        fk_jacobian(ARM, [0.0, 0.0])
    with pytest.raises(ad.DimensionError):
        forward_kinematics(ARM, ad.constant(np.zeros((1, 2))))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"link_lengths": (0.5, 0.0, 0.4)},
        {"link_lengths": (0.5, -0.1, 0.4)},
        {"joint_limits": ((1.0, -1.0), (-2.0, 2.0), (-2.0, 2.0))},
        {"velocity_limits": (1.0, 1.0)},
    ],
)
def test_invalid_arm_specs(kwargs):
    with pytest.raises(ArmSpecError):
        ArmSpec(**kwargs)


def test_arm_spec_dict_round_trip():
    assert ArmSpec.from_dict(ARM.to_dict()) == ARM
    with pytest.raises(ArmSpecError):
        ArmSpec.from_dict({**ARM.to_dict(), "mass": 1.0})


@given(angles)
def test_reach_bound(q):
    assert np.linalg.norm(fk(ARM, q) - np.array(ARM.base_position)) <= ARM.reach + 1e-12


@given(angles, st.integers(0, 2))
def test_periodic_in_each_joint(q, j):
    shifted = q.copy()
    shifted[j] += 2 * np.pi
    assert np.allclose(fk(ARM, q), fk(ARM, shifted), atol=1e-12, rtol=0)


def _autodiff_jacobian(spec, q):
    rows = []
    for k in range(2):
        leaf = ad.variable(q[None, :])
        pick = np.zeros((2, 1))
        pick[k, 0] = 1.0
        ad.backward(ad.sum(ad.matmul(forward_kinematics(spec, leaf), ad.constant(pick))))
        rows.append(leaf.grad[0])
    return np.array(rows)


def test_jacobian_matches_autodiff_on_random_configurations():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.uniform(-np.pi, np.pi, 3)
        assert np.max(np.abs(fk_jacobian(ARM, q) - _autodiff_jacobian(ARM, q))) <= 1e-10


@given(angles)
def test_jacobian_matches_finite_differences(q):
    J = fk_jacobian(ARM, q)
    for k in range(2):
        num = numeric_grad(lambda v: fk(ARM, v)[k], q, h=1e-6)
        assert np.all(np.abs(J[k] - num) <= np.maximum(1e-9, 1e-6 * np.abs(num)))


def test_clamp_to_limits():
    inside = ArmState([0.1, -0.2, 0.3], [1.0, -1.0, 0.0])
    out = clamp_to_limits(ARM, inside)
    assert np.array_equal(out.q, inside.q) and np.array_equal(out.qdot, inside.qdot)
    hi = ARM.joint_limits[0][1]
    vl = ARM.velocity_limits[1]
    out = clamp_to_limits(ARM, ArmState([hi + 0.1, 0.0, 0.0], [0.0, -(vl + 1), 0.0]))
    assert out.q[0] == hi and out.qdot[1] == -vl
    assert within_limits(ARM, out.q, out.qdot)


def test_arm_state_lengths_must_agree():
    with pytest.raises(ad.DimensionError):
        ArmState([0.0, 0.0, 0.0], [0.0, 0.0])
