import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadgps.cost import (CostWeights, GaussianMarginal, OfflineAugmentedCost,
                          QuadExpansion, SurrogateCost, TaskCost, TaskTargets,
                          augmented_offline_cost, fd_expand_terminal,
                          quadratize, surrogate_cost, task_cost)
from quadgps.dynamics import (QuadrotorModel, VehicleParams, from_tangent,
                              hover_controls, make_state)
from quadgps.environment import Cylinder, Environment, make_empty, signed_distance
from quadgps.policy import LinearizedPolicy

PARAMS = VehicleParams()
MODEL = QuadrotorModel(PARAMS, 0.05)
HOVER = hover_controls(PARAMS)
TARGETS = TaskTargets(velocity_mps=(0.0, 0.0, 0.0), height_m=2.0,
                      hover_action=tuple(HOVER), safe_distance_m=1.0)
CYL = Environment(cylinders=(Cylinder(0.0, 0.0, 0.5, 4.0),))
W = CostWeights()


# ---------------------------------------------------------------------------
# task cost
# ---------------------------------------------------------------------------

def test_task_cost_zero_at_targets():
    x = make_state(p=(30, 0, 2))
    assert task_cost(x, HOVER, TARGETS, CYL, W) == pytest.approx(0.0)


def test_task_cost_velocity_coefficient():
    e = np.array([0.3, -0.2, 0.1])
    x = make_state(p=(30, 0, 2), v=e)
    assert task_cost(x, HOVER, TARGETS, CYL, W) == pytest.approx(1000.0 * np.sum(e**2))


def test_task_cost_each_term():
    base = make_state(p=(30, 0, 2))
    assert task_cost(make_state(p=(30, 0, 2.5)), HOVER, TARGETS, CYL, W) == \
        pytest.approx(500.0 * 0.25)
    assert task_cost(make_state(p=(30, 0, 2), w=(0.2, 0, 0)), HOVER, TARGETS, CYL, W) == \
        pytest.approx(250.0 * 0.04)
    du = np.zeros(4)
    du[0] = 2.0
    assert task_cost(base, HOVER + du, TARGETS, CYL, W) == pytest.approx(0.5 * 4.0)
    q = np.array([math.cos(0.1), math.sin(0.1), 0, 0])
    expected = 1e4 * np.sum((q - np.array([1, 0, 0, 0]))**2)
    assert task_cost(make_state(p=(30, 0, 2), q=q), HOVER, TARGETS, CYL, W) == \
        pytest.approx(expected)


def test_task_cost_hinge_from_printed_formula():
    # place the vehicle so clearance is half the safe distance
    d = TARGETS.safe_distance_m / 2.0
    x = make_state(p=(0.5 + d, 0, 2))
    assert float(signed_distance(CYL, x[:3])) == pytest.approx(d)
    got = task_cost(x, HOVER, TARGETS, CYL, W)
    assert got == pytest.approx(1e4 * (TARGETS.safe_distance_m - d), rel=1e-12)


def test_task_cost_quaternion_sign_alignment():
    q = np.array([math.cos(0.1), 0, math.sin(0.1), 0])
    xa = make_state(p=(30, 0, 2), q=q)
    xb = make_state(p=(30, 0, 2), q=-q)
    assert task_cost(xa, HOVER, TARGETS, CYL, W) == \
        pytest.approx(task_cost(xb, HOVER, TARGETS, CYL, W))


@given(st.floats(-2.0, 2.0), st.floats(0.5, 3.5), st.floats(-1.0, 1.0))
@settings(max_examples=60)
def test_task_cost_nonnegative(vy, z, wx):
    x = make_state(p=(3.0, 1.0, z), v=(0, vy, 0), w=(wx, 0, 0))
    assert task_cost(x, HOVER, TARGETS, CYL, W) >= 0.0


def test_hinge_continuous_at_boundary():
    targets = TARGETS
    for eps in (1e-6, 1e-9):
        inside = make_state(p=(0.5 + targets.safe_distance_m - eps, 0, 2))
        outside = make_state(p=(0.5 + targets.safe_distance_m + eps, 0, 2))
        ci = task_cost(inside, HOVER, targets, CYL, W)
        co = task_cost(outside, HOVER, targets, CYL, W)
        assert abs(ci - co) < 1e4 * 4 * eps + 1e-9


# ---------------------------------------------------------------------------
# quadratize
# ---------------------------------------------------------------------------

def test_quadratize_pure_action_quadratic():
    def fn(xs, us):
        return np.sum(us**2, axis=-1)

    exp = quadratize(fn, make_state(p=(0, 0, 2)), np.zeros(4), model=MODEL)
    assert np.allclose(exp.hess[12:, 12:], 2.0 * np.eye(4), atol=1e-8)
    assert np.allclose(exp.grad, 0.0, atol=1e-8)
    assert np.allclose(exp.hess[:12, :12], 0.0, atol=1e-8)


def test_quadratize_reproduces_centered_quadratic(rng):
    # values near the expansion point are small, so the reconstruction is
    # exact to rounding
    n = 6
    L = rng.normal(size=(n, n))
    H = L @ L.T + np.eye(n)

    def fn(xs, us):
        z = np.concatenate([xs, us], axis=-1)
        return 0.5 * np.einsum("bi,ij,bj->b", z, H, z)

    class Euclid:
        tangent_dim = 4

        @staticmethod
        def from_tangent(ref, xi):
            return ref + xi

    exp = quadratize(fn, np.zeros(4), np.zeros(2), model=Euclid)
    assert np.abs(exp.hess - H).max() < 1e-10
    assert np.abs(exp.grad).max() < 1e-10


def test_task_expansion_gradient_matches_finite_differences(rng):
    task = TaskCost(CYL, TARGETS, W)
    h = 1e-6
    for _ in range(20):
        x = make_state(p=rng.uniform([-3, -3, 0.5], [3, 3, 4]),
                       v=rng.normal(size=3) * 0.5,
                       q=rng.normal(size=4), w=rng.normal(size=3) * 0.5)
        if abs(float(signed_distance(CYL, x[:3])) - TARGETS.safe_distance_m) < 1e-2:
            continue  # kink: one-sided derivatives differ
        u = HOVER + rng.normal(size=4) * 2.0
        stages, _ = task.expand_trajectory(MODEL, np.stack([x, x]), u[None, :])
        grad = stages[0].grad
        for i in rng.choice(16, size=6, replace=False):
            e = np.zeros(16)
            e[i] = h
            xp = from_tangent(x, e[:12])
            xm = from_tangent(x, -e[:12])
            fd = (task.stage_cost(xp, u + e[12:], 0)
                  - task.stage_cost(xm, u - e[12:], 0)) / (2 * h)
            assert abs(grad[i] - fd) / max(abs(fd), 1.0) < 1e-3


def test_task_expansion_hinge_inactive_region():
    task = TaskCost(CYL, TARGETS, W)
    x = make_state(p=(30, 0, 2))
    stages, _ = task.expand_trajectory(MODEL, np.stack([x, x]), HOVER[None, :])
    assert np.allclose(stages[0].grad[:3], 0.0, atol=1e-6)


def test_task_expansion_hinge_active_gauss_newton():
    task = TaskCost(CYL, TARGETS, W)
    x = make_state(p=(1.2, 0, 2))   # clearance 0.7 < 1.0
    stages, _ = task.expand_trajectory(MODEL, np.stack([x, x]), HOVER[None, :])
    # gradient points away from the obstacle (increasing x increases
    # clearance, so the cost gradient along +x is negative)
    assert stages[0].grad[0] < -1e3
    evals = np.linalg.eigvalsh(stages[0].hess[:3, :3])
    assert evals.min() > -1e-6


# ---------------------------------------------------------------------------
# offline augmented cost
# ---------------------------------------------------------------------------

def _linear_policy(T=5, action_dim=4, tangent_dim=12, ref=None):
    A = np.zeros((T, action_dim, tangent_dim))
    b = np.tile(HOVER, (T, 1))
    S = np.tile(np.eye(action_dim), (T, 1, 1))
    refs = np.tile(make_state(p=(0, 0, 2)), (T, 1)) if ref is None else ref
    return LinearizedPolicy(A, b, S, refs)


def test_augmented_equals_task_when_disabled():
    task = TaskCost(CYL, TARGETS, W)
    x = make_state(p=(2, 1, 2.3), v=(0.5, 0, 0))
    u = HOVER + 1.0
    nu = np.ones(5)
    lam = np.zeros((5, 4))
    got = augmented_offline_cost(x, u, 2, task, nu, lam)
    assert got == pytest.approx(task.stage_cost(x, u, 2))


def test_augmented_scaling_with_nu():
    task = TaskCost(CYL, TARGETS, W)
    x = make_state(p=(2, 1, 2.3), v=(0.5, 0, 0))
    u = HOVER + 1.0
    lam = np.full((5, 4), 0.3)
    c1 = augmented_offline_cost(x, u, 2, task, np.ones(5), lam)
    c2 = augmented_offline_cost(x, u, 2, task, 2.0 * np.ones(5), lam)
    assert c2 == pytest.approx(c1 / 2.0)


def test_augmented_policy_term_at_mean():
    task = TaskCost(make_empty(), TARGETS, W)
    lin = _linear_policy()
    x = make_state(p=(0, 0, 2))
    got = augmented_offline_cost(x, HOVER, 1, task, np.ones(5),
                                 np.zeros((5, 4)), policy_lin=lin, model=MODEL)
    # at the policy mean the negative log density is the normalizer only
    expected = 0.5 * math.log((2 * math.pi) ** 4)
    assert got == pytest.approx(expected, abs=1e-9)


def test_augmented_rejects_nonpositive_nu():
    task = TaskCost(make_empty(), TARGETS, W)
    with pytest.raises(ValueError):
        OfflineAugmentedCost(task, np.zeros(5), np.zeros((5, 4)))


# ---------------------------------------------------------------------------
# surrogate cost
# ---------------------------------------------------------------------------

def _marginals_and_refs(T=4, sigma=1.0):
    refs = np.tile(make_state(p=(0, 0, 2)), (T + 1, 1))
    margs = [GaussianMarginal(np.zeros(12), sigma * np.eye(12)) for _ in range(T)]
    return margs, refs


def test_surrogate_minimum_is_normalizers():
    margs, refs = _marginals_and_refs(sigma=1.0)
    lin = _linear_policy()
    cost = SurrogateCost(margs, refs, nu=np.ones(4), lam=np.zeros((4, 4)),
                         policy_lin=lin, model=MODEL, cov_reg=0.0)
    x = refs[1]
    got = cost.stage_cost(x, HOVER, 1)
    expected = (0.5 * math.log((2 * math.pi) ** 12)   # marginal normalizer
                + 0.5 * math.log((2 * math.pi) ** 4))  # policy normalizer
    assert got == pytest.approx(expected, abs=1e-9)


def test_surrogate_reduces_to_marginal_density_without_policy():
    margs, refs = _marginals_and_refs(sigma=2.0)
    cost = SurrogateCost(margs, refs, nu=np.zeros(4), lam=np.zeros((4, 4)),
                         policy_lin=None, model=MODEL, cov_reg=0.0)
    x = refs[2]
    got = cost.stage_cost(x, HOVER, 2)
    assert got == pytest.approx(0.5 * math.log(np.linalg.det(2 * np.pi * 2.0 * np.eye(12))))


def test_surrogate_displacement_quadratic():
    sigma = 1.7
    margs, refs = _marginals_and_refs(sigma=sigma)
    cost = SurrogateCost(margs, refs, nu=np.zeros(4), lam=np.zeros((4, 4)),
                         model=MODEL, cov_reg=0.0)
    delta = np.zeros(12)
    delta[1] = 0.4
    x = from_tangent(refs[1], delta)
    base = cost.stage_cost(refs[1], HOVER, 1)
    got = cost.stage_cost(x, HOVER, 1)
    assert got - base == pytest.approx(0.4**2 / (2 * sigma), rel=1e-9)


def test_surrogate_translation_consistency():
    # shifting both the frame state and the marginal mean leaves the first
    # term unchanged
    margs, refs = _marginals_and_refs(sigma=1.3)
    shift = np.zeros(12)
    shift[0] = 0.7
    margs2 = [GaussianMarginal(m.mean + shift, m.cov) for m in margs]
    c1 = SurrogateCost(margs, refs, np.zeros(4), np.zeros((4, 4)), model=MODEL)
    c2 = SurrogateCost(margs2, refs, np.zeros(4), np.zeros((4, 4)), model=MODEL)
    x = from_tangent(refs[1], np.linspace(0, 0.1, 12))
    x_shifted = from_tangent(refs[1], np.linspace(0, 0.1, 12) + shift)
    assert c2.stage_cost(x_shifted, HOVER, 1) == pytest.approx(
        c1.stage_cost(x, HOVER, 1), rel=1e-9)


def test_surrogate_first_stage_has_no_state_term():
    margs, refs = _marginals_and_refs()
    lam = np.zeros((4, 4))
    lam[0] = np.array([0.1, -0.2, 0.3, 0.0])
    cost = SurrogateCost(margs, refs, np.zeros(4), lam, model=MODEL)
    x_far = from_tangent(refs[0], np.full(12, 0.5))
    u = HOVER
    assert cost.stage_cost(x_far, u, 0) == pytest.approx(-float(u @ lam[0]))


def test_surrogate_regularizes_singular_covariance():
    margs = [GaussianMarginal(np.zeros(12), np.zeros((12, 12)))]
    refs = np.tile(make_state(p=(0, 0, 2)), (2, 1))
    cost = surrogate_cost(margs, refs, np.zeros(1), np.zeros((1, 4)),
                          model=MODEL, cov_reg=1e-6)
    val = cost.terminal_cost(refs[1])
    assert np.isfinite(val)


def test_quad_expansion_algebra():
    a = QuadExpansion(np.ones(3), np.eye(3), 1.0)
    b = QuadExpansion(np.full(3, 2.0), 2 * np.eye(3), 0.5)
    c = a + b.scaled(2.0)
    assert np.allclose(c.grad, 1.0 + 4.0)
    assert np.allclose(c.hess, 5.0 * np.eye(3))
    assert c.const == pytest.approx(2.0)
