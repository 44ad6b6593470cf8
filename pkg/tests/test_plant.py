import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from chf.errors import DomainExit, IntegrationDiverged, InvalidOrder, ShapeError
from chf.plant import (
    Box, HigherOrderSystem, Plant, affine_plant, arm_plant, first_order_plant,
    harmonic_oscillator, inverse_dynamics_exact, linear_plant, plant_from_dict,
    reduce_order, simulate, step_plant,
)


def scalar_plant(f):
    return Plant(dim=1, dynamics=f, control_dim=1)


def test_constant_velocity_step():
    p = scalar_plant(lambda x, u: u)
    assert step_plant(p, [0.0], [1.0], 0.1)[0] == pytest.approx(0.1, abs=1e-15)


def test_zero_dynamics_is_fixed_point():
    p = scalar_plant(lambda x, u: np.zeros_like(x))
    assert step_plant(p, [3.7], [0.0], 1.0)[0] == 3.7


def test_decay_matches_exponential():
    p = scalar_plant(lambda x, u: -x)
    xs = simulate(p, [1.0], lambda t, x: np.zeros(1), 1e-3, 1000)
    assert abs(xs[-1, 0] - np.exp(-1.0)) < 1e-6


def test_rk4_is_fourth_order():
    p = scalar_plant(lambda x, u: -x)
    errs = []
    for dt in (0.2, 0.1, 0.05):
        n = int(round(2.0 / dt))
        xs = simulate(p, [1.0], lambda t, x: np.zeros(1), dt, n)
        errs.append(abs(xs[-1, 0] - np.exp(-2.0)))
    assert errs[0] / errs[1] >= 8
    assert errs[1] / errs[2] >= 8


def test_nonpositive_dt_rejected():
    p = scalar_plant(lambda x, u: u)
    with pytest.raises(ValueError):
        step_plant(p, [0.0], [1.0], 0.0)


def test_domain_exit_and_margin():
    p = Plant(dim=1, dynamics=lambda x, u: u, control_dim=1, domain=Box([-1.0], [1.0]))
    # inside the 10% tolerance band
    step_plant(p, [1.0], [1.0], 0.1)
    with pytest.raises(DomainExit):
        step_plant(p, [1.0], [1.0], 0.5)


def test_non_finite_state_raises():
    p = scalar_plant(lambda x, u: np.full_like(x, np.inf))
    with pytest.raises(IntegrationDiverged):
        step_plant(p, [0.0], [0.0], 0.1)


def test_identity_inverse_dynamics():
    p = linear_plant(np.eye(2), np.zeros(2))
    assert np.array_equal(inverse_dynamics_exact(p, np.zeros(2), [1.0, 2.0]), [1.0, 2.0])


def test_zero_momentum_inverse_dynamics():
    p = linear_plant(2 * np.eye(2), np.ones(2))
    assert np.array_equal(inverse_dynamics_exact(p, np.zeros(2), [0.0, 0.0]), [1.0, 1.0])


def test_inverse_dynamics_shape_error():
    p = linear_plant(np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        inverse_dynamics_exact(p, np.zeros(2), [1.0, 2.0, 3.0])


def random_sign_proper_plant(rng):
    base = rng.normal(size=(3, 3))
    skew = rng.normal(size=(3, 3))
    skew = skew - skew.T

    def B_field(x):
        return base @ base.T + np.eye(3) * (1.0 + np.sin(x[0]) ** 2) + 0.3 * skew

    return affine_plant(B_field, lambda x: np.cos(x), 3, Box.cube(3, 2.0))


def test_inverse_round_trip_random_plant():
    rng = np.random.default_rng(11)
    p = random_sign_proper_plant(rng)
    for x in p.domain.sample(rng, 100):
        xdot = rng.normal(size=3)
        back = p.dynamics(x, inverse_dynamics_exact(p, x, xdot))
        assert np.max(np.abs(back - xdot)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_arm_round_trip_property(x, xdot):
    p = arm_plant()
    x, xdot = np.array(x), np.array(xdot)
    back = p.dynamics(x, inverse_dynamics_exact(p, x, xdot))
    assert np.allclose(back, xdot, atol=1e-9)


def test_reduced_oscillator_matches_cosine():
    p = harmonic_oscillator()
    steps = 1000
    xs = simulate(p, [1.0, 0.0], lambda t, x: np.zeros(1), np.pi / steps, steps)
    assert abs(xs[-1, 0] - np.cos(np.pi)) < 1e-4


def test_order_one_reduction_is_direct_construction():
    rhs = lambda q: -2.0 * q + 1.0
    reduced = reduce_order(HigherOrderSystem(1, 2, rhs))
    direct = first_order_plant(rhs, 2)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x, u = rng.normal(size=2), rng.normal(size=2)
        assert np.array_equal(reduced.dynamics(x, u), direct.dynamics(x, u))


def test_third_order_polynomial():
    sys = HigherOrderSystem(3, 1, lambda q, qd, qdd: np.zeros(1))
    p = reduce_order(sys)
    xs = simulate(p, [0.0, 0.0, 2.0], lambda t, x: np.zeros(1), 0.01, 200)
    t = 0.01 * np.arange(201)
    assert np.max(np.abs(xs[:, 0] - t ** 2)) < 1e-6


def test_order_zero_rejected():
    with pytest.raises(InvalidOrder):
        reduce_order(HigherOrderSystem(0, 1, lambda: np.zeros(1)))


def test_reduction_matches_direct_high_order_integration():
    # Van der Pol: direct second-order form integrated by an adaptive solver
    mu = 0.7
    rhs = lambda q, qd: mu * (1 - q ** 2) * qd - q
    p = reduce_order(HigherOrderSystem(2, 1, rhs))
    xs = simulate(p, [1.5, 0.0], lambda t, x: np.zeros(1), 1e-3, 5000)
    ref = solve_ivp(lambda t, y: [y[1], mu * (1 - y[0] ** 2) * y[1] - y[0]], (0, 5), [1.5, 0.0],
                    t_eval=np.linspace(0, 5, 5001), rtol=1e-12, atol=1e-12, method="DOP853")
    assert np.max(np.abs(xs[:, 0] - ref.y[0])) < 1e-6


def test_plant_from_dict_families():
    p = plant_from_dict({"family": "linear", "params": {"B": [[2.0]], "b": [1.0]},
                         "domain": [[-1.0], [1.0]]})
    assert inverse_dynamics_exact(p, [0.0], [1.0])[0] == 3.0
    assert p.domain.contains(np.array([0.5]))
    with pytest.raises(ValueError):
        plant_from_dict({"family": "nope"})
