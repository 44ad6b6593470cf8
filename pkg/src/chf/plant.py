"""First-order plants, speed fields and order reduction.

A plant is ``xdot = f(x, u)``. Plants built with :func:`affine_plant` also
carry the exact inverse dynamics ``u = B(x) xdot + b(x)``, which is what the
SDS controller's inverse-dynamics models approximate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainExit, IntegrationDiverged, InvalidOrder, ShapeError

Array = np.ndarray

DOMAIN_MARGIN = 0.10


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: Array
    hi: Array

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ShapeError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if np.any(hi < lo):
            raise ShapeError("box upper bound below lower bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim, half_width):
        return cls(-half_width * np.ones(dim), half_width * np.ones(dim))

    @property
    def dim(self):
        return self.lo.size

    def contains(self, x, margin=0.0):
        pad = margin * (self.hi - self.lo)
        return bool(np.all(x >= self.lo - pad) and np.all(x <= self.hi + pad))

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def grid(self, per_axis: int) -> Array:
        axes = [np.linspace(l, h, per_axis) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def points(self, rng: np.random.Generator, n_random: int, per_axis: int = 3) -> Array:
        """Grid corners/edges plus Monte Carlo samples."""
        return np.vstack([self.grid(per_axis), self.sample(rng, n_random)])


@dataclass(frozen=True)
class Plant:
    """First-order plant ``xdot = dynamics(x, u)``.

    ``B_field``/``b_field`` are the exact inverse dynamics; they are ``None``
    for plants whose inverse is not affine in the momentum (e.g. reduced
    higher-order systems, where the control only reaches the top block).
    """

    dim: int
    dynamics: Callable[[Array, Array], Array]
    control_dim: int
    B_field: Optional[Callable[[Array], Array]] = None
    b_field: Optional[Callable[[Array], Array]] = None
    domain: Optional[Box] = None
    name: str = "plant"

    @property
    def has_inverse(self):
        return self.B_field is not None and self.b_field is not None


def affine_plant(B_field, b_field, dim, domain=None, name="affine") -> Plant:
    """Plant defined through its inverse dynamics ``u = B(x) xdot + b(x)``.

    Only square ``B`` (m == n) can be inverted into forward dynamics.
    """

    def dynamics(x, u):
        return np.linalg.solve(B_field(x), np.asarray(u, dtype=float) - b_field(x))

    return Plant(dim=dim, dynamics=dynamics, control_dim=dim,
                 B_field=B_field, b_field=b_field, domain=domain, name=name)


def inverse_dynamics_exact(plant: Plant, x, xdot) -> Array:
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if not plant.has_inverse:
        raise ShapeError(f"plant {plant.name!r} has no affine inverse dynamics")
    if x.shape != (plant.dim,) or xdot.shape != (plant.dim,):
        raise ShapeError(f"expected state and momentum of shape ({plant.dim},), got {x.shape}, {xdot.shape}")
    B = np.asarray(plant.B_field(x), dtype=float)
    if B.shape != (plant.control_dim, plant.dim):
        raise ShapeError(f"B(x) has shape {B.shape}, expected {(plant.control_dim, plant.dim)}")
    return B @ xdot + plant.b_field(x)


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def euler_step(f, y, dt):
    return y + dt * f(y)


INTEGRATORS = {"rk4": rk4_step, "euler": euler_step}


def step_plant(plant: Plant, x, u, dt, method="rk4", margin=DOMAIN_MARGIN) -> Array:
    """Advance ``x`` by ``dt`` with the control held constant over the step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x_new = INTEGRATORS[method](lambda y: plant.dynamics(y, u), x, dt)
    if not np.all(np.isfinite(x_new)):
        raise IntegrationDiverged(f"non-finite state after step from {x}")
    if plant.domain is not None and margin is not None and not plant.domain.contains(x_new, margin):
        raise DomainExit(f"state {x_new} left the domain of {plant.name!r}")
    return x_new


def simulate(plant: Plant, x0, u_of, dt, steps, method="rk4", margin=DOMAIN_MARGIN) -> Array:
    """Open-loop rollout; ``u_of(t, x)`` gives the (piecewise constant) control."""
    xs = np.empty((steps + 1, plant.dim))
    xs[0] = x0
    for k in range(steps):
        xs[k + 1] = step_plant(plant, xs[k], u_of(k * dt, xs[k]), dt, method, margin)
    return xs


@dataclass(frozen=True)
class SpeedField:
    """Desired momentum as a function of state."""

    v: Callable[[Array], Array]
    name: str = "speed-field"

    def __call__(self, x):
        return self.v(x)

    def jacobian(self, x, h=1e-6):
        x = np.asarray(x, dtype=float)
        cols = []
        for i in range(x.size):
            d = np.zeros_like(x)
            d[i] = h
            cols.append((self.v(x + d) - self.v(x - d)) / (2 * h))
        return np.stack(cols, axis=1)

    def bounds(self, domain: Box, rng, samples=200):
        """(sup |v|, sup |dv/dx|_2) estimated on grid + random points of ``domain``."""
        pts = domain.points(rng, samples)
        vmax = max(np.linalg.norm(self.v(p)) for p in pts)
        jmax = max(np.linalg.norm(self.jacobian(p), 2) for p in pts)
        return vmax, jmax


@dataclass(frozen=True)
class HigherOrderSystem:
    """``q^(order) = rhs(q, q', ..., q^(order-1))``."""

    order: int
    config_dim: int
    rhs: Callable[..., Array]
    name: str = "higher-order"


def reduce_order(sys: HigherOrderSystem, domain=None) -> Plant:
    """Stack ``(q, q', ..., q^(n-1))`` into one first-order state.

    The control enters additively on the highest derivative, so the
    returned plant is ``z_k' = z_{k+1}``, ``z_n' = rhs(z_1..z_n) + u``.
    """
    if sys.order < 1:
        raise InvalidOrder(f"order must be >= 1, got {sys.order}")
    n, d = sys.order, sys.config_dim

    def dynamics(x, u):
        blocks = np.reshape(x, (n, d))
        top = np.asarray(sys.rhs(*blocks), dtype=float) + u
        return np.concatenate([blocks[1:].ravel(), top])

    return Plant(dim=n * d, dynamics=dynamics, control_dim=d, domain=domain,
                 name=f"{sys.name}-reduced")


def first_order_plant(rhs, dim, domain=None, name="first-order") -> Plant:
    """Direct construction of ``xdot = rhs(x) + u``."""

    def dynamics(x, u):
        return np.asarray(rhs(x), dtype=float) + u

    return Plant(dim=dim, dynamics=dynamics, control_dim=dim, domain=domain, name=name)


# --- built-in families -------------------------------------------------------

def linear_plant(B, b, domain=None) -> Plant:
    B = np.atleast_2d(np.asarray(B, dtype=float))
    b = np.asarray(b, dtype=float)
    return affine_plant(lambda x: B, lambda x: b, B.shape[1], domain, name="linear")


def polynomial_plant(B, b_coeffs, domain=None) -> Plant:
    """Constant ``B``; ``b(x)_i = sum_k c[k][i] * x_i**k``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    c = np.atleast_2d(np.asarray(b_coeffs, dtype=float))

    def b_field(x):
        powers = np.stack([x ** k for k in range(c.shape[0])])
        return np.sum(c * powers, axis=0)

    return affine_plant(lambda x: B, b_field, B.shape[1], domain, name="polynomial")


def harmonic_oscillator(omega=1.0, domain=None) -> Plant:
    sys = HigherOrderSystem(order=2, config_dim=1, rhs=lambda q, qd: -omega ** 2 * q,
                            name="harmonic")
    return reduce_order(sys, domain)


def arm_plant(masses=(1.0, 1.5), coupling=0.2, modulation=0.3, gravity=0.5,
              offset=(0.0, 0.0), domain=None) -> Plant:
    """Two-joint arm analog with state-dependent, mass-like inertia.

    ``B(x)`` stays symmetric positive definite on the usual domains as long
    as ``modulation < 1`` and ``coupling`` is small against the masses.
    """
    m1, m2 = masses
    off = np.asarray(offset, dtype=float)

    def B_field(x):
        return np.array([[m1 * (1.0 + modulation * np.cos(x[1])), coupling],
                         [coupling, m2 * (1.0 + modulation * np.sin(x[0]))]])

    def b_field(x):
        return gravity * np.array([np.sin(x[0]), np.cos(x[1])]) + off

    return affine_plant(B_field, b_field, 2, domain, name="arm")


PLANT_FAMILIES = {
    "linear": linear_plant,
    "polynomial": polynomial_plant,
    "harmonic": harmonic_oscillator,
    "arm": arm_plant,
}


def plant_from_dict(desc: dict) -> Plant:
    """Build a plant from ``{"family": ..., "params": {...}, "domain": [lo, hi]}``.

    Families and their params:

    * ``linear``: ``B`` (matrix), ``b`` (vector)
    * ``polynomial``: ``B`` (matrix), ``b_coeffs`` (rows of per-power coefficients)
    * ``harmonic``: ``omega``
    * ``arm``: ``masses``, ``coupling``, ``modulation``, ``gravity``, ``offset``
    """
    family = desc.get("family")
    if family not in PLANT_FAMILIES:
        raise ValueError(f"unknown plant family {family!r}; known: {sorted(PLANT_FAMILIES)}")
    params = dict(desc.get("params", {}))
    if "domain" in desc and desc["domain"] is not None:
        lo, hi = desc["domain"]
        params["domain"] = Box(np.asarray(lo, float), np.asarray(hi, float))
    return PLANT_FAMILIES[family](**params)
