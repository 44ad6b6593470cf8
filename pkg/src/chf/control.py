"""Robust speed-field tracking (SDS) controller and its numerical checks.

Plant inverse dynamics: ``u = A(x) xdot + b(x)`` (``A`` is the plant's
``B_field``; the two names denote the same matrix field).

Controller::

    u    = u_ff + w
    u_ff = Psi(x, v) - Psi(x, xdot) = Ahat(x) (v - xdot)
    w'   = gain * (Phi(x, v) - Phi(x, xdot)) = gain * Bhat(x) (v - xdot)

where ``Phi = Bhat xdot + bhat`` and ``Psi = Ahat xdot + ahat`` are affine
inverse-dynamics estimates. The offsets ``ahat``/``bhat`` cancel in both
differences, so the controller never needs an estimate of ``b``.

Because ``u`` depends on the momentum it produces, the closed loop is an
algebraic loop. For affine plants it is solved exactly:
``(A + Ahat) xdot = Ahat v + w - b``.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import ControllerDiverged, ShapeError
from .plant import Box, Plant, SpeedField

Array = np.ndarray

BLOWUP = 1e6
DEFAULT_EPS = 1e-6


def _as_field(m):
    if callable(m):
        return m
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    return lambda x: arr


@dataclass(frozen=True)
class AffineIdModel:
    """Affine inverse-dynamics estimate ``(x, xdot) -> A(x) xdot + a(x)``."""

    A_field: Callable[[Array], Array]
    a_field: Optional[Callable[[Array], Array]] = None

    def __post_init__(self):
        object.__setattr__(self, "A_field", _as_field(self.A_field))
        if self.a_field is not None and not callable(self.a_field):
            a = np.asarray(self.a_field, dtype=float)
            object.__setattr__(self, "a_field", lambda x: a)

    def __call__(self, x, xdot):
        out = self.A_field(x) @ xdot
        if self.a_field is not None:
            out = out + self.a_field(x)
        return out

    def matrix(self, x):
        return self.A_field(x)

    @classmethod
    def from_plant(cls, plant: Plant, scale=1.0, with_offset=True):
        """``scale`` times the plant's true inverse dynamics."""
        B, b = plant.B_field, plant.b_field
        return cls(lambda x: scale * B(x), (lambda x: scale * b(x)) if with_offset else None)

    @classmethod
    def zero(cls, m, n):
        return cls(np.zeros((m, n)))


@dataclass
class SdsController:
    phi_hat: AffineIdModel
    psi_hat: Optional[AffineIdModel]
    gain: float
    w: Array

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError(f"gain must be strictly positive, got {self.gain}")
        self.w = np.array(self.w, dtype=float)

    @classmethod
    def create(cls, phi_hat, psi_hat, gain, m):
        return cls(phi_hat, psi_hat, gain, np.zeros(m))

    def clone(self):
        return copy.deepcopy(self)


def feedforward(ctrl: SdsController, x, xdot, v) -> Array:
    diff = np.asarray(v, dtype=float) - np.asarray(xdot, dtype=float)
    if ctrl.psi_hat is None:
        return np.zeros_like(ctrl.w)
    A = ctrl.psi_hat.matrix(x)
    if A.shape[1] != diff.size:
        raise ShapeError(f"feedforward model shape {A.shape} does not match momentum size {diff.size}")
    return A @ diff


def feedback_step(ctrl: SdsController, x, xdot, v, dt) -> Array:
    """Explicit Euler step of the integrator ``w' = gain * Bhat (v - xdot)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    diff = np.asarray(v, dtype=float) - np.asarray(xdot, dtype=float)
    ctrl.w = ctrl.w + dt * ctrl.gain * (ctrl.phi_hat.matrix(x) @ diff)
    if not np.all(np.isfinite(ctrl.w)):
        raise ControllerDiverged("integrator state became non-finite")
    return ctrl.w


def control_output(ctrl: SdsController, x, xdot, v) -> Array:
    return feedforward(ctrl, x, xdot, v) + ctrl.w


def subtraction_rule(v, xdot, x) -> Array:
    """Pack desired-minus-experienced for a higher-order plant.

    ``x_des - x_exp := (v(x) - xdot, x)``; this lets the feedback-only
    controller be drawn as the first-order loop of a reconstruction network.
    """
    return np.concatenate([np.asarray(v) - np.asarray(xdot), np.asarray(x)])


# --- uniform positive definiteness ------------------------------------------

@dataclass
class PdCheckReport:
    min_eigenvalue_observed: float
    sample_count: int
    failed_points: list
    pairs_checked: list
    eps: float = DEFAULT_EPS

    @property
    def verdict(self):
        return self.min_eigenvalue_observed > self.eps


def sym_min_eig(M):
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def check_uniform_pd(pairs, domain: Box, samples=200, eps=DEFAULT_EPS, rng=None) -> PdCheckReport:
    """Worst ``lambda_min(sym(X^T Y))`` over grid + random points of ``domain``.

    ``pairs`` is a list of ``(label, X, Y)``; ``X``/``Y`` are matrices or
    matrix fields ``x -> matrix``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    pts = domain.points(rng, samples)
    worst = np.inf
    failed = []
    labels = []
    for label, X, Y in pairs:
        labels.append(label)
        Xf, Yf = _as_field(X), _as_field(Y)
        for p in pts:
            lam = sym_min_eig(Xf(p).T @ Yf(p))
            worst = min(worst, lam)
            if lam <= eps:
                failed.append((label, p.copy()))
    return PdCheckReport(worst, len(pts), failed, labels, eps)


def theorem_pairs(plant: Plant, ctrl: SdsController, corollary=False):
    """All ``X^T Y`` pairs with ``X, Y`` in ``{A, Ahat, Bhat}``.

    ``A`` is the plant's ``B_field``. The corollary additionally lists
    ``B^T Bhat``; it coincides with the ``(A, Bhat)`` pair and is kept as a
    separate label only so reports match the corollary's statement.
    """
    fields = {"A": plant.B_field, "Bhat": ctrl.phi_hat.A_field}
    if ctrl.psi_hat is not None:
        fields["Ahat"] = ctrl.psi_hat.A_field
    pairs = [(f"{a}^T {b}", fields[a], fields[b]) for a, b in product(fields, repeat=2)]
    if corollary:
        pairs.append(("B^T Bhat", plant.B_field, ctrl.phi_hat.A_field))
    return pairs


def lyapunov_value(e, A, A_hat) -> float:
    """``L = 1/2 e^T (A + Ahat)^T (A + Ahat) e``."""
    y = (np.asarray(A) + np.asarray(A_hat)) @ np.asarray(e, dtype=float)
    return 0.5 * float(y @ y)


# --- closed-loop simulation --------------------------------------------------

@dataclass
class Trajectory:
    t: Array
    x: Array
    xdot: Array
    u: Array
    w: Array
    e: Array
    L: Array

    @property
    def e_norm(self):
        return np.linalg.norm(self.e, axis=1)

    def asymptotic_error(self, tail=0.1):
        """Max tracking-error norm over the final ``tail`` fraction of the run."""
        n = len(self.t)
        start = min(n - 1, int(np.floor((1.0 - tail) * n)))
        return float(np.max(self.e_norm[start:]))

    def to_csv(self, path):
        header = ["t"]
        blocks = [self.t[:, None]]
        for name, arr in (("x", self.x), ("xdot", self.xdot), ("u", self.u), ("w", self.w)):
            header += [f"{name}{i}" for i in range(arr.shape[1])]
            blocks.append(arr)
        header += ["e_norm", "L"]
        blocks += [self.e_norm[:, None], self.L[:, None]]
        rows = np.hstack(blocks)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])


@dataclass
class ScheduleEntry:
    """Models active from ``t_start`` on; ``gain=None`` keeps the previous gain."""

    t_start: float
    phi_hat: AffineIdModel
    psi_hat: Optional[AffineIdModel]
    gain: Optional[float] = None


def _solve_loop(plant: Plant, psi_hat, x, v, w, extra_u):
    """Momentum produced when ``u = Ahat (v - xdot) + w + extra_u``."""
    if plant.has_inverse:
        A = plant.B_field(x)
        Ah = psi_hat.matrix(x) if psi_hat is not None else np.zeros_like(A)
        xdot = np.linalg.solve(A + Ah, Ah @ v + w + extra_u - plant.b_field(x))
        return xdot, A, Ah

    def resid(xd):
        u = (psi_hat.matrix(x) @ (v - xd) if psi_hat is not None else 0.0) + w + extra_u
        return xd - plant.dynamics(x, u)

    sol = optimize.root(resid, v, tol=1e-12)
    Ah = psi_hat.matrix(x) if psi_hat is not None else np.zeros((plant.control_dim, plant.dim))
    return sol.x, np.eye(plant.dim), Ah


def time_varying_track(plant: Plant, ctrl: SdsController, v: SpeedField, x0, T, dt,
                       schedule: Optional[Sequence[ScheduleEntry]] = None,
                       noise_before=None, noise_after=None, blowup=BLOWUP) -> Trajectory:
    """Closed-loop speed-field tracking with models swapped on a schedule.

    Models switch at step boundaries. ``noise_before(t)`` is added to the
    feedback integrand (so it is amplified by the gain and integrated);
    ``noise_after(t)`` is added to the control after the integrator.
    ``ctrl.w`` is updated in place to the final integrator state.
    """
    if schedule is None or len(schedule) == 0:
        schedule = [ScheduleEntry(0.0, ctrl.phi_hat, ctrl.psi_hat, ctrl.gain)]
    schedule = sorted(schedule, key=lambda s: s.t_start)
    steps = int(round(T / dt))
    n, m = plant.dim, plant.control_dim
    zero_m = np.zeros(m)

    def active(t):
        entry, gain = schedule[0], schedule[0].gain or ctrl.gain
        for s in schedule:
            if s.t_start <= t + 1e-12:
                entry = s
                gain = s.gain if s.gain is not None else gain
        return entry, gain

    def rates(t, y, entry, gain):
        x, w = y[:n], y[n:]
        vx = v(x)
        extra = noise_after(t) if noise_after is not None else zero_m
        xdot, A, Ah = _solve_loop(plant, entry.psi_hat, x, vx, w, extra)
        e = vx - xdot
        fb = entry.phi_hat.matrix(x) @ e
        if noise_before is not None:
            fb = fb + noise_before(t)
        return np.concatenate([xdot, gain * fb]), xdot, e, A, Ah, w + extra + Ah @ e

    ts = np.arange(steps + 1) * dt
    X = np.empty((steps + 1, n)); XD = np.empty((steps + 1, n)); U = np.empty((steps + 1, m))
    Wt = np.empty((steps + 1, m)); E = np.empty((steps + 1, n)); L = np.empty(steps + 1)
    y = np.concatenate([np.asarray(x0, float), ctrl.w.astype(float)])

    for k in range(steps + 1):
        t = ts[k]
        entry, gain = active(t)
        dy, xdot, e, A, Ah, u = rates(t, y, entry, gain)
        X[k], XD[k], U[k], Wt[k], E[k] = y[:n], xdot, u, y[n:], e
        L[k] = lyapunov_value(e, A, Ah)
        en, wn = np.linalg.norm(e), np.linalg.norm(y[n:])
        if not (np.isfinite(en) and np.isfinite(wn)) or en > blowup or wn > blowup:
            raise ControllerDiverged(
                f"tracking diverged at t={t:.3f} (|e|={en:.3g}, |w|={wn:.3g}); "
                "the inverse-dynamics model is probably not sign-proper")
        if k == steps:
            break
        f = lambda tt, yy: rates(tt, yy, entry, gain)[0]
        k1 = dy
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    ctrl.w = y[n:].copy()
    return Trajectory(ts, X, XD, U, Wt, E, L)


def track_speed_field(plant: Plant, ctrl: SdsController, v: SpeedField, x0, T, dt,
                      noise_before=None, noise_after=None, blowup=BLOWUP) -> Trajectory:
    return time_varying_track(plant, ctrl, v, x0, T, dt, None, noise_before, noise_after, blowup)


def lyapunov_decrease_fraction(traj: Trajectory, bound: float) -> tuple[float, int]:
    """Fraction of samples with ``|e| > bound`` at which ``L`` does not increase.

    Returns ``(fraction, count)``; fraction is 1.0 when no sample qualifies.
    """
    en = traj.e_norm[:-1]
    dL = np.diff(traj.L)
    mask = en > bound
    count = int(mask.sum())
    if count == 0:
        return 1.0, 0
    return float(np.mean(dL[mask] <= 0.0)), count


def gain_slope(gains, errors) -> float:
    """Least-squares slope of log(error) against log(gain)."""
    return float(np.polyfit(np.log(gains), np.log(errors), 1)[0])
