"""Reconstruction (generative) networks.

Simple loop::

    h' = W (x - Q h)

Extended, SCS-gated and controlled loop::

    h' = N f_{P xhat}(s) + M h + B_ctrl v,    xhat = Q h,  s = W (x - xhat)

``f_{P xhat}`` is sparse code shrinkage: component ``i`` of the bottom-up
error ``s`` passes if ``|(P xhat)_i| >= theta`` and is multiplied by
``alpha`` otherwise.

Sign convention: the simple loop compares ``x - xhat``, the extended
equations are usually written with ``xhat - x``. Only the first orientation
relaxes for ``NWQ`` positive definite, so ``e = x - xhat`` is used
throughout. ``ReconNet.literal_sign=True`` evaluates the extended equation
with the ``xhat - x`` orientation as written; that loop diverges for the
same matrices and is kept for comparison only.
"""

from __future__ import annotations

import copy
import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import InvalidThreshold, NetworkDiverged, OracleUnavailable, ShapeError

Array = np.ndarray

BLOWUP = 1e6


@dataclass
class ReconNet:
    W: Array                      # BU, h_dim x x_dim
    Q: Array                      # TD, x_dim x h_dim
    N: Array                      # h_dim x h_dim
    M: Array                      # h_dim x h_dim
    P: Array                      # gate, h_dim x x_dim
    B_ctrl: Array                 # h_dim x v_dim
    h: Array
    theta: float = 0.0
    alpha: float = 0.0
    literal_sign: bool = False
    nonneg_Q: bool = False

    def __post_init__(self):
        for name in ("W", "Q", "N", "M", "P", "B_ctrl"):
            setattr(self, name, np.atleast_2d(np.array(getattr(self, name), dtype=float)))
        self.h = np.array(self.h, dtype=float).reshape(-1)
        hd, xd = self.W.shape
        expected = {"Q": (xd, hd), "N": (hd, hd), "M": (hd, hd), "P": (hd, xd)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.B_ctrl.shape[0] != hd:
            raise ShapeError(f"B_ctrl has {self.B_ctrl.shape[0]} rows, expected {hd}")
        if self.h.shape != (hd,):
            raise ShapeError(f"h has shape {self.h.shape}, expected ({hd},)")
        if self.theta < 0:
            raise InvalidThreshold(f"theta must be >= 0, got {self.theta}")

    @classmethod
    def create(cls, W, Q, N=None, M=None, P=None, B_ctrl=None, theta=0.0, alpha=0.0, **kw):
        """Fill unspecified matrices with the neutral choice (``N=I``, ``M=0``, ``P=W``)."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        hd = W.shape[0]
        return cls(W=W, Q=Q,
                   N=np.eye(hd) if N is None else N,
                   M=np.zeros((hd, hd)) if M is None else M,
                   P=W.copy() if P is None else P,
                   B_ctrl=np.eye(hd) if B_ctrl is None else B_ctrl,
                   h=np.zeros(hd), theta=theta, alpha=alpha, **kw)

    @property
    def h_dim(self):
        return self.W.shape[0]

    @property
    def x_dim(self):
        return self.W.shape[1]

    def x_hat(self, h=None):
        return self.Q @ (self.h if h is None else h)

    def clone(self):
        return copy.deepcopy(self)


def _input_fn(x):
    if callable(x):
        return x
    x = np.asarray(x, dtype=float)
    return lambda t: x


def _check_blowup(h, where, level=None):
    if not np.all(np.isfinite(h)) or np.linalg.norm(h) > BLOWUP:
        raise NetworkDiverged(f"hidden state diverged {where}", level=level)


def relax_simple(net: ReconNet, x, dt, steps, h0=None) -> Array:
    """RK4 integration of ``h' = W (x - Q h)``; returns ``h`` at every step.

    ``x`` is a vector or a function of time. Warns when ``WQ`` is not
    positive definite; raises :class:`NetworkDiverged` on blow-up.
    """
    WQ = net.W @ net.Q
    if np.linalg.eigvalsh(0.5 * (WQ + WQ.T))[0] <= 0:
        warnings.warn("WQ is not positive definite; the simple loop may not relax", RuntimeWarning)
    xf = _input_fn(x)
    h = np.zeros(net.h_dim) if h0 is None else np.array(h0, dtype=float)
    out = np.empty((steps + 1, net.h_dim))
    out[0] = h
    f = lambda t, hh: net.W @ (xf(t) - net.Q @ hh)
    for k in range(steps):
        t = k * dt
        k1 = f(t, h)
        k2 = f(t + dt / 2, h + dt / 2 * k1)
        k3 = f(t + dt / 2, h + dt / 2 * k2)
        k4 = f(t + dt, h + dt * k3)
        h = h + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_blowup(h, f"at step {k + 1} of the simple loop")
        out[k + 1] = h
    return out


def convolution_oracle(net: ReconNet, x, t_points, cond_limit=1e10) -> Array:
    """``h(t) = int_0^t exp(-WQ (t - t')) W x(t') dt'`` by adaptive quadrature.

    The matrix exponential is taken through the eigendecomposition of
    ``WQ``, so the oracle shares no code path with the time-stepping
    integrator. Requires ``WQ`` diagonalizable with eigenvalues of positive
    real part; zero initial state.
    """
    WQ = net.W @ net.Q
    lam, V = np.linalg.eig(WQ)
    if np.any(lam.real <= 0):
        raise OracleUnavailable("WQ has an eigenvalue with non-positive real part")
    if np.linalg.cond(V) > cond_limit:
        raise OracleUnavailable("WQ is numerically non-diagonalizable")
    Vinv = np.linalg.inv(V)
    xf = _input_fn(x)

    def h_at(t):
        if t == 0:
            return np.zeros(net.h_dim)
        g = lambda s: (V @ (np.exp(-lam * (t - s)) * (Vinv @ (net.W @ xf(s))))).real
        val, _ = integrate.quad_vec(g, 0.0, t, epsabs=1e-12, epsrel=1e-10)
        return val

    return np.array([h_at(float(t)) for t in np.atleast_1d(t_points)])


def scs_gate(s, gate, theta, alpha=0.0) -> Array:
    """Sparse code shrinkage: pass ``s_i`` where ``|gate_i| >= theta``, else scale by ``alpha``."""
    if theta < 0:
        raise InvalidThreshold(f"theta must be >= 0, got {theta}")
    s = np.asarray(s, dtype=float)
    gate = np.asarray(gate, dtype=float)
    if s.shape != gate.shape:
        raise ShapeError(f"s and gate differ in shape: {s.shape} vs {gate.shape}")
    return np.where(np.abs(gate) >= theta, s, alpha * s)


def bu_error(net: ReconNet, x, h=None) -> Array:
    """Bottom-up processed error ``s = W (x - Q h)`` (orientation per ``literal_sign``)."""
    e = np.asarray(x, dtype=float) - net.x_hat(h)
    return net.W @ (-e if net.literal_sign else e)


def extended_rate(net: ReconNet, x, v=None, h=None):
    """``(h', s, gated s)`` for the extended loop at hidden state ``h``."""
    h = net.h if h is None else h
    s = bu_error(net, x, h)
    gated = scs_gate(s, net.P @ net.x_hat(h), net.theta, net.alpha)
    rate = net.N @ gated + net.M @ h
    if v is not None:
        vv = v(h) if callable(v) else np.asarray(v, dtype=float)
        rate = rate + net.B_ctrl @ vv
    return rate, s, gated


def step_extended(net: ReconNet, x, v=None, dt=0.01) -> Array:
    """One explicit Euler step of the extended loop; updates ``net.h`` in place.

    ``v`` may be a vector or a callable ``v(h)``.
    """
    rate, _, _ = extended_rate(net, x, v)
    h = net.h + dt * rate
    _check_blowup(h, "in the extended loop")
    net.h = h
    return h


def equilibrium(net: ReconNet, x, v=None) -> Array:
    """Fixed point of the extended loop with all gates open: ``(NWQ - M) h = NWx + B v``."""
    NW = net.N @ net.W
    rhs = NW @ np.asarray(x, dtype=float)
    if v is not None:
        rhs = rhs + net.B_ctrl @ np.asarray(v, dtype=float)
    A = NW @ net.Q - net.M
    if net.literal_sign:
        A, rhs = -NW @ net.Q - net.M, -rhs
    return np.linalg.solve(A, rhs)


def tuning_distance(net: ReconNet) -> float:
    """``||QNW - I||_F``."""
    QNW = net.Q @ net.N @ net.W
    if QNW.shape[0] != QNW.shape[1]:
        raise ShapeError("QNW is not square")
    return float(np.linalg.norm(QNW - np.eye(QNW.shape[0])))


def is_tuned(net: ReconNet, tol=1e-6):
    d = tuning_distance(net)
    return d < tol, d


def feedforward_response(net: ReconNet, x) -> Array:
    """Hidden state after one unit-length Euler step from ``h = 0`` with open gates."""
    return net.N @ net.W @ np.asarray(x, dtype=float)


@dataclass
class RelaxationRecord:
    steps_to_tolerance: Optional[int]
    error_trace: Array
    bu_activity_trace: Array
    per_unit_activity: Array
    s_trace: Array = field(repr=False)
    gated_trace: Array = field(repr=False)
    dt: float = 1.0

    @property
    def converged(self):
        return self.steps_to_tolerance is not None

    @property
    def mean_activity(self):
        """Population mean of the time-integrated ``|s_i|``."""
        return float(np.mean(self.per_unit_activity))

    @property
    def peak_unit_activity(self):
        return np.max(np.abs(self.s_trace), axis=0)

    @property
    def peak_gated_activity(self):
        """Per-unit peak of the error that passed shrinkage."""
        return np.max(np.abs(self.gated_trace), axis=0)

    def to_csv(self, path):
        n_units = self.s_trace.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "err_norm", "s_l1"] + [f"s{i}" for i in range(n_units)])
            for k in range(len(self.error_trace)):
                writer.writerow([k, repr(float(self.error_trace[k])), repr(float(self.bu_activity_trace[k]))]
                                + [repr(float(v)) for v in self.s_trace[k]])


def relaxation_time(net: ReconNet, x, tol=1e-3, cap=10_000, dt=0.1, v=None,
                    reset=True, on_step=None) -> RelaxationRecord:
    """Run the extended loop until ``||x - Q h|| < tol`` or ``cap`` steps.

    Traces hold one entry per simulated step, taken before the step.
    ``per_unit_activity`` is the time integral of ``|s_i|`` over the run,
    where ``s`` is the bottom-up error before shrinkage. ``on_step(net, s,
    gated)`` is called after every step (used for online fast-matrix
    adaptation). Non-convergence is reported with ``steps_to_tolerance=None``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    if reset:
        net.h = np.zeros(net.h_dim)
    errs, acts, ss, gs = [], [], [], []
    steps = None
    for k in range(cap + 1):
        err = float(np.linalg.norm(x - net.x_hat()))
        if err < tol:
            steps = k
            break
        if k == cap:
            break
        rate, s, gated = extended_rate(net, x, v)
        errs.append(err)
        acts.append(float(np.sum(np.abs(s))))
        ss.append(s)
        gs.append(gated)
        h = net.h + dt * rate
        _check_blowup(h, f"at relaxation step {k + 1}")
        net.h = h
        if on_step is not None:
            on_step(net, s, gated)
    hd = net.h_dim
    s_arr = np.array(ss).reshape(-1, hd)
    g_arr = np.array(gs).reshape(-1, hd)
    return RelaxationRecord(steps, np.array(errs), np.array(acts),
                            dt * np.sum(np.abs(s_arr), axis=0), s_arr, g_arr, dt)
