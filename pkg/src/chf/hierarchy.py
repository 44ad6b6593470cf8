"""Stacks of reconstruction networks coupled by SDS controllers.

Level 0 reads the external input. Level ``k >= 1`` reads the experienced
momentum of the hidden layer below, ``x_k = U_k h'_{k-1}`` (optionally
modulated by ``1 + V_k h_k``), and its controller steers ``h_{k-1}``
towards a desired momentum through the lower net's ``B_ctrl`` channel.

With a controller on top, the lower hidden layer obeys::

    h' = r + B_ctrl u,    u = psi_hat (v - h') + w,    w' = gain * phi_hat (v - h')

where ``r`` is the lower net's own rate. The loop in ``h'`` is solved
exactly: ``(I + B_ctrl psi_hat) h' = r + B_ctrl (psi_hat v + w)``.

Top twist: the top controller's desired momentum is the top
reconstruction pulled back through ``C``, ``v = C^-1 Q_top h_top``. The
experienced momentum ``C h'`` is the top input, so the controller's
momentum error equals ``-C^-1`` times the top mismatch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .control import AffineIdModel, SdsController
from .deconv import DeconvUnit, diagonalize
from .errors import ControllerDiverged, HierarchyError, NetworkDiverged, NotPositiveDefinite
from .recon import BLOWUP, ReconNet, extended_rate

Array = np.ndarray

SPEED_KINDS = ("decay", "nominal")


@dataclass
class HierarchyLevel:
    net: ReconNet
    controller: Optional[SdsController] = None   # steers the level below
    coupling_U: Optional[Array] = None           # x_k = U h'_{k-1}
    coupling_C: Optional[Array] = None           # C h' = U x', used by the top twist
    modulation_V: Optional[Array] = None
    desired_T: Optional[Array] = None            # TD map for the desired momentum sent down
    speed: str = "decay"
    kappa: float = 1.0

    def __post_init__(self):
        if self.speed not in SPEED_KINDS:
            raise HierarchyError(f"unknown speed field {self.speed!r}; expected one of {SPEED_KINDS}")
        for name in ("coupling_U", "coupling_C", "modulation_V", "desired_T"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.atleast_2d(np.asarray(val, dtype=float)))


@dataclass
class LevelSnapshot:
    level: int
    t: float
    h: Array
    x: Array
    e: Array                      # reconstruction error x - Q h
    u: Array                      # control injected into this level's hidden layer
    h_dot: Array
    e_ctrl: Optional[Array] = None  # momentum error the controller above sees
    twist_residual: Optional[float] = None


@dataclass
class Hierarchy:
    levels: list
    top_twist: bool = False
    deconv: Optional[DeconvUnit] = field(default=None, repr=False)
    t: float = 0.0

    @property
    def depth(self):
        return len(self.levels)

    @property
    def top(self):
        return self.levels[-1]

    def twist_target(self):
        """``(source level, target level)`` of the twisted top coupling, or ``None``."""
        if not self.top_twist:
            return None
        return self.depth - 1, self.depth - 2

    def reset(self):
        self.t = 0.0
        for lvl in self.levels:
            lvl.net.h = np.zeros(lvl.net.h_dim)
            if lvl.controller is not None:
                lvl.controller.w = np.zeros_like(lvl.controller.w)


def _check_pair(k, lower: HierarchyLevel, upper: HierarchyLevel, twist: bool):
    lo, up = lower.net, upper.net
    U = upper.coupling_U
    if U is None:
        raise HierarchyError(f"level {k} has no coupling_U")
    if U.shape != (up.x_dim, lo.h_dim):
        raise HierarchyError(f"levels {k - 1}->{k}: coupling_U has shape {U.shape}, "
                             f"expected {(up.x_dim, lo.h_dim)}")
    if upper.modulation_V is not None and upper.modulation_V.shape != (up.x_dim, up.h_dim):
        raise HierarchyError(f"level {k}: modulation_V has shape {upper.modulation_V.shape}, "
                             f"expected {(up.x_dim, up.h_dim)}")
    ctrl = upper.controller
    if ctrl is not None:
        v_dim = lo.B_ctrl.shape[1]
        probe = np.zeros(lo.h_dim)
        for name, model in (("phi_hat", ctrl.phi_hat), ("psi_hat", ctrl.psi_hat)):
            if model is not None and model.matrix(probe).shape != (v_dim, lo.h_dim):
                raise HierarchyError(f"levels {k - 1}->{k}: controller {name} has shape "
                                     f"{model.matrix(probe).shape}, expected {(v_dim, lo.h_dim)}")
        if ctrl.w.shape != (v_dim,):
            raise HierarchyError(f"levels {k - 1}->{k}: controller state has shape {ctrl.w.shape}, "
                                 f"expected ({v_dim},)")
    T = upper.desired_T
    if T is not None and T.shape != (lo.h_dim, lo.h_dim):
        raise HierarchyError(f"level {k}: desired_T must be {lo.h_dim}x{lo.h_dim}")
    if twist:
        if ctrl is None:
            raise HierarchyError("top_twist needs a controller at the top level")
        C = upper.coupling_C if upper.coupling_C is not None else U
        if C.shape[0] != C.shape[1] or abs(np.linalg.det(C)) < 1e-12:
            raise HierarchyError(f"levels {k - 1}->{k}: top twist needs an invertible coupling_C")
        if not np.allclose(C, U):
            raise HierarchyError(f"levels {k - 1}->{k}: coupling_C must equal coupling_U "
                                 "(the top input is C h')")


def build_hierarchy(levels, top_twist=False, attach_deconv=True) -> Hierarchy:
    """Validate shapes along the stack and wire the couplings."""
    levels = list(levels)
    if len(levels) < 2:
        raise HierarchyError("a hierarchy needs at least two levels")
    if levels[0].controller is not None:
        raise HierarchyError("the bottom level has nothing below it to control")
    for k in range(1, len(levels)):
        twist = top_twist and k == len(levels) - 1
        _check_pair(k, levels[k - 1], levels[k], twist)
        if twist and levels[k].coupling_C is None:
            levels[k].coupling_C = levels[k].coupling_U.copy()
    deconv = None
    if attach_deconv:
        top = levels[-1].net
        try:
            if top.h_dim == top.x_dim:
                deconv = diagonalize(top.W, top.Q)
        except NotPositiveDefinite:
            deconv = None
    return Hierarchy(levels=levels, top_twist=top_twist, deconv=deconv)


def _desired_momentum(lower: HierarchyLevel, upper: HierarchyLevel, x_lower, h_lower):
    if upper.speed == "decay":
        v = -upper.kappa * h_lower
    else:
        net = lower.net
        v = upper.kappa * (net.N @ net.W @ (x_lower - net.Q @ h_lower))
    if upper.desired_T is not None:
        v = upper.desired_T @ v
    return v


def step_hierarchy(hier: Hierarchy, x, dt, control=True):
    """One synchronous Euler sweep; returns a list of per-level snapshots.

    Bottom-up: each level's rate is formed from its input, and the
    controller above (if any, and if ``control``) closes the loop on it;
    the resulting ``h'`` becomes the input of the next level. Then all
    hidden states and controller integrators advance together.
    """
    x = np.asarray(x, dtype=float)
    n = hier.depth
    twist = hier.twist_target()
    inputs, rates, controls, errs_c, twist_res = [x], [], [], [None] * n, [None] * n
    for k in range(n):
        lvl = hier.levels[k]
        net = lvl.net
        xk = inputs[k]
        r, _, _ = extended_rate(net, xk, None)
        u = np.zeros(net.B_ctrl.shape[1])
        h_dot = r
        upper = hier.levels[k + 1] if k + 1 < n else None
        if upper is not None and upper.controller is not None and control:
            ctrl = upper.controller
            if twist is not None and twist[1] == k:
                C = upper.coupling_C
                v = np.linalg.solve(C, upper.net.x_hat())
            else:
                v = _desired_momentum(lvl, upper, xk, net.h)
            A_ff = ctrl.psi_hat.matrix(net.h) if ctrl.psi_hat is not None else np.zeros((u.size, net.h_dim))
            lhs = np.eye(net.h_dim) + net.B_ctrl @ A_ff
            h_dot = np.linalg.solve(lhs, r + net.B_ctrl @ (A_ff @ v + ctrl.w))
            e_c = v - h_dot
            u = A_ff @ e_c + ctrl.w
            errs_c[k] = e_c
        rates.append(h_dot)
        controls.append(u)
        if upper is not None:
            x_up = upper.coupling_U @ h_dot
            if upper.modulation_V is not None:
                x_up = (1.0 + upper.modulation_V @ upper.net.h) * x_up
            inputs.append(x_up)

    snaps = []
    for k in range(n):
        lvl = hier.levels[k]
        net = lvl.net
        e = inputs[k] - net.x_hat()
        if twist is not None and twist[1] == k and errs_c[k] is not None:
            C = hier.levels[k + 1].coupling_C
            e_top = inputs[k + 1] - hier.levels[k + 1].net.x_hat()
            twist_res[k] = float(np.linalg.norm(C @ errs_c[k] + e_top))
        snaps.append(LevelSnapshot(k, hier.t, net.h.copy(), inputs[k].copy(), e, controls[k].copy(),
                                   rates[k].copy(), None if errs_c[k] is None else errs_c[k].copy(),
                                   twist_res[k]))

    # advance states
    for k in range(n):
        lvl = hier.levels[k]
        h_new = lvl.net.h + dt * rates[k]
        if not np.all(np.isfinite(h_new)) or np.linalg.norm(h_new) > BLOWUP:
            raise NetworkDiverged(f"hidden state diverged at level {k}", level=k)
        lvl.net.h = h_new
        if k >= 1 and lvl.controller is not None and control and errs_c[k - 1] is not None:
            ctrl = lvl.controller
            lower_h = snaps[k - 1].h
            ctrl.w = ctrl.w + dt * ctrl.gain * (ctrl.phi_hat.matrix(lower_h) @ errs_c[k - 1])
            if not np.all(np.isfinite(ctrl.w)) or np.linalg.norm(ctrl.w) > BLOWUP:
                err = ControllerDiverged(f"controller integrator diverged at level {k}")
                err.level = k
                raise err
    hier.t += dt
    return snaps


def simulate_hierarchy(hier: Hierarchy, x, dt, steps, control=True):
    """Run ``steps`` sweeps with a constant (or time-indexed callable) input."""
    history = []
    for i in range(steps):
        xi = x(hier.t) if callable(x) else x
        history.append(step_hierarchy(hier, xi, dt, control))
    return history


def mean_error(history, level):
    """Time-averaged reconstruction error norm at ``level``."""
    return float(np.mean([np.linalg.norm(s[level].e) for s in history]))


# --- tuned-regime feedforward check -----------------------------------------

def relax_to_rest(net: ReconNet, x, dt=0.2, tol=1e-13, cap=200_000):
    """Iterate the uncontrolled loop until ``|h'|`` drops below ``tol``."""
    h = np.zeros(net.h_dim)
    for _ in range(cap):
        r, _, _ = extended_rate(net, x, None, h)
        h = h + dt * r
        if not np.all(np.isfinite(h)) or np.linalg.norm(h) > BLOWUP:
            raise NetworkDiverged("relaxation diverged")
        if np.linalg.norm(r) < tol:
            return h, True
    return h, False


@dataclass
class FeedforwardReport:
    residuals: list
    tuning: list
    flagged: list
    tol: float

    @property
    def all_equivalent(self):
        return not self.flagged

    def as_dict(self):
        return {"residuals": self.residuals, "tuning_distance": self.tuning,
                "flagged": self.flagged, "tol": self.tol}


def verify_feedforward(hier: Hierarchy, inputs, tol=1e-6, dt=0.2) -> FeedforwardReport:
    """Compare the one-sweep response ``NWx`` against full relaxation per level.

    Along the static pathway level ``k`` reads ``U_k h*_{k-1}``, the
    relaxed state of the level below, for both responses; a detuned
    level therefore does not contaminate the levels above it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    resid = [0.0] * hier.depth
    for x in X:
        xk = x
        for k, lvl in enumerate(hier.levels):
            net = lvl.net
            if k > 0:
                xk = lvl.coupling_U @ h_star
            one_sweep = net.N @ net.W @ xk
            h_star, _ = relax_to_rest(net, xk, dt)
            resid[k] = max(resid[k], float(np.linalg.norm(one_sweep - h_star)))
    tuning = []
    for lvl in hier.levels:
        QNW = lvl.net.Q @ lvl.net.N @ lvl.net.W
        tuning.append(float(np.linalg.norm(QNW - np.eye(QNW.shape[0]))))
    flagged = [k for k, r in enumerate(resid) if r > tol]
    return FeedforwardReport(resid, tuning, flagged, tol)


# --- JSON loading and CSV output ---------------------------------------------

def _matrix(desc, shape, rng, context=None):
    if desc is None:
        return None
    if isinstance(desc, (int, float)):
        return float(desc) * np.eye(*shape) if shape[0] == shape[1] else np.full(shape, float(desc))
    if isinstance(desc, list):
        m = np.atleast_2d(np.asarray(desc, dtype=float))
        if m.shape != shape:
            raise HierarchyError(f"matrix has shape {m.shape}, expected {shape}")
        return m
    kind = desc.get("init")
    scale = float(desc.get("scale", 1.0))
    if kind == "identity":
        return scale * np.eye(*shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "random":
        return scale * rng.standard_normal(shape)
    if kind == "inverse-of":
        src = context[desc["of"]]
        return np.linalg.pinv(src) * scale
    raise HierarchyError(f"unknown matrix initializer {desc!r}")


def level_from_dict(desc, rng, below=None) -> HierarchyLevel:
    h_dim, x_dim = int(desc["h_dim"]), int(desc["x_dim"])
    ctx = {}
    W = ctx["W"] = _matrix(desc.get("W", {"init": "identity"}), (h_dim, x_dim), rng, ctx)
    Q = ctx["Q"] = _matrix(desc.get("Q", {"init": "inverse-of", "of": "W"}), (x_dim, h_dim), rng, ctx)
    net = ReconNet.create(W, Q, theta=float(desc.get("theta", 0.0)), alpha=float(desc.get("alpha", 0.0)))
    lvl = HierarchyLevel(net=net, speed=desc.get("speed", "decay"), kappa=float(desc.get("kappa", 1.0)))
    if below is not None:
        lo_h = below.net.h_dim
        lvl.coupling_U = _matrix(desc.get("coupling_U", {"init": "identity"}), (x_dim, lo_h), rng)
        lvl.coupling_C = _matrix(desc.get("coupling_C"), (x_dim, lo_h), rng)
        lvl.modulation_V = _matrix(desc.get("modulation_V"), (x_dim, h_dim), rng)
        lvl.desired_T = _matrix(desc.get("desired_T"), (lo_h, lo_h), rng)
        cdesc = desc.get("controller")
        if cdesc is not None:
            v_dim = below.net.B_ctrl.shape[1]
            phi = _matrix(cdesc.get("phi_hat", {"init": "identity"}), (v_dim, lo_h), rng)
            psi = _matrix(cdesc.get("psi_hat"), (v_dim, lo_h), rng)
            lvl.controller = SdsController.create(AffineIdModel(phi),
                                                  None if psi is None else AffineIdModel(psi),
                                                  float(cdesc.get("gain", 1.0)), v_dim)
    return lvl


def hierarchy_from_dict(desc, rng=None) -> Hierarchy:
    """Build from ``{"top_twist": bool, "levels": [...]}``.

    Each level gives ``h_dim``, ``x_dim`` and optionally ``W``, ``Q``,
    ``theta``, ``alpha``, ``speed``, ``kappa``; upper levels also take
    ``coupling_U``, ``coupling_C``, ``modulation_V``, ``desired_T`` and a
    ``controller`` block (``gain``, ``phi_hat``, ``psi_hat``). A matrix is
    a nested list, a scalar (times identity), or an initializer such as
    ``{"init": "random", "scale": 0.1}`` or ``{"init": "inverse-of", "of": "W"}``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    levels = []
    for i, ldesc in enumerate(desc.get("levels", [])):
        levels.append(level_from_dict(ldesc, rng, levels[-1] if levels else None))
    return build_hierarchy(levels, top_twist=bool(desc.get("top_twist", False)))


def load_hierarchy(path, rng=None) -> Hierarchy:
    with open(path) as fh:
        return hierarchy_from_dict(json.load(fh), rng)


def write_level_csv(history, level, path):
    """One row per sweep: t, h*, e*, u*."""
    first = history[0][level]
    cols = (["t"] + [f"h{i}" for i in range(first.h.size)] + [f"e{i}" for i in range(first.e.size)]
            + [f"u{i}" for i in range(first.u.size)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for snaps in history:
            s = snaps[level]
            writer.writerow([repr(float(s.t))] + [repr(float(v)) for v in np.concatenate([s.h, s.e, s.u])])
    return Path(path)
