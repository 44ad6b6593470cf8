"""Adaptation rules for the reconstruction-network matrices.

* ``W`` (bottom-up): natural-gradient ICA on the input, fastest.
* ``P`` (gate): one-step infomax rule ``dP ~ f(s) xhat^T + inv_term`` on
  the reconstructed input, where the inverse term is either computed
  exactly or estimated by injecting noise at the BU error layer and
  reading it out at the reconstructed-input layer (``P^{-1} = QN`` in a
  tuned loop, so no matrix inversion is needed).
* ``Q`` (top-down): delta rule on the reconstruction error, slowest.
* ``M`` (hidden recurrence): Hebbian rule ``dM ~ (N hdot) h^T`` where
  ``hdot`` is the part of the hidden-state change that ``M`` failed to
  predict. The rule follows the natural gradient only when the input to
  the hidden layer is white.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ShapeError
from .recon import ReconNet, relaxation_time, scs_gate, tuning_distance

Array = np.ndarray

INV_MODES = ("noise", "transpose", "inverse", "natural")


def score(y, kind="super"):
    """Extended-infomax score ``-(y + k tanh y)``; ``k=+1`` super-, ``k=-1`` sub-Gaussian."""
    k = 1.0 if kind == "super" else -1.0
    return -(y + k * np.tanh(y))


def amari_index(G) -> float:
    """0 for a scaled permutation matrix, 1 at worst."""
    G = np.abs(np.asarray(G, dtype=float))
    n = G.shape[0]
    if n < 2:
        return 0.0
    rows = np.sum(G / G.max(axis=1, keepdims=True), axis=1) - 1.0
    cols = np.sum(G / G.max(axis=0, keepdims=True), axis=0) - 1.0
    return float((rows.sum() + cols.sum()) / (2.0 * n * (n - 1)))


@dataclass
class LearningConfig:
    """Learning rates and the P-rule options.

    Rates must respect ``eta_Q <= eta_P <= eta_W``: top-down memory is the
    slowest to change and the bottom-up transform the fastest.
    """

    eta_W: float = 0.02
    eta_P: float = 0.006
    eta_Q: float = 0.002
    eta_M: float = 0.002
    noise_std: float = 1.0
    noise_samples: int = 64
    inv_mode: str = "noise"
    kind: str = "super"
    batch_size: int = 50

    def __post_init__(self):
        rates = (self.eta_W, self.eta_P, self.eta_Q, self.eta_M)
        if not all(np.isfinite(r) and r >= 0 for r in rates):
            raise InvalidConfig(f"learning rates must be finite and non-negative: {rates}")
        if not (self.eta_Q <= self.eta_P <= self.eta_W):
            raise InvalidConfig(
                f"schedule violated: need eta_Q <= eta_P <= eta_W, got "
                f"{self.eta_Q}, {self.eta_P}, {self.eta_W}")
        if self.inv_mode not in INV_MODES:
            raise InvalidConfig(f"inv_mode must be one of {INV_MODES}")
        if self.kind not in ("super", "sub"):
            raise InvalidConfig("kind must be 'super' or 'sub'")
        if self.noise_std <= 0 or self.noise_samples < 1 or self.batch_size < 1:
            raise InvalidConfig("noise_std, noise_samples and batch_size must be positive")

    @classmethod
    def from_ratio(cls, base, ratio=(10, 3, 1, 1), **kw):
        w, p, q, m = ratio
        return cls(eta_W=base * w, eta_P=base * p, eta_Q=base * q, eta_M=base * m, **kw)


# --- inverse term of the P rule -------------------------------------------

def noise_inverse_term(net: ReconNet, rng, noise_std=1.0, samples=64) -> Array:
    """Monte Carlo estimate of ``(QN)^T``: noise ``nu`` at the BU error layer,
    read out as ``QN nu`` at the reconstructed-input layer, Hebbian product
    ``nu (QN nu)^T / sigma^2``."""
    nu = noise_std * rng.standard_normal((samples, net.h_dim))
    r = nu @ (net.Q @ net.N).T
    return nu.T @ r / (samples * noise_std ** 2)


def inverse_term(net: ReconNet, mode, rng=None, noise_std=1.0, samples=64) -> Array:
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode needs an rng")
        return noise_inverse_term(net, rng, noise_std, samples)
    try:
        if mode == "transpose":
            return np.linalg.inv(net.P).T
        if mode == "inverse":
            return np.linalg.inv(net.P)
    except np.linalg.LinAlgError:
        if rng is None:
            raise
        warnings.warn("P is singular; falling back to the noise estimate", RuntimeWarning)
        return noise_inverse_term(net, rng, noise_std, samples)
    raise ValueError(f"no inverse term for mode {mode!r}")


def p_update_direction(net: ReconNet, x_hat, s=None, mode="transpose", kind="super",
                       rng=None, noise_std=1.0, samples=64) -> Array:
    """Batch-averaged direction of the P rule (without the learning rate).

    ``x_hat`` is one vector or a batch (rows). ``s`` defaults to ``P x_hat``,
    the gate-opening output of ``P``.
    """
    X = np.atleast_2d(np.asarray(x_hat, dtype=float))
    S = X @ net.P.T if s is None else np.atleast_2d(np.asarray(s, dtype=float))
    if S.shape[0] != X.shape[0] or S.shape[1] != net.h_dim:
        raise ShapeError(f"s has shape {S.shape}, expected ({X.shape[0]}, {net.h_dim})")
    F = score(S, kind)
    if mode == "natural":
        return (np.eye(net.h_dim) + F.T @ S / len(S)) @ net.P
    hebb = F.T @ X / len(X)
    return hebb + inverse_term(net, mode, rng, noise_std, samples)


def ica_update_P(net: ReconNet, s, x_hat, eta, mode="transpose", kind="super",
                 rng=None, noise_std=1.0, samples=64) -> Array:
    """``P <- P + eta * (f(s) xhat^T + inv_term)``; updates ``net.P`` in place."""
    if eta == 0:
        return net.P
    net.P = net.P + eta * p_update_direction(net, x_hat, s, mode, kind, rng, noise_std, samples)
    return net.P


def natural_ica_direction(Wm, X, kind="super") -> Array:
    """``(I + E[f(y) y^T]) W`` for ``y = W x``."""
    Y = np.atleast_2d(X) @ Wm.T
    return (np.eye(Wm.shape[0]) + score(Y, kind).T @ Y / len(Y)) @ Wm


def ica_update_W(net: ReconNet, x, eta, kind="super") -> Array:
    if eta == 0:
        return net.W
    net.W = net.W + eta * natural_ica_direction(net.W, x, kind)
    return net.W


def hebbian_update_Q(net: ReconNet, e, h, eta) -> Array:
    """Delta rule ``Q <- Q + eta e h^T`` (batch rows are averaged)."""
    if eta == 0:
        return net.Q
    E = np.atleast_2d(np.asarray(e, dtype=float))
    H = np.atleast_2d(np.asarray(h, dtype=float))
    net.Q = net.Q + eta * E.T @ H / len(E)
    if net.nonneg_Q:
        net.Q = np.maximum(net.Q, 0.0)
    return net.Q


def hebbian_update_M(net: ReconNet, h, h_dot, eta) -> Array:
    """``M <- M + eta (N hdot) h^T``.

    ``h_dot`` is the correction the hidden layer received, i.e. the finite
    difference of consecutive ``h`` minus the part ``M h`` predicted (see
    :func:`hidden_correction`).
    """
    if eta == 0:
        return net.M
    Hd = np.atleast_2d(np.asarray(h_dot, dtype=float))
    H = np.atleast_2d(np.asarray(h, dtype=float))
    net.M = net.M + eta * (Hd @ net.N.T).T @ H / len(H)
    return net.M


def hidden_correction(net: ReconNet, h_prev, h_next, dt) -> Array:
    """``(h_next - h_prev)/dt - M h_prev``: hidden change not explained by ``M``."""
    return (np.asarray(h_next) - np.asarray(h_prev)) / dt - np.atleast_2d(h_prev) @ net.M.T


# --- whitening + separation ---------------------------------------------------

@dataclass
class IcaState:
    whitening: Array
    separation: Array
    cov: Array
    count: int = 0

    @classmethod
    def create(cls, dim):
        return cls(np.eye(dim), np.eye(dim), np.zeros((dim, dim)), 0)

    @property
    def unmixing(self):
        return self.separation @ self.whitening


def whiten_then_separate(state: IcaState, batch, eta_white=0.05, eta_sep=0.02, kind="super") -> IcaState:
    """One two-stage update on ``batch`` (rows are samples).

    Whitening follows ``V <- V + eta (I - E[z z^T]) V`` with ``z = V x``;
    separation is natural-gradient ICA on the whitened outputs.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    if X.size == 0:
        raise ValueError("batch is empty")
    n, d = X.shape
    if n < d or np.linalg.matrix_rank(X) < d:
        warnings.warn("batch covariance is rank deficient; whitening is degenerate", RuntimeWarning)
    C = X.T @ X / n
    total = state.count + n
    cov = (state.cov * state.count + C * n) / total
    Z = X @ state.whitening.T
    V = state.whitening + eta_white * (np.eye(d) - Z.T @ Z / n) @ state.whitening
    Zn = X @ V.T
    R = state.separation + eta_sep * natural_ica_direction(state.separation, Zn, kind)
    return IcaState(V, R, cov, total)


# --- epoch ------------------------------------------------------------------

@dataclass
class LearningTrace:
    dW: list = field(default_factory=list)
    dP: list = field(default_factory=list)
    dQ: list = field(default_factory=list)
    dM: list = field(default_factory=list)
    qnw_dist: list = field(default_factory=list)
    amari: list = field(default_factory=list)

    def rows(self):
        for k in range(len(self.dW)):
            yield (k, self.dW[k], self.dP[k], self.dQ[k], self.dM[k], self.qnw_dist[k], self.amari[k])

    def totals(self):
        return {k: float(np.sum(getattr(self, k))) for k in ("dW", "dP", "dQ", "dM")}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "dW", "dP", "dQ", "dM", "qnw_dist", "amari"])
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def extend(self, other: "LearningTrace"):
        for k in ("dW", "dP", "dQ", "dM", "qnw_dist", "amari"):
            getattr(self, k).extend(getattr(other, k))


def feedforward_pass(net: ReconNet, X):
    """Gated one-step hidden response for a batch, starting from ``h = 0``.

    The gate-opening vector is ``P`` applied to the ungated feedforward
    reconstruction ``QNWx``; components below threshold are shrunk.
    Returns ``(h, x_hat_ungated, reconstruction error)``.
    """
    S = X @ net.W.T
    Xh0 = S @ (net.Q @ net.N).T
    G = Xh0 @ net.P.T
    H = scs_gate(S, G, net.theta, net.alpha) @ net.N.T
    E = X - H @ net.Q.T
    return H, Xh0, E


def run_learning_epoch(net: ReconNet, inputs, config: LearningConfig, rng, mixing=None):
    """One pass over ``inputs`` (rows) in mini-batches; updates ``net`` in place.

    All matrices change from the same mini-batch: ``W`` by natural-gradient
    ICA on the input, ``P`` by the one-step rule on the ungated
    reconstruction, ``Q`` by the delta rule on the gated one-step
    reconstruction error, ``M`` by the Hebbian rule on consecutive hidden
    responses. ``mixing`` (the planted mixing matrix, if known) enables the
    Amari-index column of the trace.
    """
    X_all = np.atleast_2d(np.asarray(inputs, dtype=float))
    trace = LearningTrace()
    h_prev = None
    for start in range(0, len(X_all), config.batch_size):
        X = X_all[start:start + config.batch_size]
        H, Xh0, E = feedforward_pass(net, X)
        dW = config.eta_W * natural_ica_direction(net.W, X, config.kind) if config.eta_W else 0.0
        dP = (config.eta_P * p_update_direction(net, Xh0, None, config.inv_mode, config.kind, rng,
                                                config.noise_std, config.noise_samples)
              if config.eta_P else 0.0)
        dQ = config.eta_Q * E.T @ H / len(X) if config.eta_Q else 0.0
        dM = 0.0
        if config.eta_M and h_prev is not None and len(h_prev) == len(H):
            corr = hidden_correction(net, h_prev, H, 1.0)
            dM = config.eta_M * (corr @ net.N.T).T @ h_prev / len(H)
        h_prev = H
        net.W = net.W + dW
        net.P = net.P + dP
        net.Q = net.Q + dQ
        if net.nonneg_Q:
            net.Q = np.maximum(net.Q, 0.0)
        net.M = net.M + dM
        trace.dW.append(float(np.linalg.norm(dW)))
        trace.dP.append(float(np.linalg.norm(dP)))
        trace.dQ.append(float(np.linalg.norm(dQ)))
        trace.dM.append(float(np.linalg.norm(dM)))
        trace.qnw_dist.append(tuning_distance(net))
        trace.amari.append(amari_index(net.W @ mixing) if mixing is not None else float("nan"))
    return net, trace


# --- repeated presentation (priming) ---------------------------------------

def present_repeatedly(net: ReconNet, x, presentations, eta_P=0.3, eta_W=0.0, mode="noise",
                       kind="super", tol=1e-3, cap=10_000, dt=0.2, rng=None,
                       noise_std=1.0, noise_samples=64):
    """Present ``x`` several times; fast matrices adapt between presentations.

    Long-term memory (``Q``) is never touched. After each relaxation the
    gate matrix ``P`` takes one step of its rule on the relaxed
    reconstruction and, if ``eta_W > 0``, ``W`` one natural-gradient ICA
    step on the input. Returns the relaxation records.

    ``W`` stays fixed by default: a single-sample ICA step shrinks the
    rows of strongly driven units and lengthens relaxation instead of
    shortening it. The ``P`` step grows the gate of weakly driven units
    until they pass the threshold, which is what shortens relaxation.
    """
    x = np.asarray(x, dtype=float)
    records = []
    for _ in range(presentations):
        rec = relaxation_time(net, x, tol=tol, cap=cap, dt=dt)
        records.append(rec)
        if eta_P:
            net.P = net.P + eta_P * p_update_direction(net, net.x_hat(), None, mode, kind, rng,
                                                       noise_std, noise_samples)
        if eta_W:
            ica_update_W(net, x, eta_W, kind)
    return records
