"""Temporal deconvolution in the eigenbasis of ``WQ``.

With ``WQ = U^T diag(lam) U`` (rows of ``U`` are eigenvectors) the simple
loop ``h' = W(x - Qh)`` decouples in the coordinates ``chi = U h`` and
``xi = U W x``::

    chi_i' = xi_i - lam_i chi_i

so each component is a first-order low-pass of its source, and undoing it
only needs a short per-component delay line to estimate ``chi'``.
"""

from __future__ import annotations

import copy
import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NeedMoreSamples, NotPositiveDefinite, ShapeError

Array = np.ndarray

DEFAULT_DEPTH = 8

# backward-difference stencils, newest sample first
_STENCILS = {
    1: np.array([1.0, -1.0]),
    2: np.array([1.5, -2.0, 0.5]),
}


@dataclass
class DeconvUnit:
    U: Array
    lambda_diag: Array
    depth: int = DEFAULT_DEPTH
    asymmetry: float = 0.0
    buffers: deque = field(default=None, repr=False)

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.lambda_diag = np.asarray(self.lambda_diag, dtype=float).reshape(-1)
        n = self.lambda_diag.size
        if self.U.shape != (n, n):
            raise ShapeError(f"U has shape {self.U.shape}, expected {(n, n)}")
        if np.any(self.lambda_diag <= 0) or not np.all(np.isfinite(self.lambda_diag)):
            raise NotPositiveDefinite(f"eigenvalues must be positive, got {self.lambda_diag}")
        if np.linalg.norm(self.U @ self.U.T - np.eye(n)) > 1e-8:
            raise ShapeError("U is not orthogonal")
        if self.depth < 2:
            raise ValueError("delay buffers need a depth of at least 2")
        if self.buffers is None:
            self.buffers = deque(maxlen=self.depth)

    @property
    def dim(self):
        return self.lambda_diag.size

    def reconstruct(self):
        """``U^T diag(lam) U``, the (symmetrized) matrix this unit was built from."""
        return self.U.T @ np.diag(self.lambda_diag) @ self.U

    def reset(self):
        self.buffers.clear()

    def clone(self):
        return copy.deepcopy(self)


def _canonical_signs(V):
    # flip each eigenvector so its largest-magnitude entry is positive
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def diagonalize(W, Q=None, depth=DEFAULT_DEPTH) -> DeconvUnit:
    """Eigen-decompose ``WQ`` (or ``W`` alone when ``Q`` is omitted).

    Asymmetric products are symmetrized first; the Frobenius norm of the
    discarded antisymmetric part is kept on ``unit.asymmetry``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    WQ = W if Q is None else W @ np.atleast_2d(np.asarray(Q, dtype=float))
    if WQ.shape[0] != WQ.shape[1]:
        raise ShapeError(f"WQ must be square, got {WQ.shape}")
    sym = 0.5 * (WQ + WQ.T)
    asym = float(np.linalg.norm(WQ - sym))
    lam, V = np.linalg.eigh(sym)
    if lam[0] <= 0:
        raise NotPositiveDefinite(f"WQ is not positive definite (smallest eigenvalue {lam[0]:.3g})")
    V = _canonical_signs(V)
    return DeconvUnit(U=V.T, lambda_diag=lam, depth=depth, asymmetry=asym)


def mix_coordinates(unit: DeconvUnit, h, W, x):
    """``(chi, xi) = (U h, U W x)``; works on single vectors or row-stacked batches."""
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if h.shape[-1] != unit.dim or W.shape[0] != unit.dim or x.shape[-1] != W.shape[1]:
        raise ShapeError("h, W and x do not match the unit's dimension")
    return h @ unit.U.T, x @ (unit.U @ W).T


def unmix_coordinates(unit: DeconvUnit, chi):
    return np.asarray(chi, dtype=float) @ unit.U


def _as_series(signal, dim):
    arr = np.asarray(signal, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[1] != dim:
        raise ShapeError(f"signal has {arr.shape[1]} components, unit has {dim}")
    return arr


def convolve(unit: DeconvUnit, xi, dt, hold="foh", chi0=None) -> Array:
    """Exact discretization of ``chi' = xi - lam chi`` for sampled ``xi``.

    ``hold`` says how ``xi`` behaves between samples:

    * ``"foh"``: linear interpolation (accurate for smooth signals)
    * ``"zoh"``: held constant over ``[t_k, t_k + dt)``
    * ``"impulse"``: each sample is a Dirac pulse of weight ``xi_k dt``
      at ``t_k``, so a unit impulse ``xi_0 = 1/dt`` gives ``exp(-lam t_k)``
      exactly.

    Returns ``chi`` sampled on the same grid as ``xi`` (rows are time).
    """
    xi = _as_series(xi, unit.dim)
    lam = unit.lambda_diag
    a = np.exp(-lam * dt)
    chi = np.empty_like(xi)
    prev = np.zeros(unit.dim) if chi0 is None else np.asarray(chi0, dtype=float)
    if hold == "impulse":
        chi[0] = prev + dt * xi[0]
        for k in range(1, len(xi)):
            chi[k] = a * chi[k - 1] + dt * xi[k]
        return chi
    if hold == "zoh":
        c_prev, c_next = (1.0 - a) / lam, np.zeros_like(lam)
    elif hold == "foh":
        c_next = 1.0 / lam - (1.0 - a) / (lam ** 2 * dt)
        c_prev = (1.0 - a) / lam - c_next
    else:
        raise ValueError(f"unknown hold {hold!r}")
    chi[0] = prev
    for k in range(1, len(xi)):
        chi[k] = a * chi[k - 1] + c_prev * xi[k - 1] + c_next * xi[k]
    return chi


@dataclass
class DelayUsage:
    """Which delay taps each component used and the time constant it undoes."""

    taps: int
    depth: int
    time_constants: Array
    samples_seen: int

    def as_dict(self):
        return {"taps": self.taps, "depth": self.depth,
                "time_constants": [float(t) for t in self.time_constants],
                "samples_seen": self.samples_seen}


def deconvolve(unit: DeconvUnit, chi, dt, order=1):
    """Invert :func:`convolve`: ``xi_hat = chi' + lam chi``.

    ``chi'`` comes from a backward difference over the delay line
    (``order=1`` two taps, ``order=2`` three taps). Samples stream through
    ``unit.buffers``, so consecutive calls continue one signal; the first
    ``order`` samples of a fresh stream produce no output. Returns
    ``(xi_hat, usage)`` where ``xi_hat[j]`` belongs to the ``j``-th sample
    that had a full stencil.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    taps = order + 1
    if taps > unit.depth:
        raise ValueError(f"order {order} needs {taps} taps, buffer depth is {unit.depth}")
    chi = _as_series(chi, unit.dim)
    history = np.array(unit.buffers).reshape(-1, unit.dim)
    series = np.vstack([history, chi])
    if len(series) < taps:
        unit.buffers.extend(chi)
        raise NeedMoreSamples(f"delay line holds {len(series)} samples, {taps} needed")
    stencil = _STENCILS[order]
    start = max(taps - 1, len(history))
    n_out = len(series) - start
    deriv = np.zeros((n_out, unit.dim))
    for j, c in enumerate(stencil):
        deriv += c * series[start - j:start - j + n_out]
    deriv /= dt
    xi_hat = deriv + unit.lambda_diag * series[start:]
    unit.buffers.extend(chi)
    usage = DelayUsage(taps=taps, depth=unit.depth, time_constants=1.0 / unit.lambda_diag,
                       samples_seen=len(series))
    return xi_hat, usage


def write_signal(path, t, values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"c{i}" for i in range(values.shape[1])])
        for tk, row in zip(t, values):
            writer.writerow([repr(float(tk))] + [repr(float(v)) for v in row])


def read_signal(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
