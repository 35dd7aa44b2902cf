"""Deterministic numerical kernels shared by the rest of the package.

Everything here is a pure function of its inputs: a symmetric eigensolver
based on cyclic Jacobi rotations, a stabilised row softmax, scalar
bisection, a grid-plus-refine logistic fit, a percentile bootstrap and the
seeded random-stream helper every stochastic routine draws from.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize


class DimensionError(ValueError):
    """Raised when an array has the wrong shape or structure."""


class BracketError(ValueError):
    """Raised when a root-finding interval does not bracket a sign change."""


class DegenerateFitError(ValueError):
    """Raised when a curve is too flat for a meaningful sigmoid fit."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, float):
        # g values and similar; round-trip through repr keeps this stable
        return zlib.crc32(repr(float(key)).encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


def rng_stream(master_seed: int, *keys) -> np.random.Generator:
    """Return an independent counter-based generator for a labelled stream.

    The stream is addressed by ``(master_seed, *keys)`` through
    ``SeedSequence`` spawn keys and drives a Philox counter generator, so
    the numbers drawn for one key never depend on which other keys were
    used or in what order.  Keys may be non-negative integers, strings or
    floats.
    """
    spawn_key = tuple(_key_to_int(k) for k in keys)
    seq = np.random.SeedSequence(int(master_seed) & ((1 << 64) - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition
# ---------------------------------------------------------------------------

def sym_eig(m, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi sweeps.

    Parameters
    ----------
    m : array_like, shape (n, n)
        Symmetric matrix (symmetric within 1e-10 relative).
    tol : float
        Sweeps stop once the off-diagonal Frobenius norm falls below
        ``tol * ||m||_F``.
    max_sweeps : int
        Safety cap on the number of sweeps.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Sorted in descending order.
    eigenvectors : ndarray, shape (n, n)
        Orthonormal columns, ``m @ V[:, k] = eigenvalues[k] * V[:, k]``.
    """
    a = np.array(m, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError("sym_eig input has non-finite entries")
    n = a.shape[0]
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise DimensionError("sym_eig input is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v

    threshold = tol * scale
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                diff = aqq - app
                if abs(apq) < 1e-18 * abs(diff):
                    # rotation angle ~ apq/diff is below rounding of the diagonal
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    # deterministic sign convention: largest-magnitude entry of each vector positive
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, v * signs


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction.

    Works on any array with at least one axis; every slice along the last
    axis is normalised independently.
    """
    x = np.asarray(logits, dtype=float)
    if np.isnan(x).any():
        raise FloatingPointError("softmax_rows received NaN logits")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax_rows received infinite logits")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Root finding
# ---------------------------------------------------------------------------

def bisect_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12,
                max_iter: int = 2000) -> float:
    """Find a sign change of ``f`` in ``[lo, hi]`` by bisection.

    Returns the midpoint of the final bracket, whose width is at most
    ``tol``.  An endpoint that evaluates to exactly zero is returned as is.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lo = float(lo)
    hi = float(hi)
    if lo > hi:
        lo, hi = hi, lo
    flo = f(lo)
    fhi = f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={flo}, f(hi)={fhi}")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break  # interval can no longer be split in floating point
        fmid = f(mid)
        if fmid == 0.0:
            return mid
        if np.sign(fmid) == np.sign(flo):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Logistic fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticFit:
    """Four-parameter logistic ``a + b / (1 + exp(-(x - tau) / w))``."""

    a: float
    b: float
    tau: float
    w: float
    residual: float

    def __call__(self, x):
        return self.a + self.b * _sigmoid((np.asarray(x, dtype=float) - self.tau) / self.w)


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _profile_ab(basis: np.ndarray, y: np.ndarray):
    """Closed-form least squares of y on [1, basis] for a stack of bases.

    ``basis`` has shape (..., n); returns (a, b, sse) with shape (...).
    """
    n = y.shape[-1]
    sf = basis.sum(axis=-1)
    sff = (basis * basis).sum(axis=-1)
    sy = y.sum()
    sfy = (basis * y).sum(axis=-1)
    var_f = sff - sf * sf / n
    safe = var_f > 1e-300
    b = np.where(safe, (sfy - sf * sy / n) / np.where(safe, var_f, 1.0), 0.0)
    a = (sy - b * sf) / n
    resid = y - a[..., None] - b[..., None] * basis
    sse = (resid * resid).sum(axis=-1)
    return a, b, sse


def fit_logistic(xs: Sequence[float], ys: Sequence[float], n_widths: int = 32) -> LogisticFit:
    """Least-squares fit of a four-parameter logistic curve.

    A coarse grid over the midpoint (the data's own step resolution across
    the x-range) and width (``n_widths`` log-spaced values in
    ``[dx, range]``) is scanned with the floor and amplitude solved in
    closed form at each node.  The best node seeds a Nelder-Mead
    refinement over ``(tau, log w)`` with (a, b) still profiled out.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionError("xs and ys must be 1-D and of equal length")
    if x.size < 6:
        raise ValueError("fit_logistic needs at least 6 points")
    if not np.all(np.diff(x) > 0):
        raise ValueError("xs must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise ValueError("ys must be finite")
    if y.max() - y.min() < 1e-12:
        raise DegenerateFitError("flat data: no transition to fit")

    span = x[-1] - x[0]
    dx = float(np.min(np.diff(x)))
    n_tau = int(np.floor(span / dx + 1e-9)) + 1
    taus = x[0] + dx * np.arange(n_tau)
    widths = np.geomspace(dx, span, n_widths)
    z = (x[None, None, :] - taus[:, None, None]) / widths[None, :, None]
    basis = _sigmoid(z)
    a, b, sse = _profile_ab(basis, y)
    i, j = np.unravel_index(np.argmin(sse), sse.shape)
    start = np.array([taus[i], np.log(widths[j])])

    def objective(p):
        f = _sigmoid((x - p[0]) / np.exp(p[1]))
        return float(_profile_ab(f, y)[2])

    res = minimize(objective, start, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000})
    best = res.x if res.fun <= sse[i, j] else start
    tau, logw = float(best[0]), float(best[1])
    w = float(np.exp(logw))
    f = _sigmoid((x - tau) / w)
    a_fit, b_fit, sse_fit = _profile_ab(f, y)
    return LogisticFit(a=float(a_fit), b=float(b_fit), tau=tau, w=w, residual=float(max(sse_fit, 0.0)))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def bootstrap_ci(samples, statistic: Callable, B: int = 1000, level: float = 0.95,
                 rng_seed: int = 0):
    """Percentile bootstrap interval over resampled seeds.

    Parameters
    ----------
    samples : sequence
        One entry per seed (scalars or arrays of equal shape).
    statistic : callable
        Maps an array of resampled entries (stacked along axis 0) to a float.
    B : int
        Number of bootstrap replicates (at least 100).
    level : float
        Central coverage of the interval.
    rng_seed : int
        Seed for the resampling stream.
    """
    data = np.asarray(samples, dtype=float)
    if data.size == 0 or data.shape[0] == 0:
        raise ValueError("bootstrap_ci needs at least one sample")
    if data.shape[0] < 2:
        raise ValueError("bootstrap_ci needs at least two samples")
    if B < 100:
        raise ValueError("B must be at least 100")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    rng = rng_stream(rng_seed, "bootstrap")
    n = data.shape[0]
    idx = rng.integers(0, n, size=(B, n))
    stats = np.array([statistic(data[row]) for row in idx], dtype=float)
    stats = stats[np.isfinite(stats)]
    if stats.size == 0:
        return float("nan"), float("nan")
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)
