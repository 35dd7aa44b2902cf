"""Variance-preserving schedules, replica pairs, mixture scores and samplers.

Indexing convention: a :class:`NoiseSchedule` is indexed by forward step
``s = 0 .. S`` with ``s = 0`` the clean data (``alpha = 1``) and ``s = S``
the most noised state.  Reverse samplers move from ``s`` to ``s - 1``.
Protocol code counts *reverse* steps ``r = S - s`` instead, so ``r = 0`` is
the start of generation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .numerics import rng_stream

SQRT2 = np.sqrt(2.0)


class ConfigError(ValueError):
    """Raised on invalid numerical configuration."""


class NumericalBlowupWarning(RuntimeWarning):
    """Emitted when an integrator produces non-finite values."""


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Discretised VP schedule.

    ``beta[s-1]`` is the rate used on the transition ``s-1 -> s`` and
    ``dt`` the time increment of one step, so one step multiplies the
    signal by ``sqrt(1 - beta * dt)``.  ``alpha`` and ``sigma2`` have length
    ``S + 1``.
    """

    S: int
    beta: np.ndarray
    alpha: np.ndarray
    sigma2: np.ndarray
    dt: float

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def beta_at(self, s: int) -> float:
        """Rate of the transition into forward step ``s`` (1 <= s <= S)."""
        _check_step(s, self.S)
        return float(self.beta[s - 1])


def _check_step(s, S):
    if not 1 <= int(s) <= S:
        raise IndexError(f"step {s} outside 1..{S}")


def make_vp_schedule(S: int = 100, beta_min: float = 1e-4, beta_max: float = 2e-2,
                     horizon: float = 1000.0) -> NoiseSchedule:
    """Linear-beta VP schedule on ``S`` steps spanning total time ``horizon``.

    The rates ramp linearly from ``beta_min`` to ``beta_max`` and each step
    advances time by ``dt = horizon / S``, so that
    ``alpha_s = prod_{s' <= s} sqrt(1 - beta_{s'} dt)``.  The defaults
    reproduce the usual 1000-step DDPM ramp sampled on ``S`` strided
    steps; ``horizon=1`` with rates in ``[0.1, 20]`` gives the continuous
    VP-SDE on unit time.

    A zero rate is accepted and yields a noiseless schedule; negative rates
    are rejected.
    """
    if int(S) != S or S < 2:
        raise ConfigError("S must be an integer >= 2")
    if beta_min < 0 or beta_max < 0:
        raise ConfigError("betas must be non-negative")
    if beta_min > beta_max:
        raise ConfigError("beta_min must not exceed beta_max")
    if horizon <= 0:
        raise ConfigError("horizon must be positive")
    S = int(S)
    dt = float(horizon) / S
    beta = np.linspace(beta_min, beta_max, S)
    decay = 1.0 - beta * dt
    if np.any(decay <= 0.0):
        raise ConfigError("beta_max * dt must stay below 1")
    alpha = np.concatenate([[1.0], np.sqrt(np.cumprod(decay))])
    sigma2 = 1.0 - alpha * alpha
    return NoiseSchedule(S=S, beta=beta, alpha=alpha, sigma2=sigma2, dt=dt)


# ---------------------------------------------------------------------------
# Replica pairs
# ---------------------------------------------------------------------------

@dataclass
class ReplicaPair:
    """Two replica states of identical shape (optionally batched)."""

    zA: np.ndarray
    zB: np.ndarray

    def __post_init__(self):
        self.zA = np.asarray(self.zA, dtype=float)
        self.zB = np.asarray(self.zB, dtype=float)
        if self.zA.shape != self.zB.shape:
            raise ValueError("replica shapes differ")

    def swapped(self) -> "ReplicaPair":
        return ReplicaPair(self.zB.copy(), self.zA.copy())


def uv_transform(pair: ReplicaPair):
    """Common and difference modes ``u = (zA+zB)/√2``, ``v = (zA-zB)/√2``."""
    return (pair.zA + pair.zB) / SQRT2, (pair.zA - pair.zB) / SQRT2


def from_uv(u, v) -> ReplicaPair:
    """Inverse of :func:`uv_transform`."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return ReplicaPair((u + v) / SQRT2, (u - v) / SQRT2)


@dataclass(frozen=True)
class InitSpec:
    sigma: float
    d_z: int
    rng_seed: int

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("sigma must be finite and non-negative")
        if int(self.d_z) != self.d_z or self.d_z < 1:
            raise ConfigError("d_z must be a positive integer")


def init_replicas(spec: InitSpec, n: int | None = None) -> ReplicaPair:
    """Variance-preserving antisymmetric initialisation.

    ``zA, zB = (z_T ± sigma * delta) / sqrt(1 + sigma^2)`` with shared
    ``z_T`` and ``delta`` both standard normal.  With ``n`` given the draws
    have shape ``(n, d_z)``.
    """
    rng = rng_stream(spec.rng_seed, "init")
    shape = (spec.d_z,) if n is None else (int(n), spec.d_z)
    z = rng.standard_normal(shape)
    delta = rng.standard_normal(shape)
    return pair_from_draws(z, delta, spec.sigma)


def pair_from_draws(z, delta, sigma: float) -> ReplicaPair:
    """Build the replica pair from given shared and antisymmetric draws."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    norm = np.sqrt(1.0 + sigma * sigma)
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return ReplicaPair((z + sigma * delta) / norm, (z - sigma * delta) / norm)


def correlation(sigma: float) -> float:
    """Inter-replica correlation ``(1 - sigma^2) / (1 + sigma^2)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s2 = sigma * sigma
    return (1.0 - s2) / (1.0 + s2)


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------

class GaussianMixture:
    """Symmetric mixture ``½N(m, C) + ½N(-m, C)``.

    ``C`` may be a full SPD matrix or a vector holding its diagonal.
    """

    def __init__(self, m, C):
        self.m = np.atleast_1d(np.asarray(m, dtype=float))
        C = np.asarray(C, dtype=float)
        d = self.m.shape[0]
        if C.ndim == 0:
            C = np.full(d, float(C))
        if C.ndim == 1:
            if C.shape != (d,):
                raise ValueError("diagonal C has the wrong length")
            if np.any(C <= 0):
                raise np.linalg.LinAlgError("diagonal covariance must be positive")
            self.diagonal = True
        elif C.ndim == 2:
            if C.shape != (d, d):
                raise ValueError("C has the wrong shape")
            if not np.allclose(C, C.T, rtol=1e-10, atol=1e-12):
                raise np.linalg.LinAlgError("covariance must be symmetric")
            self.diagonal = False
            self._chol = linalg.cho_factor(C, lower=True)
        else:
            raise ValueError("C must be a scalar, vector or matrix")
        self.C = C

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    def cov_matrix(self) -> np.ndarray:
        return np.diag(self.C) if self.diagonal else self.C

    def solve(self, x):
        """Apply ``C^{-1}`` along the last axis of ``x``."""
        x = np.asarray(x, dtype=float)
        if self.diagonal:
            return x / self.C
        flat = x.reshape(-1, self.dim).T
        return linalg.cho_solve(self._chol, flat).T.reshape(x.shape)

    def precision(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.diagonal:
            logdet = np.sum(np.log(self.C))
        else:
            logdet = 2.0 * np.sum(np.log(np.diag(self._chol[0])))
        const = -0.5 * (self.dim * np.log(2 * np.pi) + logdet)
        qp = np.sum((x - self.m) * self.solve(x - self.m), axis=-1)
        qm = np.sum((x + self.m) * self.solve(x + self.m), axis=-1)
        return const + np.logaddexp(-0.5 * qp, -0.5 * qm) - np.log(2.0)

    def sample(self, rng: np.random.Generator, n: int, return_labels: bool = False):
        labels = rng.integers(0, 2, size=n)
        eps = rng.standard_normal((n, self.dim))
        if self.diagonal:
            noise = eps * np.sqrt(self.C)
        else:
            noise = eps @ self._chol[0].T
        x = np.where(labels[:, None] == 1, 1.0, -1.0) * self.m + noise
        return (x, labels) if return_labels else x

    def noised(self, alpha: float, sigma2: float) -> "GaussianMixture":
        """Marginal mixture after the forward process ``alpha x0 + sigma eps``."""
        if self.diagonal:
            return GaussianMixture(alpha * self.m, alpha * alpha * self.C + sigma2)
        return GaussianMixture(alpha * self.m, alpha * alpha * self.C + sigma2 * np.eye(self.dim))


def mixture_score(mix: GaussianMixture, h) -> np.ndarray:
    """Score ``-C^{-1}h + C^{-1}m tanh(m^T C^{-1} h)`` (batched over rows)."""
    h = np.asarray(h, dtype=float)
    cinv_h = mix.solve(h)
    cinv_m = mix.solve(mix.m)
    proj = cinv_h @ mix.m
    return -cinv_h + np.multiply.outer(np.tanh(proj), cinv_m)


def effective_precision(mix: GaussianMixture) -> np.ndarray:
    """``C^{-1} - C^{-1} m m^T C^{-1}``, minus the score Jacobian at 0."""
    cinv = mix.precision()
    cinv_m = mix.solve(mix.m)
    lam = cinv - np.outer(cinv_m, cinv_m)
    return 0.5 * (lam + lam.T)


# ---------------------------------------------------------------------------
# Score backends
# ---------------------------------------------------------------------------

class LinearScore:
    """Score of a zero-mean Gaussian data law ``N(0, Sigma0)`` under the VP process."""

    layers = 1

    def __init__(self, sched: NoiseSchedule, sigma0):
        self.sched = sched
        sigma0 = np.asarray(sigma0, dtype=float)
        self.sigma0 = sigma0

    def cov(self, s: int) -> np.ndarray:
        a2 = self.sched.alpha[s] ** 2
        s2 = self.sched.sigma2[s]
        if self.sigma0.ndim <= 1:
            return a2 * self.sigma0 + s2
        return a2 * self.sigma0 + s2 * np.eye(self.sigma0.shape[0])

    def score(self, z, s: int) -> np.ndarray:
        cov = self.cov(s)
        z = np.asarray(z, dtype=float)
        if cov.ndim <= 1:
            return -z / cov
        return -np.linalg.solve(cov, z.reshape(-1, cov.shape[0]).T).T.reshape(z.shape)


class MixtureScore:
    """Exact time-dependent score of a :class:`GaussianMixture` data law."""

    layers = 1

    def __init__(self, sched: NoiseSchedule, mix: GaussianMixture):
        self.sched = sched
        self.mix = mix
        self._cache: dict[int, GaussianMixture] = {}

    def marginal(self, s: int) -> GaussianMixture:
        if s not in self._cache:
            self._cache[s] = self.mix.noised(self.sched.alpha[s], self.sched.sigma2[s])
        return self._cache[s]

    def score(self, z, s: int) -> np.ndarray:
        return mixture_score(self.marginal(s), z)

    def eps(self, z, s: int) -> np.ndarray:
        """Optimal noise prediction ``-sigma_s * score``."""
        return -np.sqrt(self.sched.sigma2[s]) * self.score(z, s)


class AnalyticPairBackend:
    """Replica-pair noise predictor built on an exact score.

    The coupling adds the relaxation ``-g (z - z_other)`` to each replica's
    score, i.e. the coupled drift ``f(z) + g beta (z - z_other)`` measured
    in units of the local noise rate so that ``g`` is dimensionless.  At
    ``g = 0`` the replicas are exactly independent.  The only capturable
    layer is the latent itself.
    """

    layers = 1

    def __init__(self, score_model, latent_shape):
        self.score_model = score_model
        self.sched = score_model.sched
        self.latent_shape = tuple(latent_shape)

    def _flat(self, z):
        return z.reshape(z.shape[0], -1)

    def eps_pair(self, zA, zB, s: int, g: float, capture: list | None = None):
        shape = zA.shape
        a = self._flat(zA)
        b = self._flat(zB)
        sig = np.sqrt(self.sched.sigma2[s])
        eA = -sig * self.score_model.score(a, s)
        eB = -sig * self.score_model.score(b, s)
        if g != 0.0:
            eA = eA + g * sig * (a - b)
            eB = eB + g * sig * (b - a)
        if capture is not None:
            capture.append([(a.copy(), b.copy())])
        return eA.reshape(shape), eB.reshape(shape)

    def eps_single(self, z, s: int, capture: list | None = None):
        flat = self._flat(z)
        e = -np.sqrt(self.sched.sigma2[s]) * self.score_model.score(flat, s)
        if capture is not None:
            capture.append([flat.copy()])
        return e.reshape(z.shape)


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

def _report_blowup(*arrays):
    if not all(np.all(np.isfinite(x)) for x in arrays):
        warnings.warn("non-finite values in reverse integration", NumericalBlowupWarning,
                      stacklevel=3)
        return True
    return False


def coupled_reverse_step(pair: ReplicaPair, s: int, sched: NoiseSchedule, g: float,
                         score_fn: Callable, noise, dt: float | None = None) -> ReplicaPair:
    """One Euler-Maruyama step of the coupled reverse SDE, ``s -> s-1``.

    Drift ``f(z) + g (z - z_other)`` with ``f(z) = -½ beta z - beta score(z)``
    is integrated with the reverse-time convention ``dt < 0``; the sign of
    the supplied ``dt`` is ignored and its magnitude (default
    ``sched.dt``) is used.  With that convention the coupling term pulls
    the replicas together.  ``noise`` is a pair ``(xiA, xiB)`` of standard
    normal draws; passing the same array twice shares the noise.

    ``score_fn(z, s)`` returns the score at forward step ``s``.
    """
    if g < 0:
        raise ConfigError("g must be non-negative")
    _check_step(s, sched.S)
    step = abs(sched.dt if dt is None else float(dt))
    beta = sched.beta_at(s)
    zA, zB = pair.zA, pair.zB
    xiA, xiB = noise
    scA = score_fn(zA, s)
    scB = score_fn(zB, s)
    # drift in the dt<0 orientation, applied with dt = -step
    fA = -0.5 * beta * zA - beta * scA + g * (zA - zB)
    fB = -0.5 * beta * zB - beta * scB + g * (zB - zA)
    amp = np.sqrt(beta * step)
    newA = zA - fA * step + amp * np.asarray(xiA, dtype=float)
    newB = zB - fB * step + amp * np.asarray(xiB, dtype=float)
    _report_blowup(newA, newB)
    return ReplicaPair(newA, newB)


def ddim_coefficients(s: int, sched: NoiseSchedule, eta: float):
    """Return ``(c_z, c_eps, c_noise)`` for one DDIM step ``s -> s-1``.

    ``z_{s-1} = c_z z + c_eps eps_hat + c_noise noise``.
    """
    if not 1 <= int(s) <= sched.S:
        raise IndexError(f"step {s} outside 1..{sched.S}")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("eta must lie in [0, 1]")
    a_t = sched.alpha[s]
    a_p = sched.alpha[s - 1]
    ab_t = a_t * a_t
    ab_p = a_p * a_p
    s2_t = sched.sigma2[s]
    s2_p = sched.sigma2[s - 1]
    if s2_t > 0.0:
        var = eta * eta * (s2_p / s2_t) * (1.0 - ab_t / ab_p)
    else:
        var = 0.0
    var = min(max(var, 0.0), s2_p)
    c_z = a_p / a_t
    c_eps = np.sqrt(max(s2_p - var, 0.0)) - a_p * np.sqrt(s2_t) / a_t
    return c_z, c_eps, np.sqrt(var)


def ddim_step(z, s: int, sched: NoiseSchedule, eps_hat, eta: float, noise=None) -> np.ndarray:
    """DDIM update ``s -> s-1`` with stochasticity ``eta``.

    ``eta = 0`` is the deterministic sampler; ``eta = 1`` uses the DDPM
    posterior variance.  ``noise`` may be omitted when ``eta = 0``.
    """
    eps_hat = np.asarray(eps_hat, dtype=float)
    if not np.all(np.isfinite(eps_hat)):
        raise FloatingPointError("eps_hat has non-finite entries")
    c_z, c_eps, c_n = ddim_coefficients(s, sched, eta)
    out = c_z * np.asarray(z, dtype=float) + c_eps * eps_hat
    if c_n > 0.0:
        if noise is None:
            raise ValueError("noise is required when eta > 0")
        out = out + c_n * np.asarray(noise, dtype=float)
    return out


def simulate_coupled_ou(sched: NoiseSchedule, score_fn: Callable, g: float, n: int, d: int,
                        sigma: float = 1.0, rng_seed: int = 0, record_steps=None):
    """Run the coupled reverse SDE for ``n`` trajectories from ``s = S`` down to 0.

    Initial replicas use :func:`init_replicas`; the reverse noises are drawn
    from a stream that does not depend on ``g`` so sweeps over ``g`` share
    random numbers.  Returns a dict mapping each recorded forward step to
    the :class:`ReplicaPair` at that step.
    """
    record = set(range(sched.S + 1) if record_steps is None else record_steps)
    pair = init_replicas(InitSpec(sigma, d, rng_seed), n=n)
    rng = rng_stream(rng_seed, "ou-noise")
    out = {}
    if sched.S in record:
        out[sched.S] = pair
    for s in range(sched.S, 0, -1):
        xi = rng.standard_normal((2, n, d))
        pair = coupled_reverse_step(pair, s, sched, g, score_fn, (xi[0], xi[1]))
        if s - 1 in record:
            out[s - 1] = pair
    return out
