"""Measurement protocols on replica pairs.

Protocol I couples two replicas up to an intervention step, lets them
finish independently with the stochastic sampler and records how much the
final outputs agree (feature cosine, coarse and fine discrepancies) as a
function of the intervention step.  Protocol II keeps the replicas coupled
with the deterministic sampler and tracks, per captured layer, the energy
of the hidden-state difference along a fixed empirical eigenbasis.

Both protocols work with any pair backend exposing
``eps_pair(zA, zB, s, g, capture)`` and ``eps_single(z, s, capture)`` on
batched latents of shape ``(B, *latent_shape)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import ConfigError, GaussianMixture, NoiseSchedule, ddim_step, pair_from_draws
from .numerics import (DegenerateFitError, LogisticFit, bootstrap_ci, fit_logistic, rng_stream,
                       sym_eig)

SQRT2 = np.sqrt(2.0)


class RankError(ValueError):
    """Raised when more modes are requested than the stack supports."""

    def __init__(self, requested, usable):
        super().__init__(f"requested {requested} modes but only {usable} are usable")
        self.requested = requested
        self.usable = usable


# ---------------------------------------------------------------------------
# Image-space measurements
# ---------------------------------------------------------------------------

def avg_pool(x, k: int) -> np.ndarray:
    """Average pooling with window and stride ``k`` over the last two axes."""
    x = np.asarray(x, dtype=float)
    H, W = x.shape[-2:]
    if k < 1 or H % k or W % k:
        raise ConfigError(f"pool size {k} does not divide {H}x{W}")
    lead = x.shape[:-2]
    return x.reshape(lead + (H // k, k, W // k, k)).mean(axis=(-3, -1))


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D linear interpolation with half-pixel centres and edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    U = np.zeros((n_out, n_in))
    U[np.arange(n_out), lo] += 1.0 - frac
    U[np.arange(n_out), hi] += frac
    return U


def upsample(x, k: int, mode: str = "bilinear") -> np.ndarray:
    """Upsample the last two axes by an integer factor ``k``."""
    x = np.asarray(x, dtype=float)
    h, w = x.shape[-2:]
    if mode == "nearest":
        return np.repeat(np.repeat(x, k, axis=-2), k, axis=-1)
    if mode != "bilinear":
        raise ConfigError(f"unknown upsampling mode {mode!r}")
    Uh = _bilinear_matrix(h * k, h)
    Uw = _bilinear_matrix(w * k, w)
    return np.einsum("ij,...jl,kl->...ik", Uh, x, Uw)


def scale_decomposition(xA, xB, pool_size: int = 2, mode: str = "bilinear"):
    """Coarse and fine squared discrepancies between two images.

    ``d_low = ||P xA - P xB||^2`` and
    ``d_high = ||(xA - U P xA) - (xB - U P xB)||^2`` with ``P`` average
    pooling and ``U`` upsampling.  Leading axes are treated as batch axes
    except the channel axis, which is summed over.
    """
    xA = np.asarray(xA, dtype=float)
    xB = np.asarray(xB, dtype=float)
    if xA.shape != xB.shape:
        raise ValueError("images must have equal shapes")
    diff = xA - xB
    pooled = avg_pool(diff, pool_size)
    fine = diff - upsample(pooled, pool_size, mode)
    axes = tuple(range(max(diff.ndim - 3, 0), diff.ndim)) if diff.ndim >= 3 else (-2, -1)
    paxes = axes
    d_low = np.sum(pooled * pooled, axis=paxes)
    d_high = np.sum(fine * fine, axis=axes)
    return d_low, d_high


def feature_map(x, m_hat, pool_size: int = 2) -> np.ndarray:
    """Toy feature vector: branch projection plus mean-centred pooled pixels.

    ``x`` has shape ``(..., C, H, W)``; ``m_hat`` is a unit vector over the
    flattened image.
    """
    x = np.asarray(x, dtype=float)
    C, H, W = x.shape[-3:]
    lead = x.shape[:-3]
    flat = x.reshape(lead + (C * H * W,))
    proj = flat @ np.asarray(m_hat, dtype=float)
    pooled = avg_pool(x, pool_size).reshape(lead + (-1,))
    pooled = pooled - pooled.mean(axis=-1, keepdims=True)
    return np.concatenate([proj[..., None], pooled], axis=-1)


def feature_agreement(xA, xB, mix: GaussianMixture | None = None, m_hat=None, pool_size: int = 2):
    """Cosine between feature vectors; ``nan`` where a feature vector vanishes."""
    if m_hat is None:
        if mix is None:
            raise ValueError("need a mixture or a branch direction")
        m_hat = mix.m / np.linalg.norm(mix.m)
    fA = feature_map(xA, m_hat, pool_size)
    fB = feature_map(xB, m_hat, pool_size)
    nA = np.linalg.norm(fA, axis=-1)
    nB = np.linalg.norm(fB, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.sum(fA * fB, axis=-1) / (nA * nB)
    cos = np.where((nA > 0) & (nB > 0), np.clip(cos, -1.0, 1.0), np.nan)
    return float(cos) if np.ndim(cos) == 0 else cos


# ---------------------------------------------------------------------------
# Mode basis
# ---------------------------------------------------------------------------

@dataclass
class ModeBasis:
    layer: int
    vectors: np.ndarray          # (D, K) unit columns r_k
    eigenvalues: np.ndarray      # (M,) descending eigenvalues of the dual Gram
    initial_energy: np.ndarray   # (K,) ||V0 r_k||^2
    M: int
    D: int
    usable: int

    @property
    def K(self) -> int:
        return self.vectors.shape[1]


def build_mode_basis(V0, K: int, layer: int = 0, rank_tol: float = 1e-10) -> ModeBasis:
    """Principal modes of the initial difference stack via its dual Gram matrix.

    The ``M x M`` Gram ``V0 V0^T / M`` is diagonalised and its eigenvectors
    are lifted to ``r_k ∝ V0^T w_k``; the eigenvalues coincide with the
    non-zero eigenvalues of ``V0^T V0 / M``.  Modes with eigenvalue below
    ``rank_tol * lambda_max`` are unusable.
    """
    V0 = np.asarray(V0, dtype=float)
    if V0.ndim != 2:
        raise ValueError("V0 must be an (M, D) stack")
    M, D = V0.shape
    if K > M:
        raise RankError(K, M)
    G = V0 @ V0.T / M
    lam, W = sym_eig(G)
    top = lam[0] if lam.size else 0.0
    usable = int(np.sum(lam > rank_tol * top)) if top > 0 else 0
    if K > usable:
        raise RankError(K, usable)
    R = V0.T @ W[:, :K]
    R = R / np.linalg.norm(R, axis=0, keepdims=True)
    proj = V0 @ R
    init = np.sum(proj * proj, axis=0)
    return ModeBasis(layer=layer, vectors=R, eigenvalues=lam, initial_energy=init, M=M, D=D,
                     usable=usable)


def mode_energies(V_s, basis: ModeBasis) -> np.ndarray:
    """Normalised energies ``||V_s r_k||^2 / ||V_0 r_k||^2`` for all basis modes."""
    proj = np.asarray(V_s, dtype=float) @ basis.vectors
    return np.sum(proj * proj, axis=0) / basis.initial_energy


def mode_energy(V_s, basis: ModeBasis, k: int) -> float:
    """Normalised energy of mode ``k`` (0-based)."""
    if basis.initial_energy[k] <= 0:
        return float("nan")
    r = basis.vectors[:, k]
    p = np.asarray(V_s, dtype=float) @ r
    return float(p @ p / basis.initial_energy[k])


def per_seed_energies(V_s, basis: ModeBasis) -> np.ndarray:
    """Per-seed contributions whose mean over seeds is the mode energy, ``(M, K)``."""
    proj = np.asarray(V_s, dtype=float) @ basis.vectors
    return proj * proj / (basis.initial_energy / basis.M)


# ---------------------------------------------------------------------------
# Protocol I
# ---------------------------------------------------------------------------

@dataclass
class ProtocolIRun:
    g: float
    t_grid: np.ndarray
    seeds: int
    a_feat: np.ndarray        # (M, n_t)
    d_low: np.ndarray
    d_high: np.ndarray
    baseline: np.ndarray      # (M,) independent-pair agreement
    fits: dict
    tau_spec: float
    ci: tuple
    tau_g: float
    tau_l: float
    delta_tau: float
    flags: list = field(default_factory=list)

    @property
    def median_agreement(self) -> np.ndarray:
        return np.nanmedian(self.a_feat, axis=0)


def _draw_seed(master: int, stream: str, seed: int, shape, S: int):
    rng = rng_stream(master, stream, seed)
    z = rng.standard_normal(shape)
    delta = rng.standard_normal(shape)
    noise = rng.standard_normal((S, 2) + tuple(shape))
    return z, delta, noise


def _safe_fit(t, y):
    try:
        return fit_logistic(t, y)
    except (DegenerateFitError, ValueError):
        return None


def _tau(fit):
    return float("nan") if fit is None else fit.tau


def simulate_intervention(backend, sched: NoiseSchedule, g: float, t_grid, z, delta, noise,
                          sigma: float, eta: float = 1.0, share_noise: bool = False):
    """Final replica outputs for every intervention step and seed.

    ``z``, ``delta`` have shape ``(M, *latent)`` and ``noise`` shape
    ``(M, S, 2, *latent)``.  Replicas are coupled (or share noise, for the
    control) while the number of completed reverse steps is below
    ``t_int``.  Returns arrays of shape ``(n_t, M, *latent)``.
    """
    t_grid = np.asarray(t_grid, dtype=int)
    n_t = t_grid.size
    M = z.shape[0]
    latent = z.shape[1:]
    pair = pair_from_draws(z, delta, sigma)
    zA = np.broadcast_to(pair.zA, (n_t,) + pair.zA.shape).reshape((n_t * M,) + latent).copy()
    zB = np.broadcast_to(pair.zB, (n_t,) + pair.zB.shape).reshape((n_t * M,) + latent).copy()
    t_of = np.repeat(t_grid, M)
    S = sched.S
    for r in range(S):
        s = S - r
        nA = np.tile(noise[:, r, 0], (n_t,) + (1,) * len(latent))
        nB = np.tile(noise[:, r, 1], (n_t,) + (1,) * len(latent))
        active = r < t_of
        eA = np.empty_like(zA)
        eB = np.empty_like(zB)
        g_on = 0.0 if share_noise else g
        if np.any(active):
            a, b = backend.eps_pair(zA[active], zB[active], s, g_on)
            eA[active], eB[active] = a, b
        if np.any(~active):
            a, b = backend.eps_pair(zA[~active], zB[~active], s, 0.0)
            eA[~active], eB[~active] = a, b
        if share_noise:
            nB = np.where(active.reshape((-1,) + (1,) * len(latent)), nA, nB)
        zA = ddim_step(zA, s, sched, eA, eta, nA)
        zB = ddim_step(zB, s, sched, eB, eta, nB)
    return zA.reshape((n_t, M) + latent), zB.reshape((n_t, M) + latent)


def run_protocol1(backend, sched: NoiseSchedule, g: float, t_grid=None, M: int = 32,
                  sigma: float = 1.0, eta: float = 1.0, rng_seed: int = 0,
                  mix: GaussianMixture | None = None, m_hat=None, pool_size: int = 2,
                  share_noise: bool = False, n_boot: int = 200, level: float = 0.95) -> ProtocolIRun:
    """Intervention sweep for one coupling strength.

    Seeds draw their initial state and all reverse noises from per-seed
    streams that do not depend on ``g`` or ``t_int``.  Agreement curves are
    aggregated by the median over seeds and fitted with a four-parameter
    logistic; the midpoint CI is a seed bootstrap.  ``share_noise=True``
    gives the uncoupled control in which the replicas share noise up to
    ``t_int`` instead of being coupled.
    """
    if M < 8:
        raise ConfigError("Protocol I needs at least 8 seeds")
    if t_grid is None:
        t_grid = np.arange(0, sched.S + 1, 2)
    t_grid = np.asarray(t_grid, dtype=int)
    if t_grid.min() < 0 or t_grid.max() > sched.S:
        raise ConfigError("intervention steps must lie within the schedule")
    if m_hat is None:
        if mix is None:
            raise ConfigError("need the mixture or a branch direction for the feature map")
        m_hat = mix.m / np.linalg.norm(mix.m)
    latent = tuple(backend.latent_shape)
    S = sched.S
    draws = [_draw_seed(rng_seed, "protocol1", i, latent, S) for i in range(M)]
    z = np.stack([d[0] for d in draws])
    delta = np.stack([d[1] for d in draws])
    noise = np.stack([d[2] for d in draws])
    xA, xB = simulate_intervention(backend, sched, g, t_grid, z, delta, noise, sigma, eta, share_noise)
    a_feat = feature_agreement(xA, xB, m_hat=m_hat, pool_size=pool_size).T  # (M, n_t)
    d_low, d_high = scale_decomposition(xA, xB, pool_size)
    d_low, d_high = d_low.T, d_high.T

    base = [_draw_seed(rng_seed, "protocol1-baseline", i, latent, S) for i in range(M)]
    bz = np.stack([d[0] for d in base])
    bdel = np.stack([d[1] for d in base])
    bnoise = np.stack([d[2] for d in base])
    bA, bB = simulate_intervention(backend, sched, 0.0, np.array([0]), bz, bdel, bnoise, 1.0, eta)
    baseline = feature_agreement(bA[0], bB[0], m_hat=m_hat, pool_size=pool_size)

    flags = []
    fits = {}
    curves = {"spec": a_feat, "low": d_low, "high": d_high}
    for name, arr in curves.items():
        fits[name] = _safe_fit(t_grid, np.nanmedian(arr, axis=0))
        if fits[name] is None:
            flags.append(f"degenerate-fit:{name}")

    def stat(sample):
        fit = _safe_fit(t_grid, np.nanmedian(sample, axis=0))
        return _tau(fit)

    if fits["spec"] is not None:
        ci = bootstrap_ci(a_feat, stat, B=n_boot, level=level, rng_seed=rng_seed)
    else:
        ci = (float("nan"), float("nan"))
    tau_g, tau_l = _tau(fits["low"]), _tau(fits["high"])
    return ProtocolIRun(g=float(g), t_grid=t_grid, seeds=M, a_feat=a_feat, d_low=d_low,
                        d_high=d_high, baseline=baseline, fits=fits, tau_spec=_tau(fits["spec"]),
                        ci=ci, tau_g=tau_g, tau_l=tau_l, delta_tau=tau_l - tau_g, flags=flags)


# ---------------------------------------------------------------------------
# Protocol II
# ---------------------------------------------------------------------------

@dataclass
class ProtocolIIRun:
    g: float
    tau_spec: int
    layers: list
    energies: dict            # layer -> (n_steps, K)
    lead_mean: dict
    trail_mean: dict
    gint: dict
    spread: dict
    lead_std: dict
    trail_std: dict
    bands: tuple
    flags: dict = field(default_factory=dict)


def _check_bands(bands, K):
    lead, trail = (tuple(int(k) for k in b) for b in bands)
    if set(lead) & set(trail):
        raise ConfigError("leading and trailing bands overlap")
    if min(lead + trail) < 1 or max(lead + trail) > K:
        raise ConfigError(f"band indices must lie in 1..{K}")
    return lead, trail


def default_bands(K: int = 16):
    return tuple(range(1, 5)), tuple(range(K - 3, K + 1))


def capture_trajectory(backend, sched: NoiseSchedule, zA, zB, g: float, independent: bool = False):
    """Deterministic (eta=0) coupled run; per-step, per-layer hidden differences.

    Returns a list over reverse steps ``r = 0..S-1`` of lists over layers of
    ``(M, D)`` difference stacks ``(H_A - H_B)/√2``.  With
    ``independent=True`` the replicas are run through the single-replica
    path separately and only combined afterwards.
    """
    S = sched.S
    out = []
    for r in range(S):
        s = S - r
        if independent:
            capA, capB = [], []
            eA = backend.eps_single(zA, s, capA)
            eB = backend.eps_single(zB, s, capB)
            diffs = [(a - b) / SQRT2 for a, b in zip(capA[0], capB[0])]
        else:
            cap = []
            eA, eB = backend.eps_pair(zA, zB, s, g, cap)
            diffs = [(a - b) / SQRT2 for a, b in cap[0]]
        out.append(diffs)
        zA = ddim_step(zA, s, sched, eA, 0.0)
        zB = ddim_step(zB, s, sched, eB, 0.0)
    return out


def ratio_spread(num, den) -> float:
    """Seed-level standard deviation of ``mean(num)/mean(den)`` by the delta method.

    Per-seed ratios are heavy-tailed when a seed's leading energy is small,
    so the spread is propagated from the seed-level moments instead.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    a, b = num.mean(), den.mean()
    if b <= 0:
        return float("nan")
    cov = np.cov(np.stack([num, den]), bias=True)
    r = a / b
    var = r * r * (cov[0, 0] / a ** 2 + cov[1, 1] / b ** 2 - 2 * cov[0, 1] / (a * b)) if a > 0 else cov[0, 0] / b ** 2
    return float(np.sqrt(max(var, 0.0)))


def protocol2_from_captures(captures, g: float, tau_spec: int, layers, K: int, bands) -> ProtocolIIRun:
    """Mode energies, band means and gap ratios from captured difference stacks."""
    lead, trail = _check_bands(bands, K)
    n_steps = len(captures)
    energies, lead_mean, trail_mean, gint, spread, lead_std, trail_std, flags = ({} for _ in range(8))
    for layer in layers:
        V0 = captures[0][layer]
        try:
            basis = build_mode_basis(V0, K, layer)
        except RankError as err:
            flags[layer] = f"rank:{err.usable}"
            continue
        E = np.stack([mode_energies(captures[r][layer], basis) for r in range(n_steps)])
        energies[layer] = E
        per_seed = per_seed_energies(captures[tau_spec][layer], basis)
        li = [k - 1 for k in lead]
        ti = [k - 1 for k in trail]
        lm = float(E[tau_spec, li].mean())
        tm = float(E[tau_spec, ti].mean())
        lead_mean[layer], trail_mean[layer] = lm, tm
        gint[layer] = tm / lm if lm > 0 else float("nan")
        seed_lead = per_seed[:, li].mean(axis=1)
        seed_trail = per_seed[:, ti].mean(axis=1)
        lead_std[layer] = float(seed_lead.std())
        trail_std[layer] = float(seed_trail.std())
        spread[layer] = ratio_spread(seed_trail, seed_lead)
    return ProtocolIIRun(g=float(g), tau_spec=int(tau_spec), layers=list(layers), energies=energies,
                         lead_mean=lead_mean, trail_mean=trail_mean, gint=gint, spread=spread,
                         lead_std=lead_std, trail_std=trail_std, bands=(lead, trail), flags=flags)


def protocol2_init(backend, M: int, sigma: float, rng_seed: int):
    latent = tuple(backend.latent_shape)
    draws = [_draw_seed(rng_seed, "protocol2", i, latent, 0) for i in range(M)]
    z = np.stack([d[0] for d in draws])
    delta = np.stack([d[1] for d in draws])
    pair = pair_from_draws(z, delta, sigma)
    return pair.zA, pair.zB


def run_protocol2(backend, sched: NoiseSchedule, g: float, tau_spec, layers=None, M: int = 32,
                  bands=None, rng_seed: int = 0, sigma: float = 1.0, K: int = 16,
                  independent: bool = False) -> ProtocolIIRun:
    """Fixed-basis mode energies of the hidden-state difference for one ``g``.

    ``tau_spec`` is a reverse-step index (rounded to the nearest step);
    ``layers`` defaults to all capturable layers.  Layers whose initial
    stack lacks the rank for ``K`` modes are flagged and skipped.
    """
    tau = int(round(float(tau_spec)))
    if not 0 <= tau < sched.S:
        raise ConfigError(f"tau_spec {tau_spec} outside 0..{sched.S - 1}")
    if bands is None:
        bands = default_bands(K)
    if layers is None:
        layers = list(range(backend.layers))
    zA, zB = protocol2_init(backend, M, sigma, rng_seed)
    caps = capture_trajectory(backend, sched, zA, zB, g, independent=independent)
    return protocol2_from_captures(caps, g, tau, layers, K, bands)


# ---------------------------------------------------------------------------
# Default analytic data model
# ---------------------------------------------------------------------------

def default_mixture(latent_shape=(1, 8, 8), amplitude: float = 4.0, length_scale: float = 1.5,
                    variance: float = 1.0, nugget: float = 0.05) -> GaussianMixture:
    """Symmetric two-branch mixture with a smooth branch direction.

    The branch mean is a single low-frequency cosine pattern scaled to norm
    ``amplitude``; the within-branch covariance is a squared-exponential
    spatial kernel plus a white nugget, so coarse structure carries most of
    the variance and fine structure is nearly white.
    """
    C_, H, W = latent_shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pattern = np.cos(np.pi * (xx + 0.5) / W) + 0.0 * yy
    m = np.tile(pattern.ravel(), C_)
    m = amplitude * m / np.linalg.norm(m)
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
    d2 = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=-1)
    k = variance * np.exp(-0.5 * d2 / length_scale ** 2)
    C = np.kron(np.eye(C_), k) + nugget * np.eye(C_ * H * W)
    return GaussianMixture(m, C)
