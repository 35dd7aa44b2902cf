"""Mean-field speciation of difference modes.

Each empirical mode ``r_k`` gets a projected covariance ``c_k``, branch
separation ``m_k`` and one-block gain ``eta_k = 1 + lambda_mlp + rho chi +
xi pi``.  The mode commits to a branch when

    kappa_k = gamma m_k^2 / (c_k ((1 - eta_k) c_k + gamma))

exceeds one, where the scalar self-consistency ``u = kappa tanh(u)`` first
acquires a non-zero root.  The synchronisation gap is the difference in
commitment steps between a slow (trailing) and a fast (leading) mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import ConfigError, GaussianMixture
from .dit import gating_functions
from .numerics import bisect_root


class OutOfRegimeError(ValueError):
    """Raised when the positivity condition for the SNR fails."""


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalProjection:
    c: float
    m: float
    eta: float
    lambda_mlp: float = 0.0
    chi: float = 0.0
    pi: float = 0.0
    k: int = 0

    @property
    def mu(self) -> float:
        return 1.0 / self.c

    @classmethod
    def from_components(cls, c, m, lambda_mlp, chi, pi, g, k=0) -> "ModalProjection":
        rho, xi = gating_functions(g)
        eta = 1.0 + lambda_mlp + rho * chi + xi * pi
        return cls(c=float(c), m=float(m), eta=float(eta), lambda_mlp=float(lambda_mlp),
                   chi=float(chi), pi=float(pi), k=k)


def project_modal(r_k, C, m, K_g, k: int = 0) -> ModalProjection:
    """Project covariance, separation and propagator onto a unit mode.

    ``K_g`` may be a plain matrix or a
    :class:`~replica_sync.linear_response.PropagatorSpec`; in the latter case
    the gain is split into its MLP, routing and pattern parts.
    """
    r = np.asarray(r_k, dtype=float)
    if abs(np.linalg.norm(r) - 1.0) > 1e-12:
        raise ValueError("r_k must be a unit vector")
    Cm = np.asarray(C, dtype=float)
    c = float(r @ Cm @ r) if Cm.ndim == 2 else float(np.sum(Cm * r * r))
    mk = float(r @ np.asarray(m, dtype=float))
    if hasattr(K_g, "J_mlp"):
        lam = float(r @ K_g.J_mlp @ r)
        chi = float(r @ K_g.R @ r)
        pi = float(r @ K_g.P @ r)
        eta = float(r @ K_g.K @ r)
        return ModalProjection(c=c, m=mk, eta=eta, lambda_mlp=lam, chi=chi, pi=pi, k=k)
    K = np.asarray(K_g, dtype=float)
    eta = float(r @ K @ r)
    return ModalProjection(c=c, m=mk, eta=eta, lambda_mlp=eta - 1.0, k=k)


# ---------------------------------------------------------------------------
# Self-consistency
# ---------------------------------------------------------------------------

def solve_self_consistency(kappa: float, tol: float = 1e-12) -> float:
    """Non-negative root of ``u = kappa tanh(u)``: zero for ``kappa <= 1``."""
    if kappa < 0 or not np.isfinite(kappa):
        raise ValueError("kappa must be finite and non-negative")
    if kappa <= 1.0:
        return 0.0
    f = lambda u: u - kappa * math.tanh(u)
    return bisect_root(f, tol, kappa, tol)


# ---------------------------------------------------------------------------
# kappa and SNR
# ---------------------------------------------------------------------------

def positivity_margin(proj: ModalProjection, gamma: float) -> float:
    """``(1 - eta) c + gamma``; must be positive for the mean-field picture."""
    return (1.0 - proj.eta) * proj.c + gamma


def _check_regime(proj, gamma):
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    margin = positivity_margin(proj, gamma)
    if not margin > 0:
        raise OutOfRegimeError(
            f"positivity violated: (1 - eta) c + gamma = {margin:.6g} <= 0 for mode {proj.k}")
    return margin


def kappa(proj: ModalProjection, gamma: float = 1.0) -> float:
    """Modewise speciation parameter ``gamma m^2 / (c ((1-eta) c + gamma))``."""
    margin = _check_regime(proj, gamma)
    return gamma * proj.m ** 2 / (proj.c * margin)


def snr(proj: ModalProjection, gamma: float = 1.0) -> float:
    """Difference-mode SNR ``m^2 / (c ((1-eta) c + gamma))``."""
    margin = _check_regime(proj, gamma)
    return proj.m ** 2 / (proj.c * margin)


def snr_expanded(proj: ModalProjection, gamma: float, g: float) -> float:
    """SNR from the gain components: ``m^2 mu^2 / (gamma mu - lambda - rho chi - xi pi)``."""
    _check_regime(proj, gamma)
    rho, xi = gating_functions(g)
    mu = proj.mu
    den = gamma * mu - proj.lambda_mlp - rho * proj.chi - xi * proj.pi
    return proj.m ** 2 * mu ** 2 / den


def cumulative_gain(etas: Sequence[float]) -> float:
    """Ordered product of one-block gains (1 for an empty prefix)."""
    out = 1.0
    for e in etas:
        out *= float(e)
    return out


def propagated_snr(G: float, m_init: float, c: float, eta: float, gamma: float = 1.0) -> float:
    """SNR with the separation carried forward multiplicatively, ``m = G m_init``."""
    return snr(ModalProjection(c=c, m=G * m_init, eta=eta), gamma)


# ---------------------------------------------------------------------------
# Crossing and gap
# ---------------------------------------------------------------------------

def speciation_step(kappa_curve) -> float | None:
    """First upward crossing of one, linearly interpolated; ``None`` if censored."""
    k = np.asarray(kappa_curve, dtype=float)
    if not np.all(np.isfinite(k)):
        raise ValueError("kappa curve must be finite")
    if k.size == 0:
        return None
    if k[0] >= 1.0:
        return 0.0
    above = np.nonzero(k >= 1.0)[0]
    if above.size == 0:
        return None
    i = int(above[0])
    k0, k1 = k[i - 1], k[i]
    return float(i - 1 + (1.0 - k0) / (k1 - k0))


def sync_gap(s_lo: float | None, s_hi: float | None) -> float | None:
    """``s_lo - s_hi``; ``None`` (censored) if either input is censored."""
    if s_lo is None or s_hi is None:
        return None
    return float(s_lo) - float(s_hi)


@dataclass
class GapReport:
    g: float
    layer: int
    steps: dict
    gap: float | None
    kappa_curves: dict
    snr_curves: dict

    @property
    def censored(self) -> bool:
        return self.gap is None

    def to_dict(self) -> dict:
        return {
            "g": self.g,
            "layer": self.layer,
            "speciation_steps": {str(k): v for k, v in self.steps.items()},
            "gap": self.gap,
            "censored": self.censored,
            "snr_curves": {str(k): list(map(float, v)) for k, v in self.snr_curves.items()},
            "kappa_curves": {str(k): list(map(float, v)) for k, v in self.kappa_curves.items()},
        }


# ---------------------------------------------------------------------------
# Fixed point
# ---------------------------------------------------------------------------

def _K_matrix(K_g):
    return K_g.K if hasattr(K_g, "K") and not isinstance(K_g, np.ndarray) else np.asarray(K_g, dtype=float)


def fixed_point_residual(v, K_g, mix: GaussianMixture, gamma: float = 1.0) -> float:
    """Norm of ``[(I - K) + gamma C^-1] v - gamma C^-1 m tanh(m^T C^-1 v)``."""
    v = np.asarray(v, dtype=float)
    K = _K_matrix(K_g)
    cinv_v = mix.solve(v)
    cinv_m = mix.solve(mix.m)
    r = v - K @ v + gamma * cinv_v - gamma * cinv_m * np.tanh(mix.m @ cinv_v)
    return float(np.linalg.norm(r))


def fixed_point_residual_repartitioned(v, K_tilde, mix: GaussianMixture, gamma: float = 1.0) -> float:
    """Same residual written with ``K~ = K - gamma Lambda_eff`` and the tanh remainder.

    ``(I - K~) v - gamma C^-1 m [tanh(m^T C^-1 v) - m^T C^-1 v]``.
    """
    v = np.asarray(v, dtype=float)
    Kt = np.asarray(K_tilde, dtype=float)
    cinv_m = mix.solve(mix.m)
    proj = float(cinv_m @ v)
    r = v - Kt @ v - gamma * cinv_m * (np.tanh(proj) - proj)
    return float(np.linalg.norm(r))


# ---------------------------------------------------------------------------
# Routing-dominant synthetic model
# ---------------------------------------------------------------------------

@dataclass
class RoutingDominantModel:
    """Two modes differing only in their routing gain ``chi``.

    Both modes share ``c``, ``m_init`` and the MLP gain; the pattern gain is
    zero.  The branch separation of mode ``k`` after ``s`` blocks is
    ``eta_k^s m_init`` (cumulative gain of a constant per-block gain), and
    ``kappa`` follows from the propagated SNR.
    """

    chi_hi: float = 0.03
    chi_lo: float = 0.01
    lambda_mlp: float = 0.04
    c: float = 1.0
    m_init: float = 0.05
    gamma: float = 1.0
    steps: int = 100

    def projection(self, which: str, g: float, m: float | None = None) -> ModalProjection:
        chi = self.chi_hi if which == "hi" else self.chi_lo
        return ModalProjection.from_components(self.c, self.m_init if m is None else m,
                                               self.lambda_mlp, chi, 0.0, g,
                                               k=0 if which == "hi" else 1)

    def curves(self, g: float):
        """Return ``{mode: (kappa_curve, snr_curve)}`` over steps ``0..steps``."""
        out = {}
        for which in ("hi", "lo"):
            base = self.projection(which, g)
            gains = [cumulative_gain([base.eta] * s) for s in range(self.steps + 1)]
            snrs = np.array([propagated_snr(G, self.m_init, self.c, base.eta, self.gamma) for G in gains])
            out[which] = (self.gamma * snrs, snrs)
        return out

    def gap_report(self, g: float, layer: int = 0) -> GapReport:
        curves = self.curves(g)
        steps = {w: speciation_step(curves[w][0]) for w in curves}
        return GapReport(g=float(g), layer=layer, steps=steps,
                         gap=sync_gap(steps["lo"], steps["hi"]),
                         kappa_curves={w: curves[w][0] for w in curves},
                         snr_curves={w: curves[w][1] for w in curves})

    def snr_split(self, g: float) -> float:
        """``SNR_hi - SNR_lo`` at the initial separation."""
        return snr(self.projection("hi", g), self.gamma) - snr(self.projection("lo", g), self.gamma)
