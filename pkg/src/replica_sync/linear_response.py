"""Linear response of the replica difference through one DiT block.

Around a symmetric state ``H_A = H_B = H0`` with antisymmetric perturbation
``H_{A,B} = H0 ± h/√2`` the attention difference splits into a routing
term (the unperturbed kernel transporting the perturbed values) and a
pattern term (the perturbation reshaping the attention weights through the
softmax Jacobian), weighted by ``rho(g) = (1-g)/(1+g)`` and
``xi(g) = 1/(1+g)``.  This module builds both terms analytically, measures
the exact difference, assembles the per-block difference propagator by
finite differences and checks the softmax identities and the
routing-dominance bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import ConfigError, GaussianMixture, effective_precision
from .dit import DiT, _heads, _merge, gating_functions
from .numerics import rng_stream, softmax_rows

SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# Softmax Jacobian and attention-matrix identities
# ---------------------------------------------------------------------------

def softmax_jacobian_apply(A0, dS, check: bool = True) -> np.ndarray:
    """First-order change of softmax rows: ``A0 * (dS - sum_k A0_k dS_k)``.

    Works row-wise over the last axis of arrays of any leading shape.
    """
    A0 = np.asarray(A0, dtype=float)
    dS = np.asarray(dS, dtype=float)
    if check:
        if np.any(A0 < 0) or np.max(np.abs(A0.sum(axis=-1) - 1.0)) > 1e-10:
            raise ValueError("A0 rows must be non-negative and sum to 1")
    centred = dS - np.sum(A0 * dS, axis=-1, keepdims=True)
    return A0 * centred


def effective_attention_width(A0) -> np.ndarray:
    """Per-row effective number of attended tokens ``1 / sum_j A_ij^2``."""
    A0 = np.asarray(A0, dtype=float)
    return 1.0 / np.sum(A0 * A0, axis=-1)


def mean_projector(n: int) -> np.ndarray:
    return np.full((n, n), 1.0 / n)


def check_projector_identities(A0, n_trials: int = 8, rng_seed: int = 0, tol: float = 1e-12) -> dict:
    """Check the averaging-projector identities for one attention matrix.

    Verifies ``A0 P0 = P0``, ``dA 1 = 0``, ``dA = dA P_perp`` and
    ``dA V0 = dA P_perp V0`` for random logit perturbations and values.
    Returns a report with the worst deviations and the first offending
    row, if any.
    """
    A0 = np.asarray(A0, dtype=float)
    n = A0.shape[-1]
    if A0.shape != (n, n):
        raise ValueError("A0 must be square")
    if np.any(A0 < 0) or np.max(np.abs(A0.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("A0 must be row-stochastic")
    P0 = mean_projector(n)
    Pp = np.eye(n) - P0
    rng = rng_stream(rng_seed, "projector-identities")
    rows = np.abs(A0 @ P0 - P0).max(axis=1)
    report = {"A0P0": float(rows.max()), "dA_rowsum": 0.0, "dA_Pperp": 0.0, "pattern_subspace": 0.0}
    offending = None
    if rows.max() > tol:
        offending = ("A0P0", int(np.argmax(rows)))
    for _ in range(n_trials):
        dS = rng.standard_normal((n, n))
        V0 = rng.standard_normal((n, 3))
        dA = softmax_jacobian_apply(A0, dS)
        rowsum = np.abs(dA.sum(axis=1))
        report["dA_rowsum"] = max(report["dA_rowsum"], float(rowsum.max()))
        d1 = np.abs(dA - dA @ Pp).max(axis=1)
        report["dA_Pperp"] = max(report["dA_Pperp"], float(d1.max()))
        d2 = np.abs(dA @ V0 - dA @ Pp @ V0).max(axis=1)
        report["pattern_subspace"] = max(report["pattern_subspace"], float(d2.max()))
        if offending is None:
            for name, vals in (("dA_rowsum", rowsum), ("dA_Pperp", d1), ("pattern_subspace", d2)):
                if vals.max() > tol:
                    offending = (name, int(np.argmax(vals)))
                    break
    report["ok"] = offending is None
    report["offending"] = offending
    return report


def perp_operator_norm(A0, iterations: int = 50, tol: float = 1e-10) -> float:
    """Spectral norm of ``A0 P_perp`` by power iteration on its Gram operator."""
    A0 = np.asarray(A0, dtype=float)
    n = A0.shape[1]
    M = A0 - A0.mean(axis=1, keepdims=True)  # A0 @ P_perp
    x = np.cos(1.0 + np.arange(n) * 0.7548776662466927)
    x -= x.mean()
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        return 0.0
    x /= nrm
    lam = 0.0
    for _ in range(iterations):
        y = M.T @ (M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        new = np.sqrt(ny)
        x = y / ny
        if abs(new - lam) <= tol * max(new, 1.0):
            lam = new
            break
        lam = new
    return float(np.linalg.norm(M @ x))


@dataclass
class BoundResult:
    lhs: float
    rhs: float
    holds: bool
    in_regime: bool
    lambda_perp: float
    eps_V0: float
    eps_dV: float
    n_eff_min: float
    dS_max: float


def routing_dominance_bound(A0, V0, dS, dV) -> BoundResult:
    """Compare ``||dA V0|| / ||A0 dV||`` with its analytic upper bound.

    ``dA`` is the linear softmax response to ``dS``.  The bound is
    ``2 sqrt(N) ||dS||_max eps_V0 / (sqrt(N_eff_min) (1 - lambda_perp eps_dV))
    * ||P0 V0|| / ||P0 dV||``.  When ``1 - lambda_perp eps_dV <= 0`` the
    instance is out of regime: ``rhs`` is infinite and ``holds`` is
    reported as ``True`` only in the vacuous sense; check ``in_regime``.
    """
    A0 = np.asarray(A0, dtype=float)
    V0 = np.asarray(V0, dtype=float)
    dV = np.asarray(dV, dtype=float)
    dS = np.asarray(dS, dtype=float)
    n = A0.shape[0]
    if V0.ndim == 1:
        V0 = V0[:, None]
    if dV.ndim == 1:
        dV = dV[:, None]
    dA = softmax_jacobian_apply(A0, dS)
    P0V0 = np.broadcast_to(V0.mean(axis=0), V0.shape)
    P0dV = np.broadcast_to(dV.mean(axis=0), dV.shape)
    n_p0v0 = np.linalg.norm(P0V0)
    n_p0dv = np.linalg.norm(P0dV)
    eps_v0 = np.linalg.norm(V0 - P0V0) / n_p0v0 if n_p0v0 > 0 else np.inf
    eps_dv = np.linalg.norm(dV - P0dV) / n_p0dv if n_p0dv > 0 else np.inf
    lam = perp_operator_norm(A0)
    n_eff_min = float(effective_attention_width(A0).min())
    ds_max = float(np.max(np.abs(dS)))
    num = float(np.linalg.norm(dA @ V0))
    den = float(np.linalg.norm(A0 @ dV))
    lhs = num / den if den > 0 else (0.0 if num == 0 else np.inf)
    margin = 1.0 - lam * eps_dv
    in_regime = bool(np.isfinite(margin) and margin > 0 and n_p0v0 > 0 and n_p0dv > 0)
    if in_regime:
        rhs = (2.0 * np.sqrt(n) * ds_max * eps_v0 / (np.sqrt(n_eff_min) * margin)) * (n_p0v0 / n_p0dv)
    else:
        rhs = np.inf
    return BoundResult(lhs=float(lhs), rhs=float(rhs), holds=bool(lhs <= rhs), in_regime=in_regime,
                       lambda_perp=lam, eps_V0=float(eps_v0), eps_dV=float(eps_dv),
                       n_eff_min=n_eff_min, dS_max=ds_max)


# ---------------------------------------------------------------------------
# Attention-difference decomposition
# ---------------------------------------------------------------------------

@dataclass
class LayerRef:
    """A block of a :class:`DiT` together with its conditioning vector."""

    model: DiT
    index: int
    e: np.ndarray

    @classmethod
    def at(cls, model: DiT, index: int, t: float = 500.0, c: int = 0) -> "LayerRef":
        return cls(model, index, model.cond(t, c))


@dataclass
class Perturbation:
    """Antisymmetric perturbation ``scale * h`` of a token state."""

    h: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        if not np.all(np.isfinite(self.h)):
            raise ValueError("perturbation must be finite")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def value(self) -> np.ndarray:
        return self.scale * self.h


@dataclass
class ResponseDecomposition:
    measured: np.ndarray
    routing_term: np.ndarray
    pattern_term: np.ndarray
    residual: np.ndarray
    g: float

    def fit_prefactors(self):
        """Least-squares coefficients of the measured difference on both terms."""
        X = np.stack([self.routing_term.ravel(), self.pattern_term.ravel()], axis=1)
        coef, *_ = np.linalg.lstsq(X, self.measured.ravel(), rcond=None)
        return float(coef[0]), float(coef[1])


def _as_batch(H):
    H = np.asarray(H, dtype=float)
    return H[None] if H.ndim == 2 else H


def measure_attention_difference(layer: LayerRef, H0, h: Perturbation, g: float) -> ResponseDecomposition:
    """Exact attention difference at ``H0 ± h/√2`` and its first-order split.

    The measured quantity is the difference of the gated attention branch
    outputs (including the ``alpha`` gate) between the replicas.  The
    routing term is ``2 A0 dV`` and the pattern term
    ``2 (dA+ + g dA-) V0`` (both pushed through the output projection and
    gate), with ``dV``, ``dA±`` the exact first-order responses of the
    values and of the intra/inter attention blocks.
    """
    model, idx, e = layer.model, layer.index, layer.e
    rho, xi = gating_functions(g)
    H0 = _as_batch(H0)
    hv = _as_batch(h.value)
    aA, aB = model.attn_branch(idx, H0 + hv / SQRT2, H0 - hv / SQRT2, e, g)
    measured = (aA - aB)[0]

    p = model.w["layers"][idx]
    heads = model.cfg.heads
    alpha = model.cfg.gate_alpha[idx]
    X0 = model.pre_attention(idx, H0, e)
    dX = model.pre_attention_jvp(idx, H0, hv / SQRT2, e)
    zero = np.zeros(model.cfg.d_model)
    Q0 = _heads(X0, p["Wq"], p["bq"], heads)
    K0 = _heads(X0, p["Wk"], p["bk"], heads)
    V0 = _heads(X0, p["Wv"], p["bv"], heads)
    dQ = _heads(dX, p["Wq"], zero, heads)
    dK = _heads(dX, p["Wk"], zero, heads)
    dV = _heads(dX, p["Wv"], zero, heads)
    scale = 1.0 / np.sqrt(Q0.shape[-1])
    A0 = softmax_rows(Q0 @ np.swapaxes(K0, -1, -2) * scale)
    a = dQ @ np.swapaxes(K0, -1, -2) * scale
    b = Q0 @ np.swapaxes(dK, -1, -2) * scale
    dA_plus = softmax_jacobian_apply(A0, a + b, check=False)
    dA_minus = softmax_jacobian_apply(A0, a - b, check=False)
    routing = alpha * (_merge(2.0 * (A0 @ dV)) @ p["Wo"])[0]
    pattern = alpha * (_merge(2.0 * ((dA_plus + g * dA_minus) @ V0)) @ p["Wo"])[0]
    residual = measured - rho * routing - xi * pattern
    return ResponseDecomposition(measured, routing, pattern, residual, float(g))


def loglog_slope(scales, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(scales)``."""
    x = np.log(np.asarray(scales, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def residual_scaling(layer: LayerRef, H0, direction, g: float, scales=(1e-1, 1e-2, 1e-3, 1e-4)):
    """Residual norms of the decomposition across perturbation scales and their slope."""
    norms = []
    for sc in scales:
        dec = measure_attention_difference(layer, H0, Perturbation(direction, sc), g)
        norms.append(float(np.linalg.norm(dec.residual)))
    return np.asarray(norms), loglog_slope(scales, norms)


# ---------------------------------------------------------------------------
# Propagator
# ---------------------------------------------------------------------------

@dataclass
class PropagatorSpec:
    """Difference-mode Jacobian of one block and its additive components.

    All operators act on the flattened ``(N*d_model)`` difference
    coordinate ``v = (H_A - H_B)/√2``.  ``K`` is the first-order form
    ``I + J_MLP + rho R + xi P``; ``K_exact`` is the finite-difference
    Jacobian of the whole block, equal to ``(I + J_MLP)(I + rho R + xi P)``
    up to discretisation error.
    """

    K: np.ndarray
    identity: np.ndarray
    J_mlp: np.ndarray
    R: np.ndarray
    P: np.ndarray
    g: float
    rho: float
    xi: float
    K_exact: np.ndarray
    cross_term: np.ndarray
    tokens: int
    d_model: int

    @property
    def components(self) -> dict:
        return {"identity": self.identity, "J_MLP": self.J_mlp,
                "rhoR": self.rho * self.R, "xiP": self.xi * self.P}

    @property
    def cross_norm(self) -> float:
        return float(np.linalg.norm(self.cross_term))

    def mlp_offblock_max(self) -> float:
        """Largest cross-token entry of ``J_MLP`` (zero for a tokenwise MLP)."""
        n, d = self.tokens, self.d_model
        J = self.J_mlp.reshape(n, d, n, d).copy()
        for i in range(n):
            J[i, :, i, :] = 0.0
        return float(np.abs(J).max())


def _unit_directions(n: int, d: int) -> np.ndarray:
    return np.eye(n * d).reshape(n * d, n, d)


def build_propagator(layer: LayerRef, H0, g: float, fd_eps: float = 1e-5) -> PropagatorSpec:
    """Assemble ``K_g`` column by column with central finite differences.

    ``R`` follows the value path with the attention kernel frozen at
    ``A0``, ``P(g)`` follows the attention-weight path with values frozen at
    ``V0``, and ``J_MLP`` perturbs the MLP branch one token channel at a
    time around the post-attention symmetric state.
    """
    if not 1e-7 <= fd_eps <= 1e-3:
        raise ConfigError("fd_eps must lie in [1e-7, 1e-3]")
    model, idx, e = layer.model, layer.index, layer.e
    rho, xi = gating_functions(g)
    H0 = np.asarray(H0, dtype=float)
    if H0.ndim == 3:
        H0 = H0[0]
    n, d = H0.shape
    D = n * d
    E = _unit_directions(n, d)
    tau = fd_eps
    HA = H0[None] + tau * E / SQRT2
    HB = H0[None] - tau * E / SQRT2

    p = model.w["layers"][idx]
    heads = model.cfg.heads
    alpha = model.cfg.gate_alpha[idx]
    X0 = model.pre_attention(idx, H0[None], e)
    Q0 = _heads(X0, p["Wq"], p["bq"], heads)
    K0 = _heads(X0, p["Wk"], p["bk"], heads)
    V0 = _heads(X0, p["Wv"], p["bv"], heads)
    scale = 1.0 / np.sqrt(Q0.shape[-1])
    A0 = softmax_rows(Q0 @ np.swapaxes(K0, -1, -2) * scale)

    XA = model.pre_attention(idx, HA, e)
    XB = model.pre_attention(idx, HB, e)
    VA = _heads(XA, p["Wv"], p["bv"], heads)
    VB = _heads(XB, p["Wv"], p["bv"], heads)
    route = alpha * (_merge(A0 @ (VA - VB)) @ p["Wo"])
    R = route.reshape(D, D).T / (SQRT2 * tau)

    QA = _heads(XA, p["Wq"], p["bq"], heads)
    KA = _heads(XA, p["Wk"], p["bk"], heads)
    QB = _heads(XB, p["Wq"], p["bq"], heads)
    KB = _heads(XB, p["Wk"], p["bk"], heads)
    A_AA = softmax_rows(QA @ np.swapaxes(KA, -1, -2) * scale)
    A_BB = softmax_rows(QB @ np.swapaxes(KB, -1, -2) * scale)
    A_AB = softmax_rows(QA @ np.swapaxes(KB, -1, -2) * scale)
    A_BA = softmax_rows(QB @ np.swapaxes(KA, -1, -2) * scale)
    patt = alpha * (_merge(((A_AA - A_BB) + g * (A_AB - A_BA)) @ V0) @ p["Wo"])
    P = patt.reshape(D, D).T / (SQRT2 * tau)

    a0A, _ = model.attn_branch(idx, H0[None], H0[None], e, g)
    Ht0 = H0[None] + a0A
    up = model.mlp_branch(idx, Ht0 + tau * E, e)
    dn = model.mlp_branch(idx, Ht0 - tau * E, e)
    J = ((up - dn) / (2.0 * tau)).reshape(D, D).T

    outA, outB = model.block(idx, HA, HB, e, g)
    K_exact = ((outA - outB) / SQRT2).reshape(D, D).T / tau

    I = np.eye(D)
    attn = rho * R + xi * P
    K = I + J + attn
    return PropagatorSpec(K=K, identity=I, J_mlp=J, R=R, P=P, g=float(g), rho=rho, xi=xi,
                          K_exact=K_exact, cross_term=J @ attn, tokens=n, d_model=d)


def repartition_propagator(K_g, mix: GaussianMixture, gamma: float) -> np.ndarray:
    """``K~ = K - gamma * Lambda_eff``."""
    K = K_g.K if isinstance(K_g, PropagatorSpec) else np.asarray(K_g, dtype=float)
    if K.shape != (mix.dim, mix.dim):
        raise ValueError("propagator and mixture dimensions differ")
    return K - gamma * effective_precision(mix)


# ---------------------------------------------------------------------------
# Verification report
# ---------------------------------------------------------------------------

def random_symmetric_state(model: DiT, rng: np.random.Generator) -> np.ndarray:
    """A random token state of the model's size, ``(N, d_model)``."""
    return rng.standard_normal((model.cfg.tokens, model.cfg.d_model))


def linearization_report(model: DiT, g_grid=(0.0, 0.3, 0.7, 1.0), n_states: int = 5,
                         scales=(1e-1, 1e-2, 1e-3, 1e-4), prefactor_scale: float = 1e-5,
                         fd_eps: float = 1e-5, n_bound: int = 200, rng_seed: int = 0) -> dict:
    """Collect prefactor fits, residual slopes, identities and bound slack per layer."""
    report = {"g_grid": [float(g) for g in g_grid], "scales": [float(s) for s in scales],
              "prefactor_scale": prefactor_scale, "layers": []}
    for idx in range(model.cfg.layers):
        rng = rng_stream(rng_seed, "linearization", idx)
        entry = {"layer": idx, "prefactors": [], "slopes": [], "propagator": []}
        for k in range(n_states):
            t = float(rng.uniform(0, 1000))
            ref = LayerRef.at(model, idx, t)
            H0 = random_symmetric_state(model, rng)
            direction = rng.standard_normal(H0.shape)
            direction /= np.linalg.norm(direction)
            for g in g_grid:
                rho, xi = gating_functions(g)
                dec = measure_attention_difference(ref, H0, Perturbation(direction, prefactor_scale), g)
                a, b = dec.fit_prefactors()
                _, slope = residual_scaling(ref, H0, direction, g, scales)
                entry["prefactors"].append({"state": k, "g": float(g), "rho": rho, "xi": xi,
                                            "routing_coef": a, "pattern_coef": b})
                entry["slopes"].append({"state": k, "g": float(g), "slope": slope})
            if k == 0:
                for g in g_grid:
                    spec = build_propagator(ref, H0, g, fd_eps)
                    entry["propagator"].append({
                        "g": float(g),
                        "cross_norm": spec.cross_norm,
                        "K_norm": float(np.linalg.norm(spec.K)),
                        "J_mlp_norm": float(np.linalg.norm(spec.J_mlp)),
                        "attn_norm": float(np.linalg.norm(spec.rho * spec.R + spec.xi * spec.P)),
                        "exact_vs_factorised": float(np.linalg.norm(
                            spec.K_exact - (spec.K + spec.cross_term))),
                        "mlp_offblock_max": spec.mlp_offblock_max(),
                    })
        report["layers"].append(entry)
    report["bounds"] = bounds_check(n_bound, rng_seed=rng_seed)
    return report


def random_attention(rng: np.random.Generator, n: int, temperature: float = 1.0) -> np.ndarray:
    return softmax_rows(temperature * rng.standard_normal((n, n)))


def bounds_check(n_instances: int = 1000, n_tokens: int = 16, d_v: int = 4, rng_seed: int = 0) -> dict:
    """Monte-Carlo check of the softmax identities and the routing-dominance bound."""
    rng = rng_stream(rng_seed, "bounds-check")
    worst_rowsum = 0.0
    worst_proj = 0.0
    slack = []
    violations = 0
    out_of_regime = 0
    for _ in range(n_instances):
        A0 = random_attention(rng, n_tokens, rng.uniform(0.1, 3.0))
        dS = rng.standard_normal((n_tokens, n_tokens))
        dA = softmax_jacobian_apply(A0, dS)
        worst_rowsum = max(worst_rowsum, float(np.abs(dA.sum(axis=1)).max()))
        P0 = mean_projector(n_tokens)
        worst_proj = max(worst_proj, float(np.abs(A0 @ P0 - P0).max()))
        V0 = rng.standard_normal(d_v) + 0.3 * rng.standard_normal((n_tokens, d_v))
        dV = rng.standard_normal(d_v) + 0.1 * rng.standard_normal((n_tokens, d_v))
        res = routing_dominance_bound(A0, V0, 0.1 * dS, dV)
        if not res.in_regime:
            out_of_regime += 1
            continue
        slack.append(res.rhs / res.lhs if res.lhs > 0 else np.inf)
        violations += int(not res.holds)
    finite = np.asarray([s for s in slack if np.isfinite(s)])
    return {
        "instances": n_instances,
        "max_rowsum": worst_rowsum,
        "max_A0P0": worst_proj,
        "in_regime": len(slack),
        "out_of_regime": out_of_regime,
        "violations": violations,
        "slack_min": float(finite.min()) if finite.size else None,
        "slack_median": float(np.median(finite)) if finite.size else None,
    }
