"""A small Diffusion Transformer with blockwise-normalised replica attention.

Two replicas are processed jointly: each block applies

    H~ = H  + alpha ⊙ Attn_g(adaLN_1(H, t, c))
    H+ = H~ + beta  ⊙ MLP(adaLN_2(H~, t, c))

where ``Attn_g`` attends over the concatenated ``2N`` tokens with four
separately normalised softmax blocks and mixes intra- and inter-replica
outputs with weights ``1/(1+g)`` and ``g/(1+g)``.

Weights are random and frozen; only the final linear decoder is fitted, by
ridge regression onto the exact noise prediction of a Gaussian mixture.
Arrays carry a leading batch axis throughout: token states are
``(B, N, d_model)`` and latents ``(B, C, H, W)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .diffusion import ConfigError, GaussianMixture, MixtureScore, NoiseSchedule
from .numerics import DimensionError, rng_stream, softmax_rows


class RegressionError(RuntimeError):
    """Raised when a ridge design is numerically singular."""

    def __init__(self, message, condition_number):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DitConfig:
    layers: int = 4
    heads: int = 2
    d_model: int = 32
    patch: int = 2
    latent: tuple = (1, 8, 8)
    mlp_ratio: int = 4
    n_classes: int = 2
    gate_alpha: object = 0.1
    gate_beta: object = 0.1
    ln_eps: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        self.latent = tuple(int(v) for v in self.latent)
        if len(self.latent) != 3:
            raise ConfigError("latent must be (C, H, W)")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        C, H, W = self.latent
        if H % self.patch or W % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide latent {H}x{W}")
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        self.gate_alpha = self._gate(self.gate_alpha)
        self.gate_beta = self._gate(self.gate_beta)

    def _gate(self, value):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full((self.layers, self.d_model), float(arr))
        elif arr.ndim == 1:
            arr = np.broadcast_to(arr, (self.layers, self.d_model)).copy()
        if arr.shape != (self.layers, self.d_model):
            raise ConfigError("gate vectors must have shape (layers, d_model)")
        return arr

    @property
    def d_h(self) -> int:
        return self.d_model // self.heads

    @property
    def tokens(self) -> int:
        _, H, W = self.latent
        return (H // self.patch) * (W // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.latent[0] * self.patch * self.patch

    @property
    def latent_dim(self) -> int:
        C, H, W = self.latent
        return C * H * W

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent"] = list(self.latent)
        d["gate_alpha"] = self.gate_alpha.tolist()
        d["gate_beta"] = self.gate_beta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DitConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Patching
# ---------------------------------------------------------------------------

def patchify(latent, cfg: DitConfig) -> np.ndarray:
    """Split ``(..., C, H, W)`` latents into ``(..., N, C*p*p)`` tokens."""
    z = np.asarray(latent, dtype=float)
    C, H, W = z.shape[-3:]
    p = cfg.patch
    if H % p or W % p:
        raise ConfigError(f"patch {p} does not divide {H}x{W}")
    lead = z.shape[:-3]
    z = z.reshape(lead + (C, H // p, p, W // p, p))
    nd = len(lead)
    perm = tuple(range(nd)) + (nd + 1, nd + 3, nd, nd + 2, nd + 4)
    z = z.transpose(perm)
    return z.reshape(lead + ((H // p) * (W // p), C * p * p))


def unpatchify(tokens, cfg: DitConfig) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    x = np.asarray(tokens, dtype=float)
    C, H, W = cfg.latent
    p = cfg.patch
    lead = x.shape[:-2]
    x = x.reshape(lead + (H // p, W // p, C, p, p))
    nd = len(lead)
    perm = tuple(range(nd)) + (nd + 2, nd, nd + 3, nd + 1, nd + 4)
    return x.transpose(perm).reshape(lead + (C, H, W))


# ---------------------------------------------------------------------------
# Elementary layers
# ---------------------------------------------------------------------------

def layer_norm(x, eps: float = 1e-6) -> np.ndarray:
    """Per-token centring and scaling over the channel axis (no affine)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm_jvp(x, dx, eps: float = 1e-6) -> np.ndarray:
    """Directional derivative of :func:`layer_norm` at ``x`` along ``dx``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    dxc = dx - dx.mean(axis=-1, keepdims=True)
    dvar = 2.0 * (xc * dxc).mean(axis=-1, keepdims=True)
    return dxc * inv - 0.5 * xc * dvar * inv ** 3


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def silu(x):
    return x / (1.0 + np.exp(-x))


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of (possibly batched) scalar timesteps."""
    t = np.asarray(t, dtype=float)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def gating_functions(g: float):
    """Routing and pattern prefactors ``rho = (1-g)/(1+g)``, ``xi = 1/(1+g)``."""
    _check_g(g)
    return (1.0 - g) / (1.0 + g), 1.0 / (1.0 + g)


def _check_g(g):
    if not 0.0 <= g <= 1.0:
        raise ConfigError(f"coupling g={g} outside [0, 1]")


def blockwise_softmax(S_AA, S_AB, S_BA, S_BB):
    """Normalise each logit block row-wise on its own."""
    return tuple(softmax_rows(S) for S in (S_AA, S_AB, S_BA, S_BB))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _heads(x, W, b, heads):
    """Project ``(B, N, d)`` tokens and split into ``(B, heads, N, d_h)``."""
    y = x @ W + b
    B, N, d = y.shape
    return y.reshape(B, N, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(y):
    B, Hh, N, dh = y.shape
    return y.transpose(0, 2, 1, 3).reshape(B, N, Hh * dh)


@dataclass
class AttentionParts:
    """Intermediate quantities of one gated attention evaluation."""

    QA: np.ndarray
    QB: np.ndarray
    KA: np.ndarray
    KB: np.ndarray
    VA: np.ndarray
    VB: np.ndarray
    A_AA: np.ndarray
    A_AB: np.ndarray
    A_BA: np.ndarray
    A_BB: np.ndarray


def attention_single(X, p: dict, heads: int) -> np.ndarray:
    """Standard multi-head self-attention on one replica, ``(B, N, d)``."""
    Q = _heads(X, p["Wq"], p["bq"], heads)
    K = _heads(X, p["Wk"], p["bk"], heads)
    V = _heads(X, p["Wv"], p["bv"], heads)
    scale = 1.0 / np.sqrt(Q.shape[-1])
    A = softmax_rows(Q @ np.swapaxes(K, -1, -2) * scale)
    return _merge(A @ V) @ p["Wo"] + p["bo"]


def gated_attention_pair(XA, XB, g: float, p: dict, heads: int, return_parts: bool = False):
    """Blockwise-normalised replica attention on separate replica inputs.

    Returns ``(outA, outB)`` and, if requested, the :class:`AttentionParts`.
    """
    _check_g(g)
    QA = _heads(XA, p["Wq"], p["bq"], heads)
    KA = _heads(XA, p["Wk"], p["bk"], heads)
    VA = _heads(XA, p["Wv"], p["bv"], heads)
    QB = _heads(XB, p["Wq"], p["bq"], heads)
    KB = _heads(XB, p["Wk"], p["bk"], heads)
    VB = _heads(XB, p["Wv"], p["bv"], heads)
    scale = 1.0 / np.sqrt(QA.shape[-1])
    A_AA = softmax_rows(QA @ np.swapaxes(KA, -1, -2) * scale)
    A_BB = softmax_rows(QB @ np.swapaxes(KB, -1, -2) * scale)
    intraA = A_AA @ VA
    intraB = A_BB @ VB
    if g == 0.0 and not return_parts:
        mixA, mixB = intraA, intraB
        A_AB = A_BA = None
    else:
        A_AB = softmax_rows(QA @ np.swapaxes(KB, -1, -2) * scale)
        A_BA = softmax_rows(QB @ np.swapaxes(KA, -1, -2) * scale)
        if g == 0.0:
            mixA, mixB = intraA, intraB
        else:
            mixA = (intraA + g * (A_AB @ VB)) / (1.0 + g)
            mixB = (intraB + g * (A_BA @ VA)) / (1.0 + g)
    outA = _merge(mixA) @ p["Wo"] + p["bo"]
    outB = _merge(mixB) @ p["Wo"] + p["bo"]
    if return_parts:
        return outA, outB, AttentionParts(QA, QB, KA, KB, VA, VB, A_AA, A_AB, A_BA, A_BB)
    return outA, outB


def gated_attention(X, g: float, p: dict, heads: int) -> np.ndarray:
    """Gated attention over a concatenated ``(..., 2N, d)`` replica sequence."""
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    n2 = X.shape[1]
    if n2 % 2:
        raise DimensionError("concatenated sequence must have an even token count")
    n = n2 // 2
    outA, outB = gated_attention_pair(X[:, :n], X[:, n:], g, p, heads)
    out = np.concatenate([outA, outB], axis=1)
    return out[0] if squeeze else out


def mlp(x, p: dict) -> np.ndarray:
    return gelu(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _init_weights(cfg: DitConfig) -> dict:
    rng = rng_stream(cfg.rng_seed, "dit-weights")
    d = cfg.d_model
    hidden = cfg.mlp_ratio * d
    P = cfg.patch_dim

    def dense(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)

    w = {
        "patch": {"W": dense(P, d), "b": np.zeros(d)},
        "pos": 0.5 * rng.standard_normal((cfg.tokens, d)),
        "time": {"W": dense(d, d), "b": np.zeros(d)},
        "class_emb": 0.5 * rng.standard_normal((cfg.n_classes, d)),
        "layers": [],
        "final": {"adaln": {"W": dense(d, 2 * d, 0.1), "b": np.zeros(2 * d)}},
        "decoder": {"W": np.zeros((d, P)), "b": np.zeros(P)},
    }
    for _ in range(cfg.layers):
        w["layers"].append({
            "Wq": dense(d, d), "bq": np.zeros(d),
            "Wk": dense(d, d), "bk": np.zeros(d),
            "Wv": dense(d, d), "bv": np.zeros(d),
            "Wo": dense(d, d), "bo": np.zeros(d),
            "mlp": {"W1": dense(d, hidden), "b1": np.zeros(hidden),
                    "W2": dense(hidden, d), "b2": np.zeros(d)},
            "adaln": {"W": dense(d, 4 * d, 0.1), "b": np.zeros(4 * d)},
        })
    return w


class DiT:
    """Frozen random-feature DiT operating on replica pairs."""

    def __init__(self, cfg: DitConfig, weights: dict | None = None):
        self.cfg = cfg
        self.w = _init_weights(cfg) if weights is None else weights

    # -- conditioning -----------------------------------------------------
    def cond(self, t, c=0) -> np.ndarray:
        """Conditioning vector from timestep(s) ``t`` and class label(s) ``c``."""
        emb = timestep_embedding(t, self.cfg.d_model)
        return emb @ self.w["time"]["W"] + self.w["time"]["b"] + self.w["class_emb"][np.asarray(c)]

    def modulation(self, layer: int, e):
        m = silu(e) @ self.w["layers"][layer]["adaln"]["W"] + self.w["layers"][layer]["adaln"]["b"]
        if m.ndim == 2:
            m = m[:, None, :]
        return np.split(m, 4, axis=-1)  # shift1, scale1, shift2, scale2

    def pre_attention(self, layer: int, H, e):
        shift1, scale1, _, _ = self.modulation(layer, e)
        return layer_norm(H, self.cfg.ln_eps) * (1.0 + scale1) + shift1

    def pre_attention_jvp(self, layer: int, H, dH, e):
        _, scale1, _, _ = self.modulation(layer, e)
        return layer_norm_jvp(H, dH, self.cfg.ln_eps) * (1.0 + scale1)

    # -- embedding / decoding -------------------------------------------------
    def embed(self, z) -> np.ndarray:
        tok = patchify(z, self.cfg)
        return tok @ self.w["patch"]["W"] + self.w["patch"]["b"] + self.w["pos"]

    def features(self, H, e) -> np.ndarray:
        m = silu(e) @ self.w["final"]["adaln"]["W"] + self.w["final"]["adaln"]["b"]
        if m.ndim == 2:
            m = m[:, None, :]
        shift, scale = np.split(m, 2, axis=-1)
        return layer_norm(H, self.cfg.ln_eps) * (1.0 + scale) + shift

    def decode(self, H, e) -> np.ndarray:
        F = self.features(H, e)
        out = F @ self.w["decoder"]["W"] + self.w["decoder"]["b"]
        return unpatchify(out, self.cfg)

    # -- residual branches ------------------------------------------------------
    def attn_branch(self, layer: int, HA, HB, e, g: float, return_parts: bool = False):
        """``alpha ⊙ Attn_g(adaLN_1(H))`` for both replicas."""
        alpha = self.cfg.gate_alpha[layer]
        XA = self.pre_attention(layer, HA, e)
        XB = self.pre_attention(layer, HB, e)
        res = gated_attention_pair(XA, XB, g, self.w["layers"][layer], self.cfg.heads, return_parts)
        if return_parts:
            return alpha * res[0], alpha * res[1], res[2]
        return alpha * res[0], alpha * res[1]

    def attn_branch_single(self, layer: int, H, e):
        alpha = self.cfg.gate_alpha[layer]
        X = self.pre_attention(layer, H, e)
        return alpha * attention_single(X, self.w["layers"][layer], self.cfg.heads)

    def mlp_branch(self, layer: int, H, e):
        """``beta ⊙ MLP(adaLN_2(H))``; acts on each token separately."""
        _, _, shift2, scale2 = self.modulation(layer, e)
        X = layer_norm(H, self.cfg.ln_eps) * (1.0 + scale2) + shift2
        return self.cfg.gate_beta[layer] * mlp(X, self.w["layers"][layer]["mlp"])

    # -- blocks -------------------------------------------------------------------
    def block(self, layer: int, HA, HB, e, g: float):
        """One DiT block applied to a replica pair of ``(B, N, d)`` states."""
        if HA.shape != HB.shape or HA.shape[-2:] != (self.cfg.tokens, self.cfg.d_model):
            raise DimensionError(f"token states of shape {HA.shape}/{HB.shape} do not match the config")
        aA, aB = self.attn_branch(layer, HA, HB, e, g)
        tA = HA + aA
        tB = HB + aB
        return tA + self.mlp_branch(layer, tA, e), tB + self.mlp_branch(layer, tB, e)

    def block_single(self, layer: int, H, e):
        t = H + self.attn_branch_single(layer, H, e)
        return t + self.mlp_branch(layer, t, e)

    # -- full passes ----------------------------------------------------------------
    def forward_pair(self, zA, zB, t, g: float, c=0, capture: list | None = None):
        """Noise predictions for both replicas.

        If ``capture`` is a list, a list of per-layer ``(HA, HB)`` block
        outputs (flattened to ``(B, N*d)``) is appended to it.
        """
        e = self.cond(t, c)
        HA = self.embed(zA)
        HB = self.embed(zB)
        layers = []
        for layer in range(self.cfg.layers):
            HA, HB = self.block(layer, HA, HB, e, g)
            if capture is not None:
                layers.append((HA.reshape(HA.shape[0], -1).copy(), HB.reshape(HB.shape[0], -1).copy()))
        if capture is not None:
            capture.append(layers)
        return self.decode(HA, e), self.decode(HB, e)

    def forward_single(self, z, t, c=0, capture: list | None = None):
        e = self.cond(t, c)
        H = self.embed(z)
        layers = []
        for layer in range(self.cfg.layers):
            H = self.block_single(layer, H, e)
            if capture is not None:
                layers.append(H.reshape(H.shape[0], -1).copy())
        if capture is not None:
            capture.append(layers)
        return self.decode(H, e)

    def final_features_single(self, z, t, c=0):
        e = self.cond(t, c)
        H = self.embed(z)
        for layer in range(self.cfg.layers):
            H = self.block_single(layer, H, e)
        return self.features(H, e)

    # -- serialisation ----------------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps({"config": self.cfg.to_dict(), **_encode(self.w)}, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "DiT":
        raw = json.loads(text)
        cfg = DitConfig.from_dict(raw.pop("config"))
        return cls(cfg, _decode(raw))

    @classmethod
    def load(cls, path) -> "DiT":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"shape": list(obj.shape), "data": obj.ravel(order="C").tolist()}
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj):
    if isinstance(obj, dict) and set(obj) == {"shape", "data"}:
        return np.asarray(obj["data"], dtype=float).reshape(obj["shape"])
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Decoder calibration
# ---------------------------------------------------------------------------

def ridge_regression(X, Y, lam: float, max_condition: float = 1e12) -> np.ndarray:
    """Solve ``(X^T X + lam I) W = X^T Y`` with a conditioning guard."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if lam < 0:
        raise ValueError("ridge parameter must be non-negative")
    G = X.T @ X + lam * np.eye(X.shape[1])
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > max_condition:
        raise RegressionError("ridge design is ill-conditioned", cond)
    return np.linalg.solve(G, X.T @ Y)


@dataclass
class Calibration:
    model: DiT
    r2_train: float
    r2_holdout: float
    condition_number: float


def _r2(pred, target):
    sse = np.sum((pred - target) ** 2)
    sst = np.sum((target - target.mean(axis=0)) ** 2)
    return float(1.0 - sse / sst) if sst > 0 else float("nan")


def calibrate_decoder(cfg: DitConfig, sched: NoiseSchedule, mixture: GaussianMixture,
                      n_samples: int = 2048, ridge: float = 1e-3, rng_seed: int = 0,
                      holdout_fraction: float = 0.25) -> Calibration:
    """Fit the DiT's linear decoder to the exact mixture noise prediction.

    Samples ``x0`` from the mixture, a forward step ``s`` uniformly in
    ``1..S`` and Gaussian noise, then regresses the analytic target
    ``-sigma_s * score_s(z_s)`` on the frozen final-layer features (with an
    intercept).  Returns the calibrated model and train/held-out R^2.
    """
    if n_samples < 10 * cfg.d_model:
        raise ConfigError("n_samples must be at least 10 * d_model")
    if mixture.dim != cfg.latent_dim:
        raise DimensionError("mixture dimension does not match the latent size")
    model = DiT(cfg)
    rng = rng_stream(rng_seed, "calibrate")
    scorer = MixtureScore(sched, mixture)
    n_hold = max(1, int(round(holdout_fraction * n_samples)))
    n_total = n_samples + n_hold
    x0 = mixture.sample(rng, n_total)
    steps = rng.integers(1, sched.S + 1, size=n_total)
    noise = rng.standard_normal((n_total, mixture.dim))
    alpha = sched.alpha[steps][:, None]
    sig = np.sqrt(sched.sigma2[steps])[:, None]
    z = alpha * x0 + sig * noise
    target = np.empty_like(z)
    for s in np.unique(steps):
        idx = steps == s
        target[idx] = scorer.eps(z[idx], int(s))
    z_img = z.reshape((n_total,) + cfg.latent)
    feats = model.final_features_single(z_img, steps * sched.dt)
    F = feats.reshape(-1, cfg.d_model)
    F = np.concatenate([F, np.ones((F.shape[0], 1))], axis=1)
    Y = patchify(target.reshape((n_total,) + cfg.latent), cfg).reshape(-1, cfg.patch_dim)
    n_tok = cfg.tokens
    split = n_samples * n_tok
    Ftr, Ytr = F[:split], Y[:split]
    G = Ftr.T @ Ftr + ridge * np.eye(F.shape[1])
    cond = float(np.linalg.cond(G))
    Wfull = ridge_regression(Ftr, Ytr, ridge)
    model.w["decoder"] = {"W": Wfull[:-1], "b": Wfull[-1]}
    r2_tr = _r2(Ftr @ Wfull, Ytr)
    r2_ho = _r2(F[split:] @ Wfull, Y[split:])
    return Calibration(model, r2_tr, r2_ho, cond)


class DitPairBackend:
    """Replica-pair noise predictor backed by a :class:`DiT`.

    Coupling enters only through the gated attention; captures are the
    per-layer block outputs.
    """

    def __init__(self, model: DiT, sched: NoiseSchedule, class_label: int = 0):
        self.model = model
        self.sched = sched
        self.c = class_label
        self.latent_shape = model.cfg.latent
        self.layers = model.cfg.layers

    def eps_pair(self, zA, zB, s: int, g: float, capture: list | None = None):
        return self.model.forward_pair(zA, zB, s * self.sched.dt, g, self.c, capture)

    def eps_single(self, z, s: int, capture: list | None = None):
        return self.model.forward_single(z, s * self.sched.dt, self.c, capture)
