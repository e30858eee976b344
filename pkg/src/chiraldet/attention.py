"""Distance-biased chiral cross-attention.

Chiral units (plus a global token) query the related and non-chiral atoms.
Attention logits carry an additive per-head pair bias seeded from a
Gaussian distance kernel conditioned on the pair type (related vs
non-chiral) and updated each layer with the pre-softmax logits, so the
bias telescopes across the stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .encoder import EncodedMolecule
from .numerics import (
    gaussian,
    gelu,
    gelu_grad,
    layer_norm_rows,
    layer_norm_rows_backward,
)

N_PAIR_TYPES = 2  # 0: chiral-related, 1: non-chiral
SIGMA_FLOOR = 1e-6


@dataclass
class DistanceBiasParams:
    """Per-pair-type affine on distance feeding a bank of Gaussian densities,
    projected to one bias per attention head."""

    e1: np.ndarray  # (N_PAIR_TYPES, G)
    e2: np.ndarray  # (N_PAIR_TYPES, G)
    mu: np.ndarray  # (G,)
    sigma: np.ndarray  # (G,)
    w_p: np.ndarray  # (G, H)


@dataclass
class LayerParams:
    wq: np.ndarray
    wk_r: np.ndarray
    wv_r: np.ndarray
    wk_n: np.ndarray
    wv_n: np.ndarray
    wo: np.ndarray
    ff_w1: np.ndarray  # (4h, h)
    ff_b1: np.ndarray
    ff_w2: np.ndarray  # (h, 4h)
    ff_b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    n_heads: int


@dataclass
class PairBias:
    p: np.ndarray  # (1 + n_units, n_keys, H), token row first


def distance_bias(params: DistanceBiasParams, dist: float, pair_type: int) -> np.ndarray:
    """Bias vector (one entry per head) for a single distance/pair type."""
    if not 0 <= pair_type < N_PAIR_TYPES:
        raise ValueError(f"pair_type must be in [0, {N_PAIR_TYPES}), got {pair_type}")
    if dist < 0:
        raise ValueError("distance must be non-negative")
    x = params.e1[pair_type] * dist + params.e2[pair_type]
    dens = gaussian(x, params.mu, np.maximum(params.sigma, SIGMA_FLOOR))
    return dens @ params.w_p


def _bias_fwd(params: DistanceBiasParams, dists, types):
    """Vectorized bias for flat (n,) distances/types; returns (bias, cache)."""
    dists = np.asarray(dists, dtype=np.float64)
    types = np.asarray(types, dtype=np.int64)
    e1 = params.e1[types]
    e2 = params.e2[types]
    x = e1 * dists[:, None] + e2
    sig = np.maximum(params.sigma, SIGMA_FLOOR)
    dens = gaussian(x, params.mu, sig)
    bias = dens @ params.w_p
    return bias, (dists, types, x, sig, dens)


def _bias_bwd(params: DistanceBiasParams, cache, d_bias):
    dists, types, x, sig, dens = cache
    d_wp = dens.T @ d_bias
    d_dens = d_bias @ params.w_p.T
    z = (x - params.mu) / sig
    d_x = d_dens * dens * (-z / sig)
    d_mu = (d_dens * dens * (z / sig)).sum(axis=0)
    d_sigma_eff = (d_dens * dens * ((z * z - 1.0) / sig)).sum(axis=0)
    # clamp: no gradient where sigma was floored
    d_sigma = np.where(params.sigma > SIGMA_FLOOR, d_sigma_eff, 0.0)
    d_e1 = np.zeros_like(params.e1)
    d_e2 = np.zeros_like(params.e2)
    for t in range(N_PAIR_TYPES):
        mask = types == t
        if mask.any():
            d_e1[t] = (d_x[mask] * dists[mask, None]).sum(axis=0)
            d_e2[t] = d_x[mask].sum(axis=0)
    return {"e1": d_e1, "e2": d_e2, "mu": d_mu, "sigma": d_sigma, "w_p": d_wp}


def pair_bias_fwd(params: DistanceBiasParams, encoded: EncodedMolecule):
    """Initial pair bias from chiral reference points to all key atoms.

    Keys are the related atoms (type 0) followed by the non-chiral atoms
    (type 1); the token row starts at zero.
    """
    n_units = encoded.chiral_positions.shape[0]
    key_pos = np.vstack([encoded.related_positions, encoded.nonchiral_positions])
    n_keys = key_pos.shape[0]
    n_heads = params.w_p.shape[1]
    p = np.zeros((1 + n_units, n_keys, n_heads))
    if n_units == 0 or n_keys == 0:
        return PairBias(p=p), None
    diff = encoded.chiral_positions[:, None, :] - key_pos[None, :, :]
    dists = np.sqrt((diff * diff).sum(axis=2))
    types = np.concatenate(
        [
            np.zeros(encoded.related_positions.shape[0], dtype=np.int64),
            np.ones(encoded.nonchiral_positions.shape[0], dtype=np.int64),
        ]
    )
    flat, cache = _bias_fwd(params, dists.ravel(), np.tile(types, n_units))
    p[1:] = flat.reshape(n_units, n_keys, n_heads)
    return PairBias(p=p), cache


def init_pair_bias(params: DistanceBiasParams, encoded: EncodedMolecule) -> PairBias:
    return pair_bias_fwd(params, encoded)[0]


def pair_bias_bwd(params: DistanceBiasParams, cache, d_p):
    if cache is None:
        return {
            "e1": np.zeros_like(params.e1),
            "e2": np.zeros_like(params.e2),
            "mu": np.zeros_like(params.mu),
            "sigma": np.zeros_like(params.sigma),
            "w_p": np.zeros_like(params.w_p),
        }
    n_heads = params.w_p.shape[1]
    return _bias_bwd(params, cache, d_p[1:].reshape(-1, n_heads))


def _split_heads(x, n_heads):
    n, h = x.shape
    return x.reshape(n, n_heads, h // n_heads)


def attend_fwd(layer: LayerParams, h_c_in, h_r, h_n, bias_in: PairBias, layer_index: int = 0):
    """One cross-attention layer; returns (h_c_out, bias_out, attn, cache).

    bias_out holds the pre-softmax logits (query-key term plus incoming
    bias), which is what the next layer consumes. attn is (n_q, n_keys, H).
    With no keys, only a token-only query set is legal and the layer
    reduces to its feed-forward path.
    """
    n_q, h = h_c_in.shape
    n_heads = layer.n_heads
    d_head = h // n_heads
    n_keys = h_r.shape[0] + h_n.shape[0]
    if n_keys == 0:
        if n_q != 1:
            raise NumericError("chiral queries present but the key set is empty")
        u = h_c_in
        attn = np.zeros((n_q, 0, n_heads))
        logits = bias_in.p.copy()
        u_ln, ln1_cache = layer_norm_rows(u, layer.ln1_gamma, layer.ln1_beta)
        z1 = u_ln @ layer.ff_w1.T + layer.ff_b1
        a1 = gelu(z1)
        f = a1 @ layer.ff_w2.T + layer.ff_b2
        out, ln2_cache = layer_norm_rows(u_ln + f, layer.ln2_gamma, layer.ln2_beta)
        cache = ("ff_only", h_c_in, ln1_cache, u_ln, z1, a1, ln2_cache)
        return out, PairBias(p=logits), attn, cache

    q = h_c_in @ layer.wq.T
    k_r = h_r @ layer.wk_r.T
    v_r = h_r @ layer.wv_r.T
    k_n = h_n @ layer.wk_n.T
    v_n = h_n @ layer.wv_n.T
    k = np.vstack([k_r, k_n])
    v = np.vstack([v_r, v_n])
    qh = _split_heads(q, n_heads)  # (n_q, H, d)
    kh = _split_heads(k, n_heads)  # (n_k, H, d)
    vh = _split_heads(v, n_heads)
    scale = 1.0 / np.sqrt(d_head)
    scores = np.einsum("qhd,khd->qkh", qh, kh) * scale
    logits = scores + bias_in.p
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite attention logits at layer {layer_index}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    attn = expd / expd.sum(axis=1, keepdims=True)  # (n_q, n_k, H)
    ctx = np.einsum("qkh,khd->qhd", attn, vh).reshape(n_q, h)
    att_out = ctx @ layer.wo.T
    u = h_c_in + att_out
    u_ln, ln1_cache = layer_norm_rows(u, layer.ln1_gamma, layer.ln1_beta)
    z1 = u_ln @ layer.ff_w1.T + layer.ff_b1
    a1 = gelu(z1)
    f = a1 @ layer.ff_w2.T + layer.ff_b2
    out, ln2_cache = layer_norm_rows(u_ln + f, layer.ln2_gamma, layer.ln2_beta)
    cache = (
        "full", h_c_in, h_r, h_n, qh, kh, vh, attn, ctx, scale,
        ln1_cache, u_ln, z1, a1, ln2_cache,
    )
    return out, PairBias(p=logits), attn, cache


def attend(layer: LayerParams, h_c_in, h_r, h_n, bias_in: PairBias):
    out, bias_out, attn, _ = attend_fwd(layer, h_c_in, h_r, h_n, bias_in)
    return out, bias_out, attn


def attend_bwd(layer: LayerParams, cache, d_out, d_bias_out):
    """Backward of attend_fwd.

    d_bias_out is the gradient flowing into the emitted logits (from the
    next layer's bias input); the incoming bias gradient equals the total
    logit gradient because the bias enters additively.
    Returns (param_grads, d_h_c_in, d_h_r, d_h_n, d_bias_in).
    """
    if cache[0] == "ff_only":
        _, h_c_in, ln1_cache, u_ln, z1, a1, ln2_cache = cache
        grads = {name: np.zeros_like(getattr(layer, name)) for name in (
            "wq", "wk_r", "wv_r", "wk_n", "wv_n", "wo",
            "ff_w1", "ff_b1", "ff_w2", "ff_b2",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")}
        d_v, d_g2, d_b2 = layer_norm_rows_backward(d_out, ln2_cache, layer.ln2_gamma)
        grads["ln2_gamma"] = d_g2
        grads["ln2_beta"] = d_b2
        d_f = d_v
        grads["ff_w2"] = d_f.T @ a1
        grads["ff_b2"] = d_f.sum(axis=0)
        d_z1 = (d_f @ layer.ff_w2) * gelu_grad(z1)
        grads["ff_w1"] = d_z1.T @ u_ln
        grads["ff_b1"] = d_z1.sum(axis=0)
        d_u_ln = d_v + d_z1 @ layer.ff_w1
        d_u, d_g1, d_b1 = layer_norm_rows_backward(d_u_ln, ln1_cache, layer.ln1_gamma)
        grads["ln1_gamma"] = d_g1
        grads["ln1_beta"] = d_b1
        return grads, d_u, np.zeros((0, h_c_in.shape[1])), np.zeros((0, h_c_in.shape[1])), d_bias_out.copy()

    (_, h_c_in, h_r, h_n, qh, kh, vh, attn, ctx, scale,
     ln1_cache, u_ln, z1, a1, ln2_cache) = cache
    n_q, h = h_c_in.shape
    n_heads = layer.n_heads
    n_r = h_r.shape[0]

    grads = {}
    d_v, d_g2, d_b2 = layer_norm_rows_backward(d_out, ln2_cache, layer.ln2_gamma)
    grads["ln2_gamma"] = d_g2
    grads["ln2_beta"] = d_b2
    d_f = d_v
    grads["ff_w2"] = d_f.T @ a1
    grads["ff_b2"] = d_f.sum(axis=0)
    d_z1 = (d_f @ layer.ff_w2) * gelu_grad(z1)
    grads["ff_w1"] = d_z1.T @ u_ln
    grads["ff_b1"] = d_z1.sum(axis=0)
    d_u_ln = d_v + d_z1 @ layer.ff_w1
    d_u, d_g1, d_b1 = layer_norm_rows_backward(d_u_ln, ln1_cache, layer.ln1_gamma)
    grads["ln1_gamma"] = d_g1
    grads["ln1_beta"] = d_b1

    d_h_c = d_u.copy()
    d_att_out = d_u
    grads["wo"] = d_att_out.T @ ctx
    d_ctx = (d_att_out @ layer.wo).reshape(n_q, n_heads, h // n_heads)
    d_attn = np.einsum("qhd,khd->qkh", d_ctx, vh)
    d_vh = np.einsum("qkh,qhd->khd", attn, d_ctx)
    # softmax backward per (query, head)
    inner = (d_attn * attn).sum(axis=1, keepdims=True)
    d_logits = attn * (d_attn - inner)
    d_logits = d_logits + d_bias_out
    d_bias_in = d_logits.copy()
    d_qh = np.einsum("qkh,khd->qhd", d_logits, kh) * scale
    d_kh = np.einsum("qkh,qhd->khd", d_logits, qh) * scale
    d_q = d_qh.reshape(n_q, h)
    d_k = d_kh.reshape(-1, h)
    d_vflat = d_vh.reshape(-1, h)
    grads["wq"] = d_q.T @ h_c_in
    d_h_c += d_q @ layer.wq
    grads["wk_r"] = d_k[:n_r].T @ h_r
    grads["wv_r"] = d_vflat[:n_r].T @ h_r
    grads["wk_n"] = d_k[n_r:].T @ h_n
    grads["wv_n"] = d_vflat[n_r:].T @ h_n
    d_h_r = d_k[:n_r] @ layer.wk_r + d_vflat[:n_r] @ layer.wv_r
    d_h_n = d_k[n_r:] @ layer.wk_n + d_vflat[n_r:] @ layer.wv_n
    return grads, d_h_c, d_h_r, d_h_n, d_bias_in


def pool(h_c_final) -> np.ndarray:
    """Token row plus the mean of the chiral rows (token alone if none)."""
    token = h_c_final[0]
    if h_c_final.shape[0] == 1:
        return token.copy()
    return token + h_c_final[1:].mean(axis=0)


def pool_bwd(d_pooled, n_rows: int) -> np.ndarray:
    d = np.zeros((n_rows, d_pooled.shape[0]))
    d[0] = d_pooled
    if n_rows > 1:
        d[1:] = d_pooled / (n_rows - 1)
    return d


def init_distance_bias(rng, n_channels: int, n_heads: int) -> DistanceBiasParams:
    bound = np.sqrt(6.0 / (n_channels + n_heads))
    return DistanceBiasParams(
        e1=np.ones((N_PAIR_TYPES, n_channels)),
        e2=np.zeros((N_PAIR_TYPES, n_channels)),
        mu=np.linspace(0.0, 6.0, n_channels),
        sigma=np.ones(n_channels),
        w_p=rng.uniform(-bound, bound, size=(n_channels, n_heads)),
    )


def init_layer(rng, h: int, n_heads: int) -> LayerParams:
    def xavier(n_out, n_in):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    return LayerParams(
        wq=xavier(h, h),
        wk_r=xavier(h, h),
        wv_r=xavier(h, h),
        wk_n=xavier(h, h),
        wv_n=xavier(h, h),
        wo=xavier(h, h),
        ff_w1=xavier(4 * h, h),
        ff_b1=np.zeros(4 * h),
        ff_w2=xavier(h, 4 * h),
        ff_b2=np.zeros(h),
        ln1_gamma=np.ones(h),
        ln1_beta=np.zeros(h),
        ln2_gamma=np.ones(h),
        ln2_beta=np.zeros(h),
        n_heads=n_heads,
    )


def head_averaged_rows(attn) -> np.ndarray:
    """Head-averaged attention weights for the chiral queries (token dropped)."""
    return attn[1:].mean(axis=2)
