"""Chiral encoder: determinant kernels over chirality matrices plus
per-class feature projectors and a learnable global token.

Each kernel slice w (d_p x 3) maps a chirality matrix M to O = w @ M,
which is normalized, QR-factorized, and read out as det(R). The sign of
det(R) is anchored to the slice's own column space (see
numerics.qr_det_oriented), so a reflection of the molecule flips every
channel while rigid motions leave them unchanged.

The normalization stage removes the per-column mean along d_p and divides
by one pooled standard deviation for the whole slice. Per-column scales
would break rotation invariance (a rotation mixes the three columns), and
an additive shift would too, so `beta` is kept frozen at zero while the
per-row gain `gamma` stays learnable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegeneracyError, NumericError
from .geometry import AtomPartition, Molecule, UnitKind, chirality_matrix, reference_point
from .numerics import det3_batch, gelu, gelu_grad, qr_det3_batch, qr_thin

DET_GUARD = 1e-14  # below this Gram determinant the sign boundary is reached


class RankStrategy(Enum):
    QR_RETRACTION = "qr_retraction"
    REGULARIZE = "regularize"
    NONE = "none"


@dataclass
class KernelBank:
    w: np.ndarray  # (k, d_p, 3)
    gamma: np.ndarray  # (d_p,)
    beta: np.ndarray  # (d_p,), frozen at zero
    eps: float = 1e-5

    @property
    def n_kernels(self) -> int:
        return self.w.shape[0]

    @property
    def d_p(self) -> int:
        return self.w.shape[1]


@dataclass
class Mlp2:
    """Two-layer perceptron with GELU between the layers."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class EncoderParams:
    kernels: KernelBank
    proj_c: Mlp2
    proj_r: Mlp2
    proj_n: Mlp2
    global_token: np.ndarray  # (h,)
    rank_strategy: RankStrategy = RankStrategy.QR_RETRACTION


@dataclass
class EncodedMolecule:
    h_c: np.ndarray  # (1 + n_units, h), global token first
    h_r: np.ndarray  # (|I_r|, h)
    h_n: np.ndarray  # (|I_n|, h)
    chiral_positions: np.ndarray  # (n_units, 3) reference points
    related_positions: np.ndarray
    nonchiral_positions: np.ndarray
    related_indices: tuple[int, ...]
    nonchiral_indices: tuple[int, ...]


def effective_weight(bank: KernelBank, normalize: bool) -> np.ndarray:
    """Left factor the normalized slices reduce to: gamma * centered(w)."""
    if not normalize:
        return bank.w
    centered = bank.w - bank.w.mean(axis=1, keepdims=True)
    return bank.gamma[None, :, None] * centered


def kernel_fwd(bank: KernelBank, mc_batch, normalize: bool = True):
    """Determinant-kernel forward; returns (out (B, k), cache).

    Normalization removes each column's mean along d_p and divides the
    whole slice by one pooled std, so a normalized slice is still
    (positive scalar) * W_eff @ M and det(W_eff^T A) orients the sign.
    """
    mc_batch = np.asarray(mc_batch, dtype=np.float64)
    if mc_batch.ndim != 3 or mc_batch.shape[1:] != (3, 3):
        raise NumericError(f"expected (B, 3, 3) chirality matrices, got {mc_batch.shape}")
    if not np.all(np.isfinite(mc_batch)):
        raise NumericError("chirality matrices contain non-finite values")
    n_batch = mc_batch.shape[0]
    k, d_p = bank.n_kernels, bank.d_p
    if n_batch == 0:
        return np.zeros((0, k)), (bank, mc_batch, normalize, None, None, None, None)
    o = np.einsum("kpc,bcd->bkpd", bank.w, mc_batch)
    if normalize:
        centered = o - o.mean(axis=2, keepdims=True)
        sigma = np.sqrt((centered * centered).mean(axis=(2, 3)) + bank.eps)  # (B, k)
        a = (
            bank.gamma[None, None, :, None] * centered / sigma[:, :, None, None]
            + bank.beta[None, None, :, None]
        )
    else:
        centered = sigma = None
        a = o
    dets = qr_det3_batch(a.reshape(n_batch * k, d_p, 3)).reshape(n_batch, k)
    w_eff = effective_weight(bank, normalize)
    ref = det3_batch(np.einsum("kpc,bkpd->bkcd", w_eff, a))
    out = np.where(dets * ref < 0.0, -dets, dets)
    cache = (bank, mc_batch, normalize, out, a, centered, sigma)
    return out, cache


def kernel_forward(bank: KernelBank, mc_batch, normalize: bool = True) -> np.ndarray:
    return kernel_fwd(bank, mc_batch, normalize)[0]


def kernel_bwd(cache, d_out):
    """Backward of kernel_fwd; returns (d_w, d_gamma, d_mc).

    det(R) equals sign * sqrt(det(A^T A)) with the sign locally constant,
    so d det/dA = det(R) * A (A^T A)^{-1}; near the sign boundary
    (det(A^T A) < 1e-14) the contribution is zeroed.
    """
    bank, mc_batch, normalize, out, a, centered, sigma = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    d_gamma = np.zeros_like(bank.gamma)
    if out is None or out.size == 0:
        return np.zeros_like(bank.w), d_gamma, np.zeros_like(mc_batch)
    gram = np.einsum("bkpc,bkpd->bkcd", a, a)
    detg = det3_batch(gram)
    alive = detg >= DET_GUARD
    scale = np.where(alive, d_out * out, 0.0)
    gram_safe = np.where(alive[:, :, None, None], gram, np.eye(3))
    d_a = scale[:, :, None, None] * np.einsum("bkpc,bkcd->bkpd", a, np.linalg.inv(gram_safe))
    if normalize:
        sig4 = sigma[:, :, None, None]
        gm = bank.gamma[None, None, :, None]
        d_gamma = ((d_a * centered) / sig4).sum(axis=(0, 1, 3))
        inner = (d_a * gm * centered).sum(axis=(2, 3))
        n_el = centered.shape[2] * 3
        d_c = gm * d_a / sig4 - inner[:, :, None, None] * centered / (n_el * sig4**3)
        d_o = d_c - d_c.mean(axis=2, keepdims=True)
    else:
        d_o = d_a
    d_w = np.einsum("bkpd,bcd->kpc", d_o, mc_batch)
    d_mc = np.einsum("kpc,bkpd->bcd", bank.w, d_o)
    return d_w, d_gamma, d_mc


def regularization_loss(bank: KernelBank) -> float:
    """Sum over slices of ||w^T w - I_3||_F^2."""
    total = 0.0
    for kk in range(bank.n_kernels):
        diff = bank.w[kk].T @ bank.w[kk] - np.eye(3)
        total += float((diff * diff).sum())
    return total


def regularization_grad(bank: KernelBank) -> np.ndarray:
    d_w = np.zeros_like(bank.w)
    for kk in range(bank.n_kernels):
        w = bank.w[kk]
        d_w[kk] = 4.0 * w @ (w.T @ w - np.eye(3))
    return d_w


def retract_orthonormal(bank: KernelBank) -> KernelBank:
    """Replace every slice by the Q factor of its thin QR."""
    new_w = np.empty_like(bank.w)
    for kk in range(bank.n_kernels):
        res = qr_thin(bank.w[kk])
        if np.min(np.abs(np.diag(res.r))) < 1e-12:
            raise DegeneracyError(f"kernel slice {kk} is rank-deficient, cannot retract")
        new_w[kk] = res.q
    return KernelBank(w=new_w, gamma=bank.gamma, beta=bank.beta, eps=bank.eps)


def mlp2_fwd(mlp: Mlp2, x):
    x = np.asarray(x, dtype=np.float64)
    z1 = x @ mlp.w1.T + mlp.b1
    a1 = gelu(z1)
    out = a1 @ mlp.w2.T + mlp.b2
    return out, (x, z1, a1)


def mlp2_bwd(mlp: Mlp2, cache, d_out):
    x, z1, a1 = cache
    d_w2 = d_out.T @ a1
    d_b2 = d_out.sum(axis=0)
    d_a1 = d_out @ mlp.w2
    d_z1 = d_a1 * gelu_grad(z1)
    d_w1 = d_z1.T @ x
    d_b1 = d_z1.sum(axis=0)
    d_x = d_z1 @ mlp.w1
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}, d_x


def unit_feature_rows(mol: Molecule) -> np.ndarray:
    """Feature input of proj_c, one row per chiral unit (axis rows average
    the two axis atoms)."""
    rows = []
    for unit in mol.chiral_units:
        if unit.kind is UnitKind.CENTER:
            rows.append(mol.features[unit.center_atoms[0]])
        else:
            a, b = unit.center_atoms
            rows.append(0.5 * (mol.features[a] + mol.features[b]))
    if not rows:
        return np.zeros((0, mol.features.shape[1]))
    return np.stack(rows)


def encode_fwd(params: EncoderParams, mol: Molecule, partition: AtomPartition):
    n_units = len(mol.chiral_units)
    h = params.global_token.shape[0]
    if n_units:
        mc_batch = np.stack([chirality_matrix(u, mol.coords).m for u in mol.chiral_units])
    else:
        mc_batch = np.zeros((0, 3, 3))
    dets, k_cache = kernel_fwd(params.kernels, mc_batch)
    feats_c = unit_feature_rows(mol)
    proj_out, c_cache = mlp2_fwd(params.proj_c, feats_c)
    h_c = np.vstack([params.global_token[None, :], dets + proj_out]) if n_units else params.global_token[None, :].copy()
    h_r, r_cache = mlp2_fwd(params.proj_r, mol.features[list(partition.related)])
    h_n, n_cache = mlp2_fwd(params.proj_n, mol.features[list(partition.nonchiral)])
    h_r = h_r.reshape(len(partition.related), h)
    h_n = h_n.reshape(len(partition.nonchiral), h)
    encoded = EncodedMolecule(
        h_c=h_c,
        h_r=h_r,
        h_n=h_n,
        chiral_positions=(
            np.stack([reference_point(u, mol.coords) for u in mol.chiral_units])
            if n_units
            else np.zeros((0, 3))
        ),
        related_positions=mol.coords[list(partition.related)].reshape(len(partition.related), 3),
        nonchiral_positions=mol.coords[list(partition.nonchiral)].reshape(len(partition.nonchiral), 3),
        related_indices=partition.related,
        nonchiral_indices=partition.nonchiral,
    )
    return encoded, (k_cache, c_cache, r_cache, n_cache, n_units)


def encode(params: EncoderParams, mol: Molecule, partition: AtomPartition) -> EncodedMolecule:
    return encode_fwd(params, mol, partition)[0]


def encode_bwd(params: EncoderParams, cache, d_hc, d_hr, d_hn):
    """Backward of encode_fwd.

    Returns (grads, d_mc): grads keyed by parameter group, d_mc the
    gradient with respect to the stacked chirality matrices.
    """
    k_cache, c_cache, r_cache, n_cache, n_units = cache
    d_token = d_hc[0].copy()
    d_rows = d_hc[1:]
    d_w, d_gamma, d_mc = kernel_bwd(k_cache, d_rows)
    d_proj_c, _ = mlp2_bwd(params.proj_c, c_cache, d_rows)
    d_proj_r, _ = mlp2_bwd(params.proj_r, r_cache, d_hr)
    d_proj_n, _ = mlp2_bwd(params.proj_n, n_cache, d_hn)
    grads = {
        "kernel.w": d_w,
        "kernel.gamma": d_gamma,
        "token": d_token,
        "proj_c": d_proj_c,
        "proj_r": d_proj_r,
        "proj_n": d_proj_n,
    }
    return grads, d_mc


def init_mlp2(rng, d_in: int, d_hidden: int, d_out: int) -> Mlp2:
    def xavier(n_out, n_in):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    return Mlp2(
        w1=xavier(d_hidden, d_in),
        b1=np.zeros(d_hidden),
        w2=xavier(d_out, d_hidden),
        b2=np.zeros(d_out),
    )


def init_kernel_bank(rng, n_kernels: int, d_p: int) -> KernelBank:
    """Slices start as random orthonormal columns (reg loss 0, alpha 1)."""
    w = np.empty((n_kernels, d_p, 3))
    for kk in range(n_kernels):
        w[kk] = qr_thin(rng.standard_normal((d_p, 3))).q
    return KernelBank(w=w, gamma=np.ones(d_p), beta=np.zeros(d_p))


def init_encoder(rng, d_f: int, h: int, d_p: int, rank_strategy: RankStrategy) -> EncoderParams:
    return EncoderParams(
        kernels=init_kernel_bank(rng, h, d_p),
        proj_c=init_mlp2(rng, d_f, h, h),
        proj_r=init_mlp2(rng, d_f, h, h),
        proj_n=init_mlp2(rng, d_f, h, h),
        global_token=rng.normal(0.0, 0.02, size=h),
        rank_strategy=rank_strategy,
    )
