"""Dense linear algebra and differentiation utilities.

Everything runs in 64-bit floats. The QR routine keeps the signed-diagonal
convention (no sign normalization of R), because downstream determinant
kernels rely on det(R) carrying orientation information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import NumericError

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class QrResult:
    q: np.ndarray  # (m, n), orthonormal columns
    r: np.ndarray  # (n, n), upper triangular, diagonal may be negative


def qr_thin(a) -> QrResult:
    """Householder thin QR of an m x n matrix with m >= n.

    A reflection is applied at every column step with the numerically
    stable sign choice, so generic input uses exactly n reflections and
    sign(det R) covaries with the orientation of the input columns. An
    exactly zero working column is skipped and leaves a zero diagonal
    entry (the rank-deficient path).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise NumericError(f"qr_thin expects a matrix, got shape {a.shape}")
    m, n = a.shape
    if m < n:
        raise NumericError(f"qr_thin needs at least as many rows as columns, got {m}x{n}")
    r = a.copy()
    vs: list[np.ndarray | None] = []
    for j in range(n):
        x = r[j:, j].copy()
        norm = np.linalg.norm(x)
        if norm == 0.0:
            vs.append(None)
            continue
        v = x
        v[0] += norm if x[0] >= 0.0 else -norm
        v /= np.linalg.norm(v)
        vs.append(v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
    q = np.zeros((m, n))
    q[:n, :n] = np.eye(n)
    for j in range(n - 1, -1, -1):
        v = vs[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return QrResult(q=q, r=np.triu(r[:n, :]))


def qr_det_oriented(a, anchor) -> float:
    """det(R) of the thin QR of `a`, sign-fixed against an orientation anchor.

    Householder QR determines det(R) only up to the diag(+-1) gauge of the
    thin factorization, and the raw signs are not a consistent function of
    the input's orientation (LAPACK behaves the same way). For matrices of
    the form a = W @ m the quantity det(anchor^T a) is exactly
    sign-covariant with det(m) whenever anchor's columns span range(W):
    with anchor = W it equals det(W^T W) det(m) > 0 * det(m). Aligning
    det(R) with it makes the signed determinant a reliable orientation
    readout. Pass anchor = W (or any basis of its column space).
    """
    res = qr_thin(a)
    d = det3(res.r)
    ref = det3(np.asarray(anchor).T @ np.asarray(a, dtype=np.float64))
    if d * ref < 0.0:
        d = -d
    return d


def qr_det3_batch(a) -> np.ndarray:
    """det(R) of the thin Householder QR for a stack of (N, m, 3) matrices.

    Same reflections and sign choices as qr_thin, vectorized over the
    batch; only the R factor's diagonal is materialized.
    """
    r = np.array(a, dtype=np.float64)
    if r.ndim != 3 or r.shape[2] != 3 or r.shape[1] < 3:
        raise NumericError(f"expected (N, m>=3, 3) stack, got {r.shape}")
    n = r.shape[0]
    det = np.ones(n)
    for j in range(3):
        x = r[:, j:, j]
        norm = np.linalg.norm(x, axis=1)
        sign0 = np.where(x[:, 0] >= 0.0, 1.0, -1.0)
        v = x.copy()
        v[:, 0] += sign0 * norm
        vnorm = np.linalg.norm(v, axis=1)
        ok = vnorm > 0.0
        v /= np.where(ok, vnorm, 1.0)[:, None]
        v[~ok] = 0.0
        sub = r[:, j:, j:]
        proj = np.einsum("np,npq->nq", v, sub)
        sub -= 2.0 * v[:, :, None] * proj[:, None, :]
        det *= r[:, j, j]
    return det


def det3_batch(a) -> np.ndarray:
    """Cofactor determinant over a (..., 3, 3) stack."""
    a = np.asarray(a, dtype=np.float64)
    return (
        a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
        - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
        + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
    )


def det3(a) -> float:
    """Cofactor-expansion determinant of a 3x3 matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3, 3):
        raise NumericError(f"det3 expects a 3x3 matrix, got shape {a.shape}")
    return float(
        a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
        - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
        + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
    )


def gram_sqrt_det(w) -> float:
    """sqrt(det(w^T w)) for a d_p x 3 matrix; 0 for rank-deficient input.

    Small negative determinants from round-off are clamped to zero; a
    negative value beyond round-off scale is an internal error.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != 3:
        raise NumericError(f"gram_sqrt_det expects a d_p x 3 matrix, got shape {w.shape}")
    d = det3(w.T @ w)
    if d < 0.0:
        if d < -1e-14:
            raise NumericError(f"Gram determinant {d} negative beyond round-off")
        return 0.0
    return float(np.sqrt(d))


def layer_norm(x, gamma, beta, eps=1e-5):
    """(x - mean) / sqrt(var + eps) * gamma + beta with population variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise NumericError("layer_norm needs at least 2 entries")
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def layer_norm_rows(x, gamma, beta, eps=1e-5):
    """Row-wise layer norm of a 2-D array; returns (out, cache) for backward."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma + beta
    return out, (xhat, inv)


def layer_norm_rows_backward(d_out, cache, gamma):
    """Backward for layer_norm_rows; returns (d_x, d_gamma, d_beta)."""
    xhat, inv = cache
    d = xhat.shape[1]
    d_beta = d_out.sum(axis=0)
    d_gamma = (d_out * xhat).sum(axis=0)
    d_xhat = d_out * gamma
    d_x = inv * (
        d_xhat
        - d_xhat.mean(axis=1, keepdims=True)
        - xhat * (d_xhat * xhat).sum(axis=1, keepdims=True) / d
    )
    return d_x, d_gamma, d_beta


def gaussian(x, mu, sigma):
    """Normal density (1/(sqrt(2 pi) sigma)) exp(-((x-mu)/sigma)^2 / 2)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise NumericError("gaussian requires sigma > 0")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return INV_SQRT_2PI / sigma * np.exp(-0.5 * z * z)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    phi = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * phi


def finite_diff_grad(f, theta, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0.0:
        raise NumericError("finite_diff_grad requires h > 0")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        hi = f(theta + step)
        lo = f(theta - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool


def compare_grads(analytic, numeric, tol=1e-5) -> GradCheckReport:
    """Elementwise relative comparison of two flat gradient vectors."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, worst_index=worst, passed=max_rel < tol)
