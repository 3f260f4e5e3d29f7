"""Singular value decomposition of 3x3 matrices by one-sided Jacobi rotations.

One-sided (Hestenes) Jacobi rotates pairs of columns of ``m`` until they are
mutually orthogonal. Each rotation angle is the one that diagonalises the
corresponding 2x2 block of ``m.T @ m``, so the sweep is cyclic Jacobi on the
normal matrix without ever forming it. The column norms are the singular
values and the accumulated rotations are ``V``.

Everything is vectorised over leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateSpectrumError, NumericError
from .tensor import Tensor, _make, as_tensor, getitem

_PAIRS = ((0, 1), (0, 2), (1, 2))
_MAX_SWEEPS = 40
_TOL = 1e-15

DEGENERATE_GAP = 1e-8
JITTER = 1e-10


@dataclass(frozen=True)
class Svd3Result:
    """``m = u @ diag(sigma) @ v.T`` with sigma descending and non-negative."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma[..., None, :]) @ np.swapaxes(self.v, -1, -2)


def svd3(m) -> Svd3Result:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise NumericError(f"svd3 expects (..., 3, 3) input, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd3: input has non-finite entries")

    lead = m.shape[:-2]
    b = m.reshape(-1, 3, 3).copy()
    n = b.shape[0]
    # power-of-two rescaling (exact) keeps squared norms clear of under/overflow
    _, exp2 = np.frexp(np.abs(b).max(axis=(1, 2)))
    b = np.ldexp(b, -exp2[:, None, None])
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in _PAIRS:
            bp, bq = b[:, :, p], b[:, :, q]
            alpha = np.einsum("ij,ij->i", bp, bp)
            beta = np.einsum("ij,ij->i", bq, bq)
            gamma = np.einsum("ij,ij->i", bp, bq)
            active = np.abs(gamma) > _TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):     # |zeta| = inf gives t = 0, the right limit
                zeta = (beta - alpha) / (2.0 * g)
                sgn = np.where(zeta >= 0, 1.0, -1.0)
                t = sgn / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            b[:, :, p], b[:, :, q] = c * bp - s * bq, s * bp + c * bq
            vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
            v[:, :, p], v[:, :, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sigma = np.sqrt(np.einsum("nij,nij->nj", b, b))
    order = np.argsort(-sigma, axis=1, kind="stable")
    idx = np.arange(n)[:, None]
    sigma = sigma[idx, order]
    b = b[idx, :, order].transpose(0, 2, 1)
    v = v[idx, :, order].transpose(0, 2, 1)

    u = _orthonormal_u(b, sigma)
    sigma = np.ldexp(sigma, exp2[:, None])
    return Svd3Result(u.reshape(lead + (3, 3)), sigma.reshape(lead + (3,)), v.reshape(lead + (3, 3)))


def _orthonormal_u(b, sigma):
    """Left singular vectors from the rotated columns ``b = u * sigma``.

    Normalizing tiny columns amplifies rounding error, so only the first
    column is normalized directly. The second is Gram-Schmidt against it
    (twice) and the third is their cross product, signed to agree with b.
    Columns of a zero singular value get an arbitrary orthonormal completion.
    """
    u = np.zeros_like(b)
    eye = np.eye(3)
    s0 = sigma[:, 0]
    ok0 = s0 > 0
    u[:, :, 0] = np.where(ok0[:, None], b[:, :, 0] / np.where(ok0, s0, 1.0)[:, None], eye[0])
    u1 = u[:, :, 0]
    r = b[:, :, 1].copy()
    for _ in range(2):
        r -= np.einsum("ni,ni->n", u1, r)[:, None] * u1
    # rescale before the norm so squares of tiny entries do not go subnormal
    big = np.abs(r).max(axis=1)
    r = r / np.where(big > 0, big, 1.0)[:, None]
    nr = np.linalg.norm(r, axis=1)
    ok1 = (sigma[:, 1] > 0) & (big > 0)
    if not ok1.all():
        # any unit vector orthogonal to u1
        e = eye[np.argmin(np.abs(u1), axis=1)]
        w = e - np.einsum("ni,ni->n", u1, e)[:, None] * u1
        w /= np.linalg.norm(w, axis=1)[:, None]
        r = np.where(ok1[:, None], r, w)
        nr = np.where(ok1, nr, 1.0)
    u[:, :, 1] = r / nr[:, None]
    u3 = np.cross(u[:, :, 0], u[:, :, 1])
    sgn = np.where(np.einsum("ni,ni->n", u3, b[:, :, 2]) < 0, -1.0, 1.0)
    u[:, :, 2] = u3 * sgn[:, None]
    return u


def svd3_backward(result: Svd3Result, grad_u=None, grad_sigma=None, grad_v=None):
    """Gradient of a scalar with respect to ``m`` given gradients on u, sigma, v.

    Raises :class:`DegenerateSpectrumError` when two singular values are closer
    than 1e-8; the rotation factors are not differentiable there.
    """
    gm, degenerate = _svd3_backward_masked(result, grad_u, grad_sigma, grad_v)
    if np.any(degenerate):
        raise DegenerateSpectrumError(
            f"singular values {result.sigma} are separated by less than {DEGENERATE_GAP}")
    return gm


def _svd3_backward_masked(result, grad_u, grad_sigma, grad_v):
    u, s, v = result.u, result.sigma, result.v
    zero = np.zeros_like(u)
    gu = zero if grad_u is None else np.asarray(grad_u, dtype=np.float64)
    gv = zero if grad_v is None else np.asarray(grad_v, dtype=np.float64)
    gs = np.zeros_like(s) if grad_sigma is None else np.asarray(grad_sigma, dtype=np.float64)

    gap = s[..., None, :] - s[..., :, None]                         # s_j - s_i
    off = ~np.eye(3, dtype=bool)
    degenerate = np.any((np.abs(gap) < DEGENERATE_GAP) & off, axis=(-2, -1))
    gap = np.where(np.abs(gap) < JITTER, np.where(gap < 0, -JITTER, JITTER), gap)
    total = s[..., None, :] + s[..., :, None]
    total = np.where(total == 0, JITTER, total)
    f = np.where(off, 1.0 / (gap * total), 0.0)

    ut, vt = np.swapaxes(u, -1, -2), np.swapaxes(v, -1, -2)
    j_u = f * (ut @ gu - np.swapaxes(gu, -1, -2) @ u)
    j_v = f * (vt @ gv - np.swapaxes(gv, -1, -2) @ v)
    inner = j_u * s[..., None, :] + s[..., :, None] * j_v
    inner = inner + gs[..., :, None] * np.eye(3)
    gm = u @ inner @ vt
    gm = np.where(degenerate[..., None, None], 0.0, gm)
    return gm, degenerate


class SvdStats:
    """Counts how often the SVD gradient fell back to stop-gradient."""

    fallbacks = 0
    calls = 0

    @classmethod
    def reset(cls):
        cls.fallbacks = 0
        cls.calls = 0


def svd3_tensor(m):
    """Differentiable SVD: returns (u, sigma, v) tensors.

    Matrices with a degenerate spectrum contribute no gradient to ``m``.
    """
    m = as_tensor(m)
    res = svd3(m.data)
    packed = np.concatenate([res.u, res.sigma[..., :, None], res.v], axis=-1)  # (..., 3, 7)

    def backward(g):
        gm, degenerate = _svd3_backward_masked(res, g[..., 0:3], g[..., 3], g[..., 4:7])
        SvdStats.calls += int(np.size(degenerate))
        SvdStats.fallbacks += int(np.sum(degenerate))
        return (gm,)

    node = _make(packed, (m,), backward, "svd3")
    lead = (Ellipsis,)
    return (getitem(node, lead + (slice(None), slice(0, 3))),
            getitem(node, lead + (slice(None), 3)),
            getitem(node, lead + (slice(None), slice(4, 7))))


__all__ = ["Svd3Result", "svd3", "svd3_backward", "svd3_tensor", "SvdStats", "Tensor"]
