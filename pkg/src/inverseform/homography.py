"""Homography/affine parameters, transform sampling and the spatial-transformer warp.

Coordinates are normalised so that the centres of the corner pixels sit at
exactly -1 and +1 on both axes. A transform ``theta`` warps an image by
inverse mapping: output pixel ``p`` reads the input at ``theta^-1 p``.
Translation by one pixel on a W-wide image is therefore ``2 / (W - 1)``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, SingularityError
from .numcore.tensor import Tensor, _make, as_tensor, matmul, reshape

DET_EPS = 1e-9
_SNAP = 1e-9


class Mode(str, enum.Enum):
    AFFINE6 = "affine6"
    HOMOGRAPHY8 = "homography8"

    @property
    def num_params(self):
        return 6 if self is Mode.AFFINE6 else 8

    @classmethod
    def from_params(cls, k):
        try:
            return {6: cls.AFFINE6, 8: cls.HOMOGRAPHY8}[k]
        except KeyError:
            raise ContractError(f"parameter vector must have 6 or 8 entries, got {k}") from None


@dataclass(frozen=True, eq=False)
class HomographyParams:
    matrix: np.ndarray
    mode: Mode = Mode.AFFINE6

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DimensionError(f"homography matrix must be 3x3, got {m.shape}")
        if m[2, 2] != 1.0:
            raise ContractError(f"matrix[2][2] must be 1, got {m[2, 2]}")
        mode = Mode(self.mode)
        if mode is Mode.AFFINE6 and (m[2, 0] != 0.0 or m[2, 1] != 0.0):
            raise ContractError("affine6 transform with a non-zero perspective row")
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise SingularityError(f"transform is singular (det={np.linalg.det(m):.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "mode", mode)

    def __eq__(self, other):
        return (isinstance(other, HomographyParams) and self.mode is other.mode
                and np.array_equal(self.matrix, other.matrix))

    def inverse(self):
        inv = np.linalg.inv(self.matrix)
        inv = inv / inv[2, 2]
        if self.mode is Mode.AFFINE6:
            inv[2, :2] = 0.0
        inv[2, 2] = 1.0
        return HomographyParams(inv, self.mode)

    def compose(self, other):
        """``self @ other``: apply ``other`` first."""
        m = self.matrix @ other.matrix
        mode = Mode.AFFINE6 if self.mode is other.mode is Mode.AFFINE6 else Mode.HOMOGRAPHY8
        return HomographyParams(m / m[2, 2], mode)

    def to_bytes(self):
        return struct.pack("<9d", *self.matrix.reshape(-1))

    @classmethod
    def from_bytes(cls, buf, mode=Mode.HOMOGRAPHY8):
        return cls(np.array(struct.unpack("<9d", buf)).reshape(3, 3), mode)


def identity(mode=Mode.AFFINE6):
    return HomographyParams(np.eye(3), mode)


def translation(tx, ty, mode=Mode.AFFINE6):
    m = np.eye(3)
    m[0, 2], m[1, 2] = tx, ty
    return HomographyParams(m, mode)


def rotation(angle, mode=Mode.AFFINE6):
    c, s = np.cos(angle), np.sin(angle)
    return HomographyParams(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), mode)


def pixel_shift(dx, dy, size, mode=Mode.AFFINE6):
    """Translation by (dx, dy) pixels on a square tile of side ``size``."""
    step = 2.0 / (size - 1)
    return translation(dx * step, dy * step, mode)


def to_vector(p: HomographyParams) -> np.ndarray:
    flat = p.matrix.reshape(-1)
    return flat[:6].copy() if p.mode is Mode.AFFINE6 else flat[:8].copy()


def from_vector(v, mode=None) -> HomographyParams:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    mode = Mode.from_params(v.size) if mode is None else Mode(mode)
    if v.size != mode.num_params:
        raise ContractError(f"{mode.value} expects {mode.num_params} values, got {v.size}")
    flat = np.zeros(9)
    flat[:v.size] = v
    flat[8] = 1.0
    return HomographyParams(flat.reshape(3, 3), mode)


def identity_vector(mode=Mode.AFFINE6):
    return to_vector(identity(mode))


def _embedding(k):
    sel = np.zeros((k, 9))
    sel[np.arange(k), np.arange(k)] = 1.0
    offset = np.zeros(9)
    offset[8] = 1.0
    return sel, offset


def vector_to_matrix_tensor(v):
    """Differentiable (B, K) -> (B, 3, 3); the missing entries are 0 and matrix[2][2] = 1."""
    v = as_tensor(v)
    k = v.shape[-1]
    Mode.from_params(k)
    sel, offset = _embedding(k)
    batched = v.ndim == 2
    vb = v if batched else reshape(v, (1, k))
    flat = matmul(vb, Tensor(sel)) + offset
    return reshape(flat, (vb.shape[0], 3, 3) if batched else (3, 3))


# -- sampling -----------------------------------------------------------

@dataclass(frozen=True)
class TransformRanges:
    """Sampling ranges. Translation is a fraction of the tile side."""

    max_translation: float = 0.15
    max_rotation: float = float(np.deg2rad(15.0))
    scale_range: tuple = (0.85, 1.15)
    max_shear: float = 0.1
    max_perspective: float = 0.001

    def __post_init__(self):
        lo, hi = self.scale_range
        if not lo <= 1.0 <= hi:
            raise ContractError(f"scale_range must satisfy lo <= 1 <= hi, got {self.scale_range}")
        for name in ("max_translation", "max_rotation", "max_shear", "max_perspective"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if lo <= 0:
            raise ContractError("scale must stay positive")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0)


def _uniform(rng, half):
    return rng.uniform(-half, half) if half > 0 else 0.0


def sample_transform(ranges: TransformRanges, rng_seed, mode=Mode.AFFINE6) -> HomographyParams:
    """T(translate) R(rotate) S(scale) Sh(shear) [P(perspective)], each factor uniform.

    ``rng_seed`` is an integer seed or a ``numpy.random.Generator`` (consumed).
    """
    mode = Mode(mode)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    tx = 2.0 * _uniform(rng, ranges.max_translation)
    ty = 2.0 * _uniform(rng, ranges.max_translation)
    angle = _uniform(rng, ranges.max_rotation)
    lo, hi = ranges.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    shear = _uniform(rng, ranges.max_shear)

    c, s = np.cos(angle), np.sin(angle)
    t = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    sh = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = t @ r @ sc @ sh
    if mode is Mode.HOMOGRAPHY8:
        p = np.eye(3)
        p[2, 0] = _uniform(rng, ranges.max_perspective)
        p[2, 1] = _uniform(rng, ranges.max_perspective)
        m = m @ p
    m = m / m[2, 2]
    m[2, 2] = 1.0
    return HomographyParams(m, mode)


# -- warping ------------------------------------------------------------

def _theta_tensor(theta):
    if isinstance(theta, HomographyParams):
        return Tensor(theta.matrix)
    if isinstance(theta, (list, tuple)) and theta and isinstance(theta[0], HomographyParams):
        return Tensor(np.stack([t.matrix for t in theta]))
    return as_tensor(theta)


def stn_warp(image, theta):
    """Warp ``image`` (H, W) or (B, H, W) by ``theta`` (3, 3) / (B, 3, 3) / HomographyParams.

    Bilinear sampling, zero outside the input. Differentiable with respect to
    both the image and the transform matrix.
    """
    img = as_tensor(image)
    th = _theta_tensor(theta)
    single = img.ndim == 2
    if img.ndim not in (2, 3):
        raise DimensionError(f"stn_warp expects (H, W) or (B, H, W) images, got {img.shape}")
    I = img.data[None] if single else img.data
    T = th.data[None] if th.ndim == 2 else th.data
    if T.shape[-2:] != (3, 3):
        raise DimensionError(f"stn_warp expects 3x3 transforms, got {th.shape}")
    B, H, W = I.shape
    if H < 2 or W < 2:
        raise ContractError(f"stn_warp needs H, W >= 2, got {(H, W)}")
    if T.shape[0] not in (1, B):
        raise DimensionError(f"batch mismatch: images {img.shape} vs transforms {th.shape}")
    T = np.broadcast_to(T, (B, 3, 3))
    dets = np.linalg.det(T)
    if np.any(np.abs(dets) <= DET_EPS):
        raise SingularityError(f"singular transform (det={dets[np.argmin(np.abs(dets))]:.3e})")
    A = np.linalg.inv(T)

    xs = np.linspace(-1.0, 1.0, W)
    ys = np.linspace(-1.0, 1.0, H)
    gx, gy = np.meshgrid(xs, ys)
    hom = np.stack([gx.ravel(), gy.ravel(), np.ones(H * W)])          # 3 x HW
    src = A @ hom                                                     # B x 3 x HW
    s2 = src[:, 2]
    front = s2 > 0
    s2 = np.where(front, s2, 1.0)
    sx, sy = src[:, 0] / s2, src[:, 1] / s2
    px = (sx + 1.0) * (0.5 * (W - 1))
    py = (sy + 1.0) * (0.5 * (H - 1))
    rx, ry = np.round(px), np.round(py)
    px = np.where(np.abs(px - rx) < _SNAP, rx, px)
    py = np.where(np.abs(py - ry) < _SNAP, ry, py)
    px = np.where(front, px, -2.0)
    py = np.where(front, py, -2.0)

    x0 = np.floor(px)
    y0 = np.floor(py)
    wx, wy = px - x0, py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = I.reshape(B, H * W)
    base = (np.arange(B) * (H * W))[:, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, yi * W + xi, 0)
        vals = np.where(valid, np.take_along_axis(flat, idx, axis=1), 0.0)
        corners.append((idx + base, valid, vals))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(B, H, W)
    if single:
        out = out[0]

    def backward(g):
        g = g.reshape(B, H * W)
        gimg = None
        if img.requires_grad:
            acc = np.zeros(B * H * W)
            for (idx, valid, _), w in zip(corners, (w00, w01, w10, w11)):
                acc += np.bincount(idx[valid], weights=(g * w)[valid], minlength=B * H * W)
            gimg = acc.reshape(I.shape)
            if single:
                gimg = gimg[0]
        gtheta = None
        if th.requires_grad:
            dpx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dpy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gsx = np.where(front, g * dpx * (0.5 * (W - 1)), 0.0)
            gsy = np.where(front, g * dpy * (0.5 * (H - 1)), 0.0)
            gsrc = np.stack([gsx / s2, gsy / s2, -(gsx * sx + gsy * sy) / s2])   # 3 x B x HW
            gA = np.einsum("kbn,jn->bkj", gsrc, hom)
            At = np.swapaxes(A, -1, -2)
            gT = -(At @ gA @ At)
            if th.ndim == 2:
                gT = gT.sum(axis=0)
            elif th.shape[0] == 1 and B > 1:
                gT = gT.sum(axis=0, keepdims=True)
            gtheta = gT
        return gimg, gtheta

    return _make(out, (img, th), backward, "stn_warp")
