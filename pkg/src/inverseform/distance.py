"""InverseForm distances between a predicted transform and a reference.

* Euclidean: Frobenius norm of ``theta_hat - I``.
* Geodesic: project ``M = theta^-1 theta_hat`` onto SO(3) through its SVD,
  ``P = U diag(1, 1, det(U V^T)) V^T``, then
  ``arccos((tr P - 1) / 2) + lambda * tr(R^T R)`` with residual ``R = M - P``.

All functions accept a single 3x3 matrix or a (B, 3, 3) batch and are
differentiable with respect to ``theta_hat``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SingularityError
from .homography import DET_EPS, HomographyParams
from .numcore.svd import svd3_tensor
from .numcore.tensor import Tensor, _make, arccos, as_tensor, matmul, mul, trace, transpose

DEFAULT_LAMBDA = 0.1


class DistanceMode(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    GEODESIC = "geodesic"


@dataclass(frozen=True)
class DistanceConfig:
    mode: DistanceMode = DistanceMode.EUCLIDEAN
    lam: float = DEFAULT_LAMBDA
    arccos_eps: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "mode", DistanceMode(self.mode))
        if not self.lam >= 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.arccos_eps < 1e-3:
            raise ContractError(f"arccos_eps must lie in (0, 1e-3), got {self.arccos_eps}")


def _matrix(x):
    if isinstance(x, HomographyParams):
        return Tensor(x.matrix)
    return as_tensor(x)


def frobenius_norm(x):
    """sqrt(sum of squares) over the last two axes; gradient 0 at the origin."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=(-2, -1)))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x.data * np.asarray(scale)[..., None, None],)

    return _make(out, (x,), backward, "frobenius")


def euclidean_distance(theta_hat):
    m = _matrix(theta_hat)
    return frobenius_norm(m - np.eye(3))


def so3_project(m):
    """Returns (P, R_pi): the nearest rotation to ``m`` and the residual ``m - P``."""
    m = _matrix(m)
    u, _, v = svd3_tensor(m)
    d = np.ones(m.shape[:-2] + (3,))
    d[..., 2] = np.linalg.det(u.data @ np.swapaxes(v.data, -1, -2))
    p = matmul(mul(u, d[..., None, :]), transpose(v))
    return p, m - p


def relative_transform(theta, theta_hat):
    """``theta^-1 @ theta_hat``; ``theta`` is a constant."""
    th = theta.matrix if isinstance(theta, HomographyParams) else np.asarray(
        theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    dets = np.linalg.det(th)
    if np.any(np.abs(dets) <= DET_EPS):
        raise SingularityError("reference transform theta is singular")
    return matmul(Tensor(np.linalg.inv(th)), _matrix(theta_hat))


def geodesic_distance(theta, theta_hat, cfg: DistanceConfig = DistanceConfig()):
    m = relative_transform(theta, theta_hat)
    p, r = so3_project(m)
    cos = (trace(p) - 1.0) * 0.5
    return arccos(cos, eps=cfg.arccos_eps) + trace(matmul(transpose(r), r)) * cfg.lam


def distance(theta_hat, cfg: DistanceConfig = DistanceConfig(), theta=None):
    """Distance per ``cfg.mode``; ``theta`` defaults to the identity (inference)."""
    if cfg.mode is DistanceMode.EUCLIDEAN:
        if theta is None:
            return euclidean_distance(theta_hat)
        return frobenius_norm(_matrix(theta_hat) - _matrix(theta).data)
    return geodesic_distance(np.eye(3) if theta is None else theta, theta_hat, cfg)
