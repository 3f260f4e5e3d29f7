"""Loss terms of the boundary-aware objective.

``total = xe + beta * bxe + gamma * if_loss`` where ``xe`` is pixel
cross-entropy on the segmentation logits, ``bxe`` is class-balanced binary
cross-entropy on the boundary head and ``if_loss`` is the tiled InverseForm
loss computed through a frozen ITN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boundary import DEFAULT_TILE, MIN_BOUNDARY_FRACTION, informative_mask, split_tiles
from .distance import DistanceConfig, distance
from .errors import ContractError, DimensionError, DivergenceError
from .homography import vector_to_matrix_tensor
from .itn import ItnModel, itn_forward
from .numcore.tensor import Tensor, as_tensor, clamp, getitem, log, log_softmax, mean, mul, reshape, tsum

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"{name} must be finite and >= 0, got {v}")


def pixel_cross_entropy(logits, labels):
    """Mean over pixels of -log softmax(logits)[label].

    logits: (C, H, W) or (B, C, H, W); labels: matching (H, W) or (B, H, W).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    axis = logits.ndim - 3
    C = logits.shape[axis]
    if labels.shape != logits.shape[:axis] + logits.shape[axis + 1:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.moveaxis(np.eye(C)[labels], -1, axis)
    return -tsum(mul(log_softmax(logits, axis=axis), onehot)) * (1.0 / labels.size)


def _balanced_weights(gt):
    """(w_pos, w_neg) per image: complementary class frequencies."""
    n = gt.shape[-1] * gt.shape[-2]
    pos = gt.sum(axis=(-2, -1))
    neg = n - pos
    w_pos = np.where(pos == 0, 0.0, np.where(neg == 0, 1.0, neg / n))
    w_neg = np.where(pos == 0, 1.0, np.where(neg == 0, 0.0, pos / n))
    return w_pos, w_neg


def balanced_boundary_xe(pred, gt):
    """Class-balanced binary cross-entropy, (H, W) or batched (B, H, W).

    Weights are computed per image: positives are weighted by the negative
    fraction and vice versa. A map without positives reduces to the plain
    negative log-likelihood of the background.
    """
    pred = as_tensor(pred.values if hasattr(pred, "values") else pred)
    gt = np.asarray(gt.values if hasattr(gt, "values") else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    w_pos, w_neg = _balanced_weights(gt)
    w_pos = np.asarray(w_pos)[..., None, None]
    w_neg = np.asarray(w_neg)[..., None, None]
    p = clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    term = mul(log(p), w_pos * gt) + mul(log(1.0 - p), w_neg * (1.0 - gt))
    return -mean(term)


def _tile_weights(mask, normalize):
    """Per-tile reduction weights: 1/n_i per informative tile of image i (or 1)."""
    counts = mask.sum(axis=-1, keepdims=True)
    if normalize:
        w = np.where(mask, 1.0 / np.maximum(counts, 1), 0.0)
    else:
        w = mask.astype(np.float64)
    return w / mask.shape[0] if mask.ndim == 2 else w


def inverseform_loss_detailed(pred, gt, model: ItnModel, cfg: DistanceConfig = DistanceConfig(),
                              tile_size=DEFAULT_TILE, min_boundary_fraction=MIN_BOUNDARY_FRACTION,
                              normalize=True):
    """Returns (loss tensor, informative tile count, skipped tile count).

    Tiles whose ground truth is not informative are skipped. With
    ``normalize`` the per-image sum is divided by the informative count;
    batched input averages the per-image values.
    """
    if not model.frozen:
        raise ContractError("inverseform_loss requires a frozen ITN")
    if tile_size != model.tile_size:
        raise ContractError(f"tile_size {tile_size} differs from the ITN's {model.tile_size}")
    pred = as_tensor(pred.values if hasattr(pred, "values") else pred)
    gt = np.asarray(gt.values if hasattr(gt, "values") else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    gt_tiles = split_tiles(gt, tile_size)                     # (..., N, T, T)
    mask = informative_mask(gt_tiles, min_boundary_fraction)  # (..., N)
    used = int(mask.sum())
    skipped = int(mask.size - used)
    if used == 0:
        return Tensor(0.0), 0, skipped
    weights = _tile_weights(mask, normalize)[mask]
    pred_tiles = split_tiles(pred, tile_size)
    T = tile_size
    flat_pred = reshape(pred_tiles, (-1, T, T))
    idx = np.flatnonzero(mask.reshape(-1))
    # the ITN sees (source, warped) in training; here gt is the source and
    # the prediction plays the warped copy
    theta_hat = itn_forward(model, gt_tiles.reshape(-1, T, T)[idx], getitem(flat_pred, idx))
    d = distance(vector_to_matrix_tensor(theta_hat), cfg)
    return tsum(mul(d, weights)), used, skipped


def inverseform_loss(pred, gt, model, cfg=DistanceConfig(), tile_size=DEFAULT_TILE,
                     min_boundary_fraction=MIN_BOUNDARY_FRACTION, normalize=True):
    return inverseform_loss_detailed(pred, gt, model, cfg, tile_size, min_boundary_fraction,
                                     normalize)[0]


def total_loss(xe, bxe, if_loss, w: LossWeights = LossWeights()):
    """xe + beta * bxe + gamma * if_loss, refusing non-finite components."""
    parts = {"xe": xe, "bxe": bxe, "if": if_loss}
    values = {k: (v.item() if isinstance(v, Tensor) else float(v)) for k, v in parts.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss component(s): {', '.join(bad)}", components=values)
    return as_tensor(xe) + as_tensor(bxe) * w.beta + as_tensor(if_loss) * w.gamma
