"""Inverse-transformation network (ITN).

A dense network reads two boundary tiles and regresses the transform that
maps the first onto the second. The output layer starts at zero and its
output is added to the identity parameter vector, so an untrained network
predicts exactly the identity.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .boundary import DEFAULT_TILE, MIN_BOUNDARY_FRACTION, _values, informative_mask, split_tiles
from .distance import DistanceConfig, DistanceMode, distance
from .errors import ContractError, DimensionError, DivergenceError, EmptyDatasetError, FormatError
from .fileio import atomic_write_bytes, atomic_write_json
from .homography import (
    Mode,
    TransformRanges,
    identity_vector,
    sample_transform,
    stn_warp,
    to_vector,
    vector_to_matrix_tensor,
)
from .numcore.tensor import Tensor, as_tensor, concat, matmul, mean, relu, reshape, square, tsum
from .numcore.optim import SgdMomentum
from .numcore.tensorio import decode_tensor, encode_tensor
from .rng import stream

log = logging.getLogger(__name__)

HIDDEN = 256
CKPT_MAGIC = b"IFCK"
CKPT_VERSION = 1
_MODE_CODE = {Mode.AFFINE6: 0, Mode.HOMOGRAPHY8: 1}
_DIST_CODE = {DistanceMode.EUCLIDEAN: 0, DistanceMode.GEODESIC: 1}


@dataclass(eq=False)
class ItnModel:
    tile_size: int
    mode: Mode
    params: list                       # [W1, b1, W2, b2, W3, b3] as Tensors
    frozen: bool = False
    distance_mode: DistanceMode = DistanceMode.EUCLIDEAN

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.distance_mode = DistanceMode(self.distance_mode)
        k = self.params[-1].shape[-1]
        if k != self.mode.num_params:
            raise ContractError(f"output width {k} does not match mode {self.mode.value}")
        if self.params[0].shape[0] != 2 * self.tile_size ** 2:
            raise ContractError(
                f"input width {self.params[0].shape[0]} does not match tile_size {self.tile_size}")
        for p in self.params:
            p.requires_grad = not self.frozen
            p.grad = None if self.frozen else np.zeros_like(p.data)

    @property
    def layers(self):
        return [(self.params[i].data, self.params[i + 1].data) for i in range(0, len(self.params), 2)]

    @property
    def num_params(self):
        return sum(p.size for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def init_itn(tile_size=DEFAULT_TILE, mode=Mode.AFFINE6, hidden=HIDDEN, seed=0,
             distance_mode=DistanceMode.EUCLIDEAN):
    """He-initialised hidden layers, zero output layer."""
    mode = Mode(mode)
    rng = stream(seed, "itn-init")
    widths = [2 * tile_size * tile_size, hidden, hidden]
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        params.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))))
        params.append(Tensor(np.zeros(fan_out)))
    params.append(Tensor(np.zeros((hidden, mode.num_params))))
    params.append(Tensor(np.zeros(mode.num_params)))
    return ItnModel(tile_size, mode, params, False, distance_mode)


def freeze(model: ItnModel) -> ItnModel:
    """A frozen copy: parameters are constants, gradients still reach the inputs."""
    params = [Tensor(p.data.copy()) for p in model.params]
    return ItnModel(model.tile_size, model.mode, params, True, model.distance_mode)


def itn_forward(model: ItnModel, a, b):
    """Predicted parameter vector(s) for tiles ``a`` -> ``b``: (K,) or (B, K)."""
    a, b = as_tensor(a), as_tensor(b)
    T = model.tile_size
    if a.shape[-2:] != (T, T) or b.shape != a.shape:
        raise DimensionError(f"tiles {a.shape} and {b.shape} do not match tile_size {T}")
    single = a.ndim == 2
    n = 1 if single else a.shape[0]
    x = concat([reshape(a, (n, T * T)), reshape(b, (n, T * T))], axis=1)
    w1, b1, w2, b2, w3, b3 = model.params
    h = relu(matmul(x, w1) + b1)
    h = relu(matmul(h, w2) + b2)
    out = matmul(h, w3) + b3 + identity_vector(model.mode)
    return reshape(out, (model.mode.num_params,)) if single else out


def predicted_matrices(model, a, b):
    return vector_to_matrix_tensor(itn_forward(model, a, b))


# -- pair dataset -------------------------------------------------------

@dataclass(eq=False)
class TilePairBatch:
    sources: np.ndarray        # (B, T, T)
    warped: np.ndarray         # (B, T, T)
    targets: np.ndarray        # (B, K)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sources)
        if len(self.warped) != n or len(self.targets) != n:
            raise ContractError("sources, warped and targets must share the batch dimension")

    def __len__(self):
        return len(self.sources)

    def subset(self, index):
        return TilePairBatch(self.sources[index], self.warped[index], self.targets[index], self.meta)

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])


def informative_tiles(boundary_maps, tile_size=DEFAULT_TILE,
                      min_boundary_fraction=MIN_BOUNDARY_FRACTION):
    """All informative tiles of all maps, in map order then row-major tile order.

    Returns (tiles (N, T, T), source map index (N,)).
    """
    tiles, owner = [], []
    for i, m in enumerate(boundary_maps):
        t = split_tiles(_values(m), tile_size)
        keep = informative_mask(t, min_boundary_fraction)
        tiles.append(t[keep])
        owner.append(np.full(int(keep.sum()), i))
    if not tiles:
        return np.zeros((0, tile_size, tile_size)), np.zeros(0, dtype=np.int64)
    return np.concatenate(tiles), np.concatenate(owner)


def warp_batch(tiles, matrices, chunk=2048):
    out = np.empty_like(tiles)
    for s in range(0, len(tiles), chunk):
        out[s:s + chunk] = stn_warp(tiles[s:s + chunk], matrices[s:s + chunk]).data
    return out


def make_pair_dataset(boundary_maps, ranges=TransformRanges(), tile_size=DEFAULT_TILE,
                      min_boundary_fraction=MIN_BOUNDARY_FRACTION, seed=0,
                      mode=Mode.AFFINE6, pairs_per_tile=1) -> TilePairBatch:
    """(x, stn_warp(x, theta), to_vector(theta)) for every informative tile x."""
    if not boundary_maps:
        raise ContractError("make_pair_dataset needs at least one boundary map")
    mode = Mode(mode)
    tiles, owner = informative_tiles(boundary_maps, tile_size, min_boundary_fraction)
    if len(tiles) == 0:
        raise EmptyDatasetError("no informative tiles in the given boundary maps")
    if pairs_per_tile > 1:
        tiles = np.repeat(tiles, pairs_per_tile, axis=0)
        owner = np.repeat(owner, pairs_per_tile)
    rng = stream(seed, "pair-transforms")
    transforms = [sample_transform(ranges, rng, mode) for _ in range(len(tiles))]
    matrices = np.stack([t.matrix for t in transforms])
    targets = np.stack([to_vector(t) for t in transforms])
    warped = warp_batch(tiles, matrices)
    meta = {"tile_size": tile_size, "mode": mode.value, "owner": owner}
    return TilePairBatch(tiles, warped, targets, meta)


class PairStream:
    """Informative source tiles with a fresh transform per tile every epoch.

    Sources are kept as uint8 (they are binary); each batch is warped on
    demand, so memory stays at one byte per source pixel.
    """

    def __init__(self, tiles, ranges=TransformRanges(), mode=Mode.AFFINE6, seed=0):
        tiles = np.asarray(tiles)
        if len(tiles) == 0:
            raise EmptyDatasetError("no informative tiles in the given boundary maps")
        if not np.all((tiles == 0) | (tiles == 1)):
            raise ContractError("PairStream sources must be binary tiles")
        self.tiles = tiles.astype(np.uint8)
        self.ranges = ranges
        self.mode = Mode(mode)
        self.seed = seed

    def __len__(self):
        return len(self.tiles)

    def epoch_batches(self, epoch, batch_size, rng=None):
        trng = stream(self.seed, f"pair-transforms-epoch-{epoch}")
        transforms = [sample_transform(self.ranges, trng, self.mode) for _ in range(len(self))]
        matrices = np.stack([t.matrix for t in transforms])
        targets = np.stack([to_vector(t) for t in transforms])
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            src = self.tiles[idx].astype(np.float64)
            yield TilePairBatch(src, warp_batch(src, matrices[idx]), targets[idx])


def make_pair_stream(boundary_maps, ranges=TransformRanges(), tile_size=DEFAULT_TILE,
                     min_boundary_fraction=MIN_BOUNDARY_FRACTION, seed=0, mode=Mode.AFFINE6):
    if not boundary_maps:
        raise ContractError("make_pair_stream needs at least one boundary map")
    tiles, _ = informative_tiles(boundary_maps, tile_size, min_boundary_fraction)
    return PairStream(tiles, ranges, mode, seed)


# -- training -----------------------------------------------------------

def itn_objective(pred, targets, distance_mode=DistanceMode.EUCLIDEAN, cfg=None):
    """Mean training loss over a batch of predicted vectors ``pred`` (B, K)."""
    targets = np.asarray(targets, dtype=np.float64)
    if DistanceMode(distance_mode) is DistanceMode.EUCLIDEAN:
        return mean(tsum(square(pred - targets), axis=1))
    cfg = cfg or DistanceConfig(DistanceMode.GEODESIC)
    theta = vector_to_matrix_tensor(Tensor(targets)).data
    return mean(distance(vector_to_matrix_tensor(pred), cfg, theta=theta))


def predict(model, a, b, batch_size=1024):
    """Forward without building a tape, in chunks."""
    frozen = model if model.frozen else freeze(model)
    out = [itn_forward(frozen, a[s:s + batch_size], b[s:s + batch_size]).data
           for s in range(0, len(a), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.mode.num_params))


def parameter_mse(model, data: TilePairBatch):
    """Mean over samples and parameters of the squared parameter error."""
    pred = predict(model, data.sources, data.warped)
    return float(np.mean((pred - data.targets) ** 2))


def identity_baseline_mse(data: TilePairBatch):
    ident = identity_vector(Mode.from_params(data.targets.shape[1]))
    return float(np.mean((data.targets - ident) ** 2))


def train_itn(model: ItnModel, dataset, epochs=20, batch_size=64,
              learning_rate=0.01, seed=0, holdout: TilePairBatch = None, momentum=0.9,
              cfg: DistanceConfig = None):
    """Train in place with SGD + momentum; returns (model, loss curve dict).

    ``dataset`` is a fixed :class:`TilePairBatch` or a :class:`PairStream`
    that draws new transforms every epoch.
    """
    if model.frozen:
        raise ContractError("cannot train a frozen ITN")
    if len(dataset) == 0:
        raise EmptyDatasetError("empty pair dataset")
    rng = stream(seed, "itn-shuffle")
    opt = SgdMomentum(learning_rate, momentum)
    curve = {"epoch": [], "train_loss": [], "holdout_mse": []}
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        if isinstance(dataset, PairStream):
            batches = dataset.epoch_batches(epoch, batch_size, rng)
        else:
            batches = dataset.batches(batch_size, rng)
        for step, batch in enumerate(batches):
            pred = itn_forward(model, batch.sources, batch.warped)
            loss = itn_objective(pred, batch.targets, model.distance_mode, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"ITN loss is {value} at epoch {epoch}, step {step}",
                                      epoch=epoch, step=step)
            model.zero_grad()
            loss.backward()
            opt.step(model.params)
            total += value * len(batch)
            count += len(batch)
        curve["epoch"].append(epoch)
        curve["train_loss"].append(total / count)
        curve["holdout_mse"].append(parameter_mse(model, holdout) if holdout is not None else None)
        log.info("itn epoch %d train_loss %.6f holdout_mse %s", epoch, curve["train_loss"][-1],
                 curve["holdout_mse"][-1])
    return model, curve


def save_curve(path, curve):
    atomic_write_json(path, curve)


# -- checkpoints --------------------------------------------------------

def encode_checkpoint(model: ItnModel) -> bytes:
    head = CKPT_MAGIC + struct.pack("<BBHBB", CKPT_VERSION, _MODE_CODE[model.mode],
                                    model.tile_size, _DIST_CODE[model.distance_mode],
                                    int(model.frozen))
    return head + b"".join(encode_tensor(p.data) for p in model.params)


def decode_checkpoint(buf, tile_size=None) -> ItnModel:
    if len(buf) < 10:
        raise FormatError("truncated IFCK header", len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad IFCK magic", 0)
    version, mode_code, ts, dist_code, frozen = struct.unpack_from("<BBHBB", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported IFCK version {version}", 4)
    modes = {v: k for k, v in _MODE_CODE.items()}
    dists = {v: k for k, v in _DIST_CODE.items()}
    if mode_code not in modes:
        raise FormatError(f"unknown mode code {mode_code}", 5)
    if dist_code not in dists:
        raise FormatError(f"unknown distance mode code {dist_code}", 8)
    if frozen not in (0, 1):
        raise FormatError(f"bad frozen flag {frozen}", 9)
    if tile_size is not None and ts != tile_size:
        raise FormatError(f"checkpoint tile_size {ts} does not match expected {tile_size}", 6)
    offset, arrays = 10, []
    while offset < len(buf):
        arr, offset = decode_tensor(buf, offset)
        arrays.append(arr)
    if len(arrays) != 6:
        raise FormatError(f"expected 6 parameter tensors, found {len(arrays)}", offset)
    if arrays[0].shape[0] != 2 * ts * ts:
        raise FormatError(f"first layer width {arrays[0].shape[0]} does not match tile_size {ts}", 10)
    try:
        return ItnModel(ts, modes[mode_code], [Tensor(a) for a in arrays], bool(frozen),
                        dists[dist_code])
    except ContractError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}", 10) from None


def save_checkpoint(model: ItnModel, path):
    atomic_write_bytes(path, encode_checkpoint(model))


def load_checkpoint(path, tile_size=None) -> ItnModel:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), tile_size)


def curve_to_json(curve):
    return json.dumps(curve, sort_keys=True)
