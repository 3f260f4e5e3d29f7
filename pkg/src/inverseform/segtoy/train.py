"""Joint training of the segmentation model on xe + beta * bxe + gamma * if."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..distance import DistanceConfig
from ..errors import ContractError, DivergenceError, EmptyDatasetError
from ..fileio import atomic_write_text
from ..itn import ItnModel
from ..loss import LossWeights, balanced_boundary_xe, inverseform_loss, pixel_cross_entropy, total_loss
from ..metrics import ConfusionMatrix, mba, miou, pixel_accuracy
from ..numcore.optim import SgdMomentum, clip_grad_norm
from ..numcore.tensor import Tensor, no_grad
from ..parallel import ordered_map
from ..rng import stream
from .model import SegModel, seg_forward, seg_infer
from .shapes import stack_dataset

DECOMPOSITION_TOL = 1e-12


@dataclass
class SegTrainConfig:
    epochs: int = 3
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    tile_size: int = 32
    min_boundary_fraction: float = 0.02
    eval_batch: int = 25
    normalize: bool = True
    grad_clip: float = 1.0       # global gradient-norm cap; 0 disables

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch < 1:
            raise ContractError("epochs must be >= 0 and batch sizes >= 1")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ContractError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (math.isfinite(self.grad_clip) and self.grad_clip >= 0):
            raise ContractError(f"grad_clip must be finite and >= 0, got {self.grad_clip}")


def predict_labels(model: SegModel, images, eval_batch=25, threads=1):
    """Argmax class maps (N, H, W) through the inference path."""
    images = np.asarray(images)
    chunks = [images[i:i + eval_batch] for i in range(0, len(images), eval_batch)]

    def run(chunk):
        with no_grad():
            return np.argmax(seg_infer(model, chunk).data, axis=1)

    if not chunks:
        return np.zeros((0, model.height, model.width), dtype=np.int64)
    return np.concatenate(ordered_map(run, chunks, threads))


def evaluate(model: SegModel, samples, eval_batch=25, threads=1):
    """Validation mIoU, pixel accuracy and mean mBA."""
    images, labels, _ = stack_dataset(samples)
    if len(images) == 0:
        raise EmptyDatasetError("validation set is empty")
    pred = predict_labels(model, images, eval_batch, threads)
    cm = ConfusionMatrix.from_labels(pred, labels, model.num_classes)
    mbas = ordered_map(lambda i: mba(pred[i], labels[i]), range(len(pred)), threads)
    return {"val_miou": miou(cm), "val_pixel_acc": pixel_accuracy(cm), "val_mba": float(np.mean(mbas))}


def train_seg(model: SegModel, train, val, itn: ItnModel, weights: LossWeights = LossWeights(),
              dist: DistanceConfig = DistanceConfig(), cfg: SegTrainConfig = SegTrainConfig(),
              threads=1, log=None):
    """Minimizes the joint loss with SGD + momentum; returns (model, history).

    ``history`` holds one record per epoch with mean train loss and its
    components plus validation metrics. The IF term is always computed so
    gamma = 0 runs report it too, but then without a gradient tape.
    """
    cfg.validate()
    if not itn.frozen:
        raise ContractError("train_seg requires a frozen ITN")
    images, labels, bounds = stack_dataset(train)
    if len(images) == 0:
        raise EmptyDatasetError("training set is empty")
    params = model.parameters()
    opt = SgdMomentum(cfg.learning_rate, cfg.momentum)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, f"seg-shuffle-epoch-{epoch}").permutation(len(images))
        sums = {"train_loss": 0.0, "xe": 0.0, "bxe": 0.0, "if": 0.0}
        steps = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits, b = seg_forward(model, images[idx])
            xe = pixel_cross_entropy(logits, labels[idx])
            bxe = balanced_boundary_xe(b, bounds[idx])
            if weights.gamma > 0:
                if_l = inverseform_loss(b, bounds[idx], itn, dist, cfg.tile_size, cfg.min_boundary_fraction,
                                       normalize=cfg.normalize)
            else:
                with no_grad():
                    if_l = inverseform_loss(b.data, bounds[idx], itn, dist, cfg.tile_size,
                                            cfg.min_boundary_fraction, normalize=cfg.normalize)
            parts = {"xe": xe.item(), "bxe": bxe.item(), "if": as_float(if_l)}
            try:
                total = total_loss(xe, bxe, if_l, weights)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), epoch=epoch, step=step, components=parts) from None
            value = total.item()
            expect = parts["xe"] + weights.beta * parts["bxe"] + weights.gamma * parts["if"]
            if not math.isfinite(value) or abs(value - expect) > DECOMPOSITION_TOL * max(1.0, abs(expect)):
                raise DivergenceError("total loss does not decompose into its components",
                                      epoch=epoch, step=step, components=parts)
            model.zero_grad()
            total.backward()
            # plain SGD at this lr has occasional gradient bursts that undo an epoch's progress
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(params)
            bad = [f"param {i}" for i, p in enumerate(params) if not np.isfinite(p.data).all()]
            if bad:
                raise DivergenceError("parameters became non-finite", epoch=epoch, step=step,
                                      components=parts)
            sums["train_loss"] += value
            for k, v in parts.items():
                sums[k] += v
            steps += 1
        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if val:
            record.update(evaluate(model, val, cfg.eval_batch, threads))
        history.append(record)
        if log is not None:
            log(record)
    return model, history


def as_float(x):
    return x.item() if isinstance(x, Tensor) else float(x)


def dump_metrics_jsonl(history, path):
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))


def load_metrics_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
