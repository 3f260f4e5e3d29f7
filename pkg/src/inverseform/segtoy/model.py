"""A small fully-convolutional segmentation network with an auxiliary boundary head.

Trunk: four 3x3 convolutions (the second and fourth with stride 2) followed
by two 2x2 transposed convolutions back to full resolution, with additive
skip connections. The trunk output ``f_pred`` feeds a 1x1 segmentation head
and a 1x1 sigmoid boundary head. The boundary head is used only in training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, FormatError
from ..fileio import atomic_write_bytes
from ..numcore.tensor import Tensor, as_tensor, concat, conv2d, conv_transpose2x2, permute, relu, reshape, sigmoid
from ..numcore.tensorio import decode_tensor, encode_tensor
from ..rng import stream

FEATURES = 32

# (name, kind, cin, cout, k, stride); "seg" and "bnd" are the heads
_TRUNK = (
    ("enc1", "conv", 3, FEATURES, 3, 1),
    ("enc2", "conv", FEATURES, FEATURES, 3, 2),
    ("enc3", "conv", FEATURES, FEATURES, 3, 1),
    ("enc4", "conv", FEATURES, FEATURES, 3, 2),
    ("dec1", "up", FEATURES, FEATURES, 2, 2),
    ("dec2", "up", FEATURES, FEATURES, 2, 2),
)


@dataclass(eq=False)
class SegModel:
    num_classes: int
    height: int
    width: int
    params: dict = field(default_factory=dict)    # name -> (weight Tensor, bias Tensor)
    concat_boundary: bool = False

    def parameters(self, include_boundary_head=True):
        out = []
        for name, (w, b) in self.params.items():
            if name == "bnd" and not include_boundary_head:
                continue
            out.extend((w, b))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self):
        return {name: (w.data, b.data) for name, (w, b) in self.params.items()}


def init_seg_model(num_classes=5, height=96, width=96, seed=0, concat_boundary=False):
    if height % 4 or width % 4:
        raise DimensionError(f"image size must be a multiple of 4, got {(height, width)}")
    rng = stream(seed, "seg-init")
    params = {}
    for name, kind, cin, cout, k, _ in _TRUNK:
        shape = (k, k, cin, cout)
        std = np.sqrt(2.0 / (cin * k * k))
        params[name] = (Tensor(rng.normal(0.0, std, shape), True), Tensor(np.zeros(cout), True))
    seg_in = FEATURES + (1 if concat_boundary else 0)
    params["seg"] = (Tensor(rng.normal(0.0, np.sqrt(1.0 / seg_in), (1, 1, seg_in, num_classes)), True),
                     Tensor(np.zeros(num_classes), True))
    params["bnd"] = (Tensor(rng.normal(0.0, np.sqrt(1.0 / FEATURES), (1, 1, FEATURES, 1)), True),
                     Tensor(np.full(1, -2.0), True))
    return SegModel(num_classes, height, width, params, concat_boundary)


def _check_image(model, image):
    x = as_tensor(image)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (3, model.height, model.width):
        raise DimensionError(
            f"expected images of shape (3, {model.height}, {model.width}), got {image.shape}")
    return permute(x, (0, 2, 3, 1))


def trunk(model: SegModel, x):
    p = model.params
    e1 = relu(conv2d(x, *p["enc1"], stride=1, padding=1))
    e2 = relu(conv2d(e1, *p["enc2"], stride=2, padding=1))
    e3 = relu(conv2d(e2, *p["enc3"], stride=1, padding=1))
    e4 = relu(conv2d(e3, *p["enc4"], stride=2, padding=1))
    d1 = relu(conv_transpose2x2(e4, *p["dec1"])) + e3
    d2 = relu(conv_transpose2x2(d1, *p["dec2"])) + e1
    return d2


def _boundary_head(model, f):
    return sigmoid(conv2d(f, *model.params["bnd"]))


def seg_forward(model: SegModel, image):
    """Returns (logits (B, C, H, W), boundary probabilities (B, H, W)).

    A single (3, H, W) image yields (C, H, W) and (H, W).
    """
    single = as_tensor(image).ndim == 3
    x = _check_image(model, image)
    f = trunk(model, x)
    b = _boundary_head(model, f)
    seg_in = concat([f, b], axis=3) if model.concat_boundary else f
    logits = permute(conv2d(seg_in, *model.params["seg"]), (0, 3, 1, 2))
    B = x.shape[0]
    b = reshape(b, (B, model.height, model.width))
    if single:
        return reshape(logits, logits.shape[1:]), reshape(b, b.shape[1:])
    return logits, b


def seg_infer(model: SegModel, image):
    """Segmentation logits with the boundary head removed."""
    single = as_tensor(image).ndim == 3
    x = _check_image(model, image)
    f = trunk(model, x)
    if model.concat_boundary:
        f = concat([f, _boundary_head(model, f)], axis=3)
    logits = permute(conv2d(f, *model.params["seg"]), (0, 3, 1, 2))
    return reshape(logits, logits.shape[1:]) if single else logits


def inference_cost(model: SegModel):
    """(parameter count, multiply-accumulates per image) of the inference path."""
    H, W = model.height, model.width
    params = macs = 0
    h, w = H, W
    for name, kind, cin, cout, k, stride in _TRUNK:
        params += cin * cout * k * k + cout
        if kind == "conv":
            h, w = (h + 2 - k) // stride + 1, (w + 2 - k) // stride + 1
            macs += h * w * cout * cin * k * k
        else:
            macs += h * w * cin * cout * k * k
            h, w = 2 * h, 2 * w
    if model.concat_boundary:
        params += FEATURES + 1
        macs += H * W * FEATURES
    seg_w = model.params["seg"][0]
    params += seg_w.size + model.num_classes
    macs += H * W * seg_w.size
    return params, macs


# -- checkpoints --------------------------------------------------------

SEG_MAGIC = b"IFSG"
SEG_VERSION = 1


def encode_seg_checkpoint(model: SegModel) -> bytes:
    header = json.dumps({"num_classes": model.num_classes, "height": model.height,
                         "width": model.width, "concat_boundary": model.concat_boundary,
                         "layers": list(model.params)}, sort_keys=True).encode()
    out = SEG_MAGIC + struct.pack("<BI", SEG_VERSION, len(header)) + header
    for w, b in model.params.values():
        out += encode_tensor(w.data) + encode_tensor(b.data)
    return out


def decode_seg_checkpoint(buf) -> SegModel:
    if buf[:4] != SEG_MAGIC:
        raise FormatError("bad IFSG magic", 0)
    if len(buf) < 9:
        raise FormatError("truncated IFSG header", len(buf))
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != SEG_VERSION:
        raise FormatError(f"unsupported IFSG version {version}", 4)
    try:
        header = json.loads(bytes(buf[9:9 + n]))
    except ValueError:
        raise FormatError("corrupt IFSG header", 9) from None
    offset = 9 + n
    params = {}
    for name in header["layers"]:
        w, offset = decode_tensor(buf, offset)
        b, offset = decode_tensor(buf, offset)
        params[name] = (Tensor(w, True), Tensor(b, True))
    if offset != len(buf):
        raise FormatError("trailing bytes after IFSG payload", offset)
    return SegModel(header["num_classes"], header["height"], header["width"], params,
                    header["concat_boundary"])


def save_seg_checkpoint(model, path):
    atomic_write_bytes(path, encode_seg_checkpoint(model))


def load_seg_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_seg_checkpoint(fh.read())
