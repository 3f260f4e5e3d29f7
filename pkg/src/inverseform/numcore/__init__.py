"""Tensor arithmetic with reverse-mode autodiff, plus a 3x3 SVD."""

from .gradcheck import gradcheck, numeric_grad, relative_error
from .optim import SgdMomentum, clip_grad_norm
from .svd import Svd3Result, SvdStats, svd3, svd3_backward, svd3_tensor
from .tensor import (
    ARCCOS_EPS,
    Tensor,
    add,
    arccos,
    as_tensor,
    clamp,
    concat,
    conv2d,
    conv_transpose2x2,
    div,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    permute,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    sub,
    trace,
    transpose,
    tsum,
)
from .tensorio import decode_tensor, encode_tensor, load_tensor, save_tensor

tensor_sum = tsum
