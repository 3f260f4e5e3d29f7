"""Boundary extraction from label maps, tiling, and PGM/PPM image I/O."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .fileio import atomic_write_bytes
from .numcore.tensor import Tensor, as_tensor, concat, permute, reshape

DEFAULT_TILE = 32
MIN_BOUNDARY_FRACTION = 0.02

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T


class Kind(str, enum.Enum):
    BINARY = "binary"
    PROBABILITY = "probability"


@dataclass(frozen=True, eq=False)
class BoundaryMap:
    values: np.ndarray
    kind: Kind = Kind.BINARY

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"boundary map must be 2-D, got {v.shape}")
        if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
            raise ContractError("boundary values must lie in [0, 1]")
        kind = Kind(self.kind)
        if kind is Kind.BINARY and not np.all((v == 0) | (v == 1)):
            raise ContractError("binary boundary map holds values other than 0 and 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", kind)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def __eq__(self, other):
        return (isinstance(other, BoundaryMap) and self.kind is other.kind
                and np.array_equal(self.values, other.values))


def _values(m):
    if isinstance(m, BoundaryMap):
        return m.values
    if isinstance(m, Tensor):
        return m.data
    return np.asarray(m, dtype=np.float64)


def sobel_response(labels):
    """Integer Sobel responses (gx, gy) of a label map with replicate padding."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DimensionError(f"label map must be 2-D, got {lab.shape}")
    p = np.pad(lab.astype(np.int64), 1, mode="edge")
    H, W = lab.shape
    gx = np.zeros((H, W), dtype=np.int64)
    gy = np.zeros((H, W), dtype=np.int64)
    for i in range(3):
        for j in range(3):
            win = p[i:i + H, j:j + W]
            if SOBEL_X[i, j]:
                gx += SOBEL_X[i, j] * win
            if SOBEL_Y[i, j]:
                gy += SOBEL_Y[i, j] * win
    return gx, gy


def sobel_boundary(labels) -> BoundaryMap:
    """Binary boundary map: 1 wherever the Sobel gradient magnitude is non-zero."""
    lab = np.asarray(labels)
    if np.issubdtype(lab.dtype, np.floating):
        if not np.array_equal(lab, np.round(lab)):
            raise ContractError("labels must be integers")
        lab = lab.astype(np.int64)
    if lab.size and lab.min() < 0:
        raise ContractError("labels must be non-negative")
    gx, gy = sobel_response(lab)
    return BoundaryMap(((gx != 0) | (gy != 0)).astype(np.float64), Kind.BINARY)


# -- tiling -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TileGrid:
    tile_size: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int
    tiles: np.ndarray          # (rows * cols, tile_size, tile_size), row-major tile order
    kind: Kind = Kind.BINARY

    @property
    def shape(self):
        return (self.rows * self.tile_size - self.pad_bottom,
                self.cols * self.tile_size - self.pad_right)

    def __len__(self):
        return self.rows * self.cols


def grid_dims(height, width, tile_size):
    rows = -(-height // tile_size)
    cols = -(-width // tile_size)
    return rows, cols, rows * tile_size - height, cols * tile_size - width


def split_tiles(x, tile_size):
    """Zero-pad bottom/right and cut (..., H, W) into (..., N, T, T).

    Works on arrays and, differentiably, on tensors.
    """
    t = as_tensor(x) if isinstance(x, Tensor) else None
    arr = t.data if t is not None else np.asarray(x, dtype=np.float64)
    *lead, H, W = arr.shape
    rows, cols, pb, pr = grid_dims(H, W, tile_size)
    lead = tuple(lead)
    if t is None:
        a = np.pad(arr, [(0, 0)] * len(lead) + [(0, pb), (0, pr)])
        a = a.reshape(lead + (rows, tile_size, cols, tile_size))
        a = np.moveaxis(a, -3, -2)
        return a.reshape(lead + (rows * cols, tile_size, tile_size)).copy()
    if pb:
        t = concat([t, Tensor(np.zeros(lead + (pb, W)))], axis=-2)
    if pr:
        t = concat([t, Tensor(np.zeros(lead + (H + pb, pr)))], axis=-1)
    n = len(lead)
    t = reshape(t, lead + (rows, tile_size, cols, tile_size))
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    t = permute(t, axes)
    return reshape(t, lead + (rows * cols, tile_size, tile_size))


def tile_split(m, tile_size=DEFAULT_TILE) -> TileGrid:
    if tile_size < 4:
        raise ContractError(f"tile_size must be >= 4, got {tile_size}")
    vals = _values(m)
    kind = m.kind if isinstance(m, BoundaryMap) else Kind.PROBABILITY
    rows, cols, pb, pr = grid_dims(*vals.shape, tile_size)
    return TileGrid(tile_size, rows, cols, pb, pr, split_tiles(vals, tile_size), kind)


def tile_reassemble(grid: TileGrid) -> BoundaryMap:
    T = grid.tile_size
    tiles = np.asarray(grid.tiles, dtype=np.float64)
    if tiles.shape != (grid.rows * grid.cols, T, T):
        raise ContractError(
            f"grid expects {grid.rows * grid.cols} tiles of {T}x{T}, holds {tiles.shape}")
    if not (0 <= grid.pad_bottom < T and 0 <= grid.pad_right < T):
        raise ContractError("padding must be smaller than the tile size")
    full = tiles.reshape(grid.rows, grid.cols, T, T).transpose(0, 2, 1, 3)
    full = full.reshape(grid.rows * T, grid.cols * T)
    H, W = grid.shape
    return BoundaryMap(full[:H, :W].copy(), grid.kind)


def boundary_fraction(tile):
    v = _values(tile)
    return float(np.count_nonzero(v > 0.5)) / v.size


def tile_is_informative(tile, min_boundary_fraction=MIN_BOUNDARY_FRACTION):
    return boundary_fraction(tile) >= min_boundary_fraction


def informative_mask(tiles, min_boundary_fraction=MIN_BOUNDARY_FRACTION):
    """Vectorised :func:`tile_is_informative` over (..., N, T, T)."""
    tiles = np.asarray(tiles)
    count = np.count_nonzero(tiles > 0.5, axis=(-2, -1))
    return count / (tiles.shape[-1] * tiles.shape[-2]) >= min_boundary_fraction


# -- PGM / PPM ----------------------------------------------------------

_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pnm(array) -> bytes:
    """Binary PGM (H, W) or PPM (H, W, 3) with maxval 255 from values in [0, 1]."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise DimensionError(f"PNM needs (H, W) or (H, W, 3), got {a.shape}")
    if np.any((a < 0) | (a > 1)):
        raise ContractError("PNM values must lie in [0, 1]")
    px = np.round(a * 255.0).astype(np.uint8)
    return b"%s\n%d %d\n255\n" % (magic, a.shape[1], a.shape[0]) + px.tobytes()


def decode_pnm(buf):
    m = _HEADER.match(buf)
    if not m:
        raise FormatError("not a binary PGM/PPM header", 0)
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", m.start(4))
    channels = 1 if magic == b"P5" else 3
    start = m.end()
    need = w * h * channels
    if len(buf) - start < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - start}", start)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return px.reshape(shape).astype(np.float64) / 255.0


def save_pnm(path, array):
    atomic_write_bytes(path, encode_pnm(array))


def load_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def save_boundary_pgm(path, m):
    save_pnm(path, _values(m))


def load_boundary_pgm(path, kind=Kind.BINARY) -> BoundaryMap:
    return BoundaryMap(load_pnm(path), kind)
