"""Transformation sweeps comparing boundary distance measures.

For each magnitude every pool tile ``x`` is warped to ``t(x)`` and four
measures are recorded: balanced XE, negative normalized cross-correlation,
symmetric Hausdorff distance and the per-tile InverseForm distance.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .boundary import DEFAULT_TILE, MIN_BOUNDARY_FRACTION
from .distance import DistanceConfig, distance
from .errors import ContractError, EmptyDatasetError
from .fileio import atomic_write_text
from .homography import pixel_shift, vector_to_matrix_tensor
from .itn import ItnModel, informative_tiles, itn_forward, warp_batch
from .loss import balanced_boundary_xe
from .numcore.tensor import no_grad
from .parallel import ordered_map
from .rng import stream

MEASURES = ("balanced_xe", "neg_ncc", "hausdorff", "inverseform")


class Axis(str, enum.Enum):
    TRANSLATION = "translation"   # pixels, random direction per tile
    ROTATION = "rotation"         # degrees about the tile centre
    SCALE = "scale"               # relative change, factor 1 + m


@dataclass(frozen=True)
class SweepSpec:
    axis: Axis = Axis.TRANSLATION
    magnitudes: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 6.0)
    num_tiles: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "axis", Axis(self.axis))
        m = tuple(float(x) for x in self.magnitudes)
        object.__setattr__(self, "magnitudes", m)
        if not m or m[0] != 0.0:
            raise ContractError("magnitudes must start at 0")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ContractError(f"magnitudes must be strictly increasing, got {m}")
        if self.num_tiles < 1:
            raise ContractError(f"num_tiles must be >= 1, got {self.num_tiles}")


def hausdorff_boundary(a, b):
    """Symmetric Hausdorff distance in pixels between the boundary pixel sets."""
    pa = np.argwhere(np.asarray(getattr(a, "values", a)) > 0.5).astype(np.float64)
    pb = np.argwhere(np.asarray(getattr(b, "values", b)) > 0.5).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("Hausdorff distance needs at least one boundary pixel in each map")
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def neg_ncc(a, b):
    """Negative normalized cross-correlation; 0 when either tile is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return 0.0 if den == 0 else -float(a @ b) / den


def if_distances(itn: ItnModel, pred, gt, cfg: DistanceConfig = DistanceConfig()):
    """Per-tile InverseForm distance for (N, T, T) stacks, called as itn(gt, pred)."""
    with no_grad():
        theta = itn_forward(itn, np.asarray(gt), np.asarray(pred))
        return np.atleast_1d(distance(vector_to_matrix_tensor(theta), cfg).data).astype(np.float64)


def _transforms(spec: SweepSpec, magnitude, n, tile_size, mode):
    rng = stream(spec.seed, f"sweep-{spec.axis.value}-{magnitude!r}")
    out = np.empty((n, 3, 3))
    for i in range(n):
        if spec.axis is Axis.TRANSLATION:
            phi = rng.uniform(0.0, 2 * np.pi)
            m = pixel_shift(magnitude * np.cos(phi), magnitude * np.sin(phi), tile_size, mode).matrix
        elif spec.axis is Axis.ROTATION:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            a = math.radians(sign * magnitude)
            m = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0, 0, 1.0]])
        else:
            m = np.diag([1.0 + magnitude, 1.0 + magnitude, 1.0])
        out[i] = m
    return out


def tile_pool(maps, tile_size=DEFAULT_TILE, min_boundary_fraction=MIN_BOUNDARY_FRACTION,
              num_tiles=None, seed=0):
    """Informative tiles (N, T, T) and their owning map index, subsampled to ``num_tiles``."""
    tiles, owner = informative_tiles(maps, tile_size, min_boundary_fraction)
    if len(tiles) == 0:
        raise EmptyDatasetError("no informative tiles in the supplied maps")
    if num_tiles is not None and num_tiles < len(tiles):
        pick = np.sort(stream(seed, "tile-pool").choice(len(tiles), num_tiles, replace=False))
        tiles, owner = tiles[pick], owner[pick]
    return tiles, owner


def _measure_rows(x, w, itn, cfg, threads):
    xe = np.array(ordered_map(lambda i: balanced_boundary_xe(w[i], x[i]).item(), range(len(x)), threads))
    ncc = np.array([neg_ncc(x[i], w[i]) for i in range(len(x))])
    haus = []
    for i in range(len(x)):
        try:
            haus.append(hausdorff_boundary(x[i], w[i]))
        except ContractError:
            pass                                 # warped tile lost every boundary pixel
    inv = if_distances(itn, w, x, cfg)
    return {"balanced_xe": xe, "neg_ncc": ncc, "hausdorff": np.array(haus), "inverseform": inv}


def run_sweep(spec: SweepSpec, maps, itn: ItnModel, cfg: DistanceConfig = DistanceConfig(),
              min_boundary_fraction=MIN_BOUNDARY_FRACTION, threads=1):
    """Rows of {magnitude, measure, mean, stddev, n}, magnitude-major, measures in MEASURES order."""
    T = itn.tile_size
    tiles, _ = tile_pool(maps, T, min_boundary_fraction, spec.num_tiles, spec.seed)
    rows = []
    for m in spec.magnitudes:
        mats = _transforms(spec, m, len(tiles), T, itn.mode)
        warped = warp_batch(tiles, mats)
        values = _measure_rows(tiles, warped, itn, cfg, threads)
        for name in MEASURES:
            v = values[name]
            rows.append({"magnitude": m, "measure": name,
                         "mean": float(v.mean()) if len(v) else float("nan"),
                         "stddev": float(v.std()) if len(v) else float("nan"), "n": int(len(v))})
    return rows


def fig2_reconstruction(maps, itn: ItnModel, cfg: DistanceConfig = DistanceConfig(), shift_px=3,
                        num_tiles=500, seed=0, min_boundary_fraction=MIN_BOUNDARY_FRACTION):
    """Mild shift versus unrelated tile, scored by balanced XE and by the ITN.

    For every pool tile ``x``: ``t(x)`` is ``x`` shifted by ``shift_px`` pixels
    along both axes and ``u`` is an informative tile from a different map.
    Returns the fraction of tiles where the InverseForm distance ranks
    ``t(x)`` closer than ``u`` and the fraction where XE ranks it farther.
    """
    T = itn.tile_size
    all_tiles, all_owner = informative_tiles(maps, T, min_boundary_fraction)
    tiles, owner = tile_pool(maps, T, min_boundary_fraction, num_tiles, seed)
    if len(np.unique(all_owner)) < 2:
        raise EmptyDatasetError("need informative tiles from at least two maps")
    rng = stream(seed, "fig2-unrelated")
    unrelated = np.empty_like(tiles)
    for i in range(len(tiles)):
        others = np.flatnonzero(all_owner != owner[i])
        unrelated[i] = all_tiles[others[rng.integers(len(others))]]
    shift = np.broadcast_to(pixel_shift(shift_px, shift_px, T, itn.mode).matrix, (len(tiles), 3, 3))
    shifted = warp_batch(tiles, np.ascontiguousarray(shift))
    d_shift = if_distances(itn, shifted, tiles, cfg)
    d_unrel = if_distances(itn, unrelated, tiles, cfg)
    d_self = if_distances(itn, tiles, tiles, cfg)
    xe_shift = np.array([balanced_boundary_xe(shifted[i], tiles[i]).item() for i in range(len(tiles))])
    xe_unrel = np.array([balanced_boundary_xe(unrelated[i], tiles[i]).item() for i in range(len(tiles))])
    return {
        "n": int(len(tiles)),
        "if_orders_correctly": float(np.mean(d_shift < d_unrel)),
        "xe_inverts": float(np.mean(xe_shift > xe_unrel)),
        "if_full_chain": float(np.mean((d_self < d_shift) & (d_shift < d_unrel))),
        "mean_if": {"self": float(d_self.mean()), "shift": float(d_shift.mean()),
                    "unrelated": float(d_unrel.mean())},
        "mean_xe": {"shift": float(xe_shift.mean()), "unrelated": float(xe_unrel.mean())},
    }


# -- outputs ------------------------------------------------------------

def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["magnitude", "measure", "mean", "stddev", "n"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"magnitude": repr(r["magnitude"]), "measure": r["measure"],
                    "mean": repr(r["mean"]), "stddev": repr(r["stddev"]), "n": r["n"]})
    return buf.getvalue()


def read_csv(text):
    return [{"magnitude": float(r["magnitude"]), "measure": r["measure"], "mean": float(r["mean"]),
             "stddev": float(r["stddev"]), "n": int(r["n"])} for r in csv.DictReader(io.StringIO(text))]


_COLORS = {"balanced_xe": "#d62728", "neg_ncc": "#2ca02c", "hausdorff": "#9467bd", "inverseform": "#1f77b4"}


def rows_to_svg(rows, title="distance sweep", width=640, height=400) -> str:
    """Line plot of each measure's mean, min-max normalized per measure."""
    left, right, top, bottom = 60, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom
    mags = sorted({r["magnitude"] for r in rows})
    lo, hi = mags[0], mags[-1] if mags[-1] > mags[0] else mags[0] + 1.0

    def sx(m):
        return left + (m - lo) / (hi - lo) * pw

    def sy(v):
        return top + (1.0 - v) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{left}" y="24" font-size="14">{title}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for m in mags:
        parts.append(f'<text x="{sx(m):.1f}" y="{top + ph + 16}" text-anchor="middle">{m:g}</text>')
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">magnitude</text>')
    measures = [m for m in MEASURES if any(r["measure"] == m for r in rows)]
    for k, name in enumerate(measures):
        pts = sorted((r["magnitude"], r["mean"]) for r in rows
                     if r["measure"] == name and math.isfinite(r["mean"]))
        if not pts:
            continue
        vals = [v for _, v in pts]
        vmin, vmax = min(vals), max(vals)
        span = vmax - vmin if vmax > vmin else 1.0
        color = _COLORS.get(name, "black")
        coords = " ".join(f"{sx(m):.1f},{sy((v - vmin) / span):.1f}" for m, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 16 * k + 8
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_sweep(rows, csv_path, svg_path=None, title="distance sweep"):
    atomic_write_text(csv_path, rows_to_csv(rows))
    if svg_path:
        atomic_write_text(svg_path, rows_to_svg(rows, title))
