"""Acceptance criteria 1-10, one test each.

Every test prints a single ``[acceptance NN] PASS/FAIL`` line with the
measured numbers, then asserts. The heavy ones share the session fixtures in
conftest.py (the default ITN run and the paired segmentation runs).
"""

import json
import shutil
import time

import numpy as np
import pytest

from inverseform.bench import fig2_reconstruction
from inverseform.boundary import load_boundary_pgm, save_boundary_pgm
from inverseform.cli import main
from inverseform.distance import DistanceConfig, DistanceMode, distance, geodesic_distance, so3_project
from inverseform.homography import (
    Mode, TransformRanges, identity_vector, rotation, sample_transform, stn_warp, to_vector, translation,
)
from inverseform.itn import decode_checkpoint, encode_checkpoint, freeze, init_itn, load_checkpoint, save_checkpoint
from inverseform.loss import balanced_boundary_xe, inverseform_loss, pixel_cross_entropy
from inverseform.numcore import (
    Tensor, arccos, concat, conv2d, conv_transpose2x2, decode_tensor, div, encode_tensor, exp, getitem, gradcheck,
    load_tensor, log, log_softmax, matmul, mean, mul, numeric_grad, permute, relative_error, relu, reshape,
    save_tensor, sigmoid, sqrt, square, sub, svd3, svd3_tensor, trace, transpose, tsum,
)
from inverseform.boundary import sobel_boundary
from inverseform.segtoy import (
    decode_seg_checkpoint, gen_shapes, inference_cost, init_seg_model, load_dataset, save_dataset, seg_forward,
)

from conftest import SEG_GAMMAS, SEG_SEEDS


# -- 1 ----------------------------------------------------------------------

def test_01_euclidean_formula(announce):
    at_identity = distance(np.eye(3)).item()
    shifted = distance(translation(0.1, 0.2)).item()
    err = abs(shifted - np.sqrt(0.05))
    ok = at_identity == 0.0 and err <= 1e-12
    announce(1, ok, f"d(I)={at_identity:g}  |d(T(0.1,0.2)) - sqrt(0.05)|={err:.2e} (tol 1e-12)")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_02_geodesic_formula(announce):
    cfg = DistanceConfig(DistanceMode.GEODESIC, lam=0.1)
    angles = np.deg2rad(np.arange(5, 175, 5))
    got = distance(np.stack([rotation(a).matrix for a in angles]), cfg).data
    worst = float(np.abs(got - angles).max())
    scaled = distance(np.diag([1.1, 1.0, 1.0]), cfg).item()
    ok = worst <= 5e-4 and abs(scaled - 0.001) <= 5e-4
    announce(2, ok, f"rotation sweep 5..170 deg max err {worst:.2e}; diag(1.1,1,1) -> {scaled:.6f} (tol 5e-4)")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_03_so3_projection(announce):
    m = np.random.default_rng(2024).normal(size=(10_000, 3, 3))
    start = time.perf_counter()
    p, _ = so3_project(m)
    res = svd3(m)
    seconds = time.perf_counter() - start
    p = p.data
    orth = float(np.abs(np.swapaxes(p, -1, -2) @ p - np.eye(3)).max())
    det = float(np.abs(np.linalg.det(p) - 1).max())
    recon = float(np.abs(res.reconstruct() - m).max())
    ok = orth <= 1e-8 and det <= 1e-8 and recon <= 1e-10 and seconds < 5
    announce(3, ok, f"|P^T P - I| {orth:.1e}  |det P - 1| {det:.1e}  recon {recon:.1e}  in {seconds:.2f}s")
    assert ok


# -- 4 ----------------------------------------------------------------------

def _probe(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def _weighted(op, probe):
    return lambda *ts: tsum(mul(op(*ts), probe))


def _primitive_cases():
    rng = np.random.default_rng(40)

    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, shape)

    away = u(3, 4)
    away = np.where(np.abs(away) < 0.1, 0.5, away)
    pos = u(3, 4, lo=0.2, hi=2.0)
    den = u(1, 4)
    den = np.where(np.abs(den) < 0.3, 0.7, den)
    return [
        ("relu", relu, [away]),
        ("sigmoid", sigmoid, [u(3, 4)]),
        ("log", log, [pos]),
        ("exp", exp, [u(3, 4)]),
        ("sqrt", sqrt, [pos]),
        ("square", square, [u(3, 4)]),
        ("arccos", arccos, [u(3, 4, lo=-0.9, hi=0.9)]),
        ("transpose", transpose, [u(2, 3, 4)]),
        ("permute", lambda x: permute(x, (2, 0, 1)), [u(2, 3, 4)]),
        ("reshape", lambda x: reshape(x, (4, 3)), [u(3, 4)]),
        ("mean", lambda x: mean(x, axis=0), [u(3, 4)]),
        ("trace", lambda x: trace(x) * 1.0, [u(2, 3, 3)]),
        ("getitem", lambda x: getitem(x, np.array([0, 2, 0])), [u(3, 4)]),
        ("log_softmax", lambda x: log_softmax(x, axis=1), [u(3, 4)]),
        ("sub", sub, [u(3, 1), u(3, 4)]),
        ("div", div, [u(3, 4), den]),
        ("matmul", matmul, [u(2, 3, 3), u(2, 3, 3)]),
        ("concat", lambda a, b: concat([a, b], axis=1), [u(2, 3), u(2, 5)]),
        ("conv2d", lambda x, w, b: conv2d(x, w, b, 2, 1), [u(2, 6, 6, 2), u(3, 3, 2, 3), u(3)]),
        ("conv_transpose2x2", conv_transpose2x2, [u(2, 3, 3, 2), u(2, 2, 2, 3), u(3)]),
        ("svd3", lambda x: svd3_tensor(x)[1], [np.diag([3.0, 2.0, 1.0]) + u(3, 3, lo=-0.2, hi=0.2)]),
    ]


def _composite_errors():
    """(name, max relative error) for the model-level differentiable pieces."""
    rng = np.random.default_rng(41)
    out = []
    yy, xx = np.mgrid[0:9, 0:9] / 9
    img = np.sin(2.1 * xx + 1.3 * yy) + np.cos(3.2 * xx - 0.7 * yy)
    for mode in Mode:
        th = sample_transform(TransformRanges(), 5, mode).matrix
        errs = gradcheck(_weighted(stn_warp, _probe((9, 9), 6)), [img, th], h=1e-7)
        out.append((f"stn_warp[{mode.value}]", max(errs)))
    for mode in DistanceMode:
        m = np.eye(3) + rng.normal(scale=0.2, size=(3, 3))
        out.append((f"distance[{mode.value}]", gradcheck(lambda t: distance(t, DistanceConfig(mode)), [m])[0]))
    ref = sample_transform(TransformRanges(), 7).matrix
    m = ref @ (np.eye(3) + rng.normal(scale=0.2, size=(3, 3)))
    out.append(("geodesic[theta]", gradcheck(lambda t: geodesic_distance(ref, t), [m])[0]))
    labels = rng.integers(0, 3, (2, 4, 4))
    out.append(("pixel_xe", gradcheck(lambda t: pixel_cross_entropy(t, labels), [rng.normal(size=(2, 3, 4, 4))])[0]))
    lab = rng.integers(0, 3, (8, 8)).repeat(4, 0).repeat(4, 1)
    gt = sobel_boundary(lab)
    out.append(("balanced_xe", gradcheck(lambda t: balanced_boundary_xe(t, gt.values[:8, :8]),
                                         [rng.uniform(0.05, 0.95, (8, 8))])[0]))
    itn = init_itn(16, seed=1)
    for p in itn.params:
        p.data = p.data + rng.normal(scale=0.03, size=p.shape)
    itn = freeze(itn)
    pred = rng.uniform(0.05, 0.95, (32, 32))
    for mode in DistanceMode:
        errs = gradcheck(lambda t: inverseform_loss(t, gt, itn, DistanceConfig(mode), tile_size=16), [pred])
        out.append((f"inverseform_loss[{mode.value}]", errs[0]))
    seg = init_seg_model(3, 16, 16, seed=2)
    for _, b in seg.params.values():
        b.data = rng.normal(scale=0.1, size=b.shape)
    image = gen_shapes(1, 16, 16, num_classes=3, seed=8)[0].image
    probe = _probe((3, 16, 16), 9)
    head_w = seg.params["seg"][0]
    base = head_w.data.copy()

    def loss_of():
        logits, b = seg_forward(seg, image)
        return tsum(mul(logits, probe)) + tsum(mul(b, probe[0]))

    seg.zero_grad()
    loss_of().backward()

    def f(arr):
        head_w.data = arr
        try:
            return loss_of().item()
        finally:
            head_w.data = base

    out.append(("seg_forward", relative_error(head_w.grad, numeric_grad(f, [base], 0))))
    x = Tensor(image, requires_grad=True)
    logits, b = seg_forward(seg, x)
    (tsum(mul(logits, probe)) + tsum(mul(b, probe[0]))).backward()
    fd = numeric_grad(lambda a: (lambda lb: tsum(mul(lb[0], probe)) + tsum(mul(lb[1], probe[0])))(
        seg_forward(seg, a)).item(), [image], 0)
    out.append(("seg_forward[input]", relative_error(x.grad, fd)))
    return out


def test_04_gradient_suite(announce):
    start = time.perf_counter()
    prim = []
    for name, op, arrays in _primitive_cases():
        probe = _probe(op(*[Tensor(a) for a in arrays]).shape, 99)
        prim.append((name, max(gradcheck(_weighted(op, probe), arrays))))
    comp = _composite_errors()
    seconds = time.perf_counter() - start
    bad = [n for n, e in prim if not e < 1e-5] + [n for n, e in comp if not e < 1e-4]
    ok = not bad and seconds < 60
    announce(4, ok, f"{len(prim)} primitive ops max rel err {max(e for _, e in prim):.1e} (tol 1e-5); "
                    f"{len(comp)} composite checks max {max(e for _, e in comp):.1e} (tol 1e-4); "
                    f"{seconds:.1f}s; failing: {bad or 'none'}")
    assert ok


# -- 5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_05_itn_training(itn_run, announce):
    rng = np.random.default_rng(5)
    vecs = np.stack([to_vector(sample_transform(TransformRanges(), rng)) for _ in range(50_000)])
    baseline = float(np.mean((vecs - identity_vector()) ** 2))
    curve = itn_run["curve"]
    mse = curve["holdout_mse"][-1]
    loss = curve["train_loss"]
    ok = (len(curve["epoch"]) <= 20 and mse < 0.01 and baseline >= 3 * mse and itn_run["seconds"] < 900
          and loss[0] > loss[1] > loss[2])
    announce(5, ok, f"held-out MSE {mse:.4f} after {len(curve['epoch'])} epochs; identity baseline {baseline:.4f} "
                    f"({baseline / mse:.1f}x); {itn_run['seconds']:.0f}s")
    assert ok


# -- 6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_06_fig2_phenomenon(trained_itn, heldout_maps, announce):
    start = time.perf_counter()
    out = fig2_reconstruction(heldout_maps, trained_itn, shift_px=3, num_tiles=500)
    seconds = time.perf_counter() - start
    ok = (out["n"] >= 500 and out["if_orders_correctly"] >= 0.85 and out["xe_inverts"] >= 0.5
          and seconds < 120)
    announce(6, ok, f"n={out['n']}  IF orders shift<unrelated {out['if_orders_correctly']:.3f} (need 0.85)  "
                    f"XE inverts {out['xe_inverts']:.3f} (need 0.5)  {seconds:.1f}s")
    assert ok


# -- 7 ----------------------------------------------------------------------

@pytest.mark.slow
def test_07_zero_inference_cost(seg_runs, announce):
    costs = {}
    for (seed, gamma), d in seg_runs["runs"].items():
        run = json.loads((d / "run.json").read_text())
        model = decode_seg_checkpoint((d / "seg.ifsg").read_bytes())
        counted = inference_cost(model)
        assert (run["inference"]["params"], run["inference"]["macs"]) == counted
        costs.setdefault(seed, {})[gamma] = counted
    ok = all(len(set(c.values())) == 1 for c in costs.values())
    params, macs = costs[SEG_SEEDS[0]][0.0]
    announce(7, ok, f"params {params}  MACs {macs}  identical across gamma for {len(costs)} seeds")
    assert ok


# -- 8 ----------------------------------------------------------------------

def _final_metrics(d):
    lines = (d / "metrics.jsonl").read_text().splitlines()
    return json.loads(lines[-1])


@pytest.mark.slow
def test_08_directional_result(seg_runs, announce):
    final = {k: _final_metrics(d) for k, d in seg_runs["runs"].items()}
    mba = {g: float(np.mean([final[s, g]["val_mba"] for s in SEG_SEEDS])) for g in SEG_GAMMAS}
    miou = {g: float(np.mean([final[s, g]["val_miou"] for s in SEG_SEEDS])) for g in SEG_GAMMAS}
    g0, g1 = SEG_GAMMAS
    ok = mba[g1] >= mba[g0] and miou[g1] >= miou[g0] - 0.005 and seg_runs["seconds"] < 3600
    announce(8, ok, f"mean mBA {mba[g0]:.4f} -> {mba[g1]:.4f}  mean mIoU {miou[g0]:.4f} -> {miou[g1]:.4f}  "
                    f"({len(final)} runs, {seg_runs['seconds']:.0f}s)")
    assert ok


@pytest.mark.slow
def test_default_seg_val_miou_rises_over_first_epochs(seg_runs):
    # the default config is seed 0 with the default gamma of 0.5
    d = seg_runs["runs"][0, 0.5]
    hist = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines()]
    first = [h["val_miou"] for h in hist[:3]]
    assert len(first) == 3 and first[0] < first[1] < first[2]


# -- 9 ----------------------------------------------------------------------

def _tree_bytes(root):
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            files[str(p.relative_to(root))] = data
    return files


def _command_set(base, itn_path):
    g = base / "gen"
    return [
        ["gen-pairs", "--count", "4", "--height", "64", "--width", "64", "--seed", "5", "--out", str(g)],
        ["train-itn", "--data", str(g), "--epochs", "2", "--batch-size", "8", "--holdout-maps", "2",
         "--threads", "1", "--out", str(base / "itn")],
        ["eval-distance", str(g / "maps" / "00000.boundary.pgm"),
         str(g / "maps" / "00001.boundary.pgm"), "--itn", itn_path,
         "--out", str(base / "dist.json")],
        ["train-seg", "--itn", itn_path, "--height", "32", "--width", "32", "--train-count", "6", "--val-count",
         "3", "--epochs", "1", "--batch-size", "3", "--threads", "1", "--out", str(base / "seg")],
        ["bench", "--itn", itn_path, "--maps", "6", "--num-tiles", "10", "--magnitudes", "0,2", "--threads", "1",
         "--out", str(base / "bench")],
        ["report", str(base / "seg"), "--out", str(base / "report.md")],
    ]


def test_09_determinism(tmp_path, announce, capsys):
    m = init_itn(32, seed=0)
    rng = np.random.default_rng(0)
    for p in m.params:
        p.data = p.data + rng.normal(scale=0.01, size=p.shape)
    itn_path = tmp_path / "itn.ifck"
    save_checkpoint(freeze(m), itn_path)
    # identical config means identical paths too, so both runs use the same directory
    base = tmp_path / "run"
    trees = []
    for _ in range(2):
        shutil.rmtree(base, ignore_errors=True)
        base.mkdir()
        for args in _command_set(base, str(itn_path)):
            assert main(args) == 0, args[0]
        trees.append(_tree_bytes(base))
    capsys.readouterr()
    differing = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))
    ok = trees[0].keys() == trees[1].keys() and not differing
    announce(9, ok, f"6 commands, {len(trees[0])} artifacts compared; differing: {differing or 'none'}")
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_10_round_trips(tmp_path, announce):
    checked = []
    rng = np.random.default_rng(10)
    for arr in (rng.normal(size=(3, 4, 5)), rng.integers(-5, 5, (7,)).astype(np.int64), np.zeros((0, 2))):
        save_tensor(tmp_path / "t.iftn", arr)
        back = load_tensor(tmp_path / "t.iftn")
        save_tensor(tmp_path / "t2.iftn", back)
        assert (tmp_path / "t.iftn").read_bytes() == (tmp_path / "t2.iftn").read_bytes()
        assert encode_tensor(decode_tensor(encode_tensor(arr))[0]) == encode_tensor(arr)
    checked.append("IFTN")

    for mode in Mode:
        itn = init_itn(16, mode, seed=1)
        for p in itn.params:
            p.data = p.data + rng.normal(scale=0.05, size=p.shape)
        save_checkpoint(freeze(itn), tmp_path / "a.ifck")
        save_checkpoint(load_checkpoint(tmp_path / "a.ifck"), tmp_path / "b.ifck")
        assert (tmp_path / "a.ifck").read_bytes() == (tmp_path / "b.ifck").read_bytes()
        buf = encode_checkpoint(freeze(itn))
        assert encode_checkpoint(decode_checkpoint(buf)) == buf
    checked.append("IFCK")

    sample = gen_shapes(1, 64, 64, seed=3)[0]
    save_boundary_pgm(tmp_path / "a.pgm", sample.gt_boundary)
    back = load_boundary_pgm(tmp_path / "a.pgm")
    save_boundary_pgm(tmp_path / "b.pgm", back)
    assert back == sample.gt_boundary
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    checked.append("PGM")

    save_dataset(tmp_path / "d1", gen_shapes(3, 32, 32, seed=4), meta={"seed": 4})
    samples, manifest = load_dataset(tmp_path / "d1")
    save_dataset(tmp_path / "d2", samples, meta=manifest["meta"])
    names = sorted(p.name for p in (tmp_path / "d1").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "d2").iterdir())
    assert all((tmp_path / "d1" / n).read_bytes() == (tmp_path / "d2" / n).read_bytes() for n in names)
    checked.append("dataset manifest")
    announce(10, True, f"write->read->write byte-identical: {', '.join(checked)}")
