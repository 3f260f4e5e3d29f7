"""Session fixtures shared by the bench and acceptance tests.

The expensive artifacts (the default ITN training run and the paired
segmentation runs) are produced once per session through the CLI, so the
acceptance tests time and inspect exactly what a user would run.
"""

import json
import time

import pytest

from inverseform.cli import main
from inverseform.itn import freeze, load_checkpoint
from inverseform.segtoy import gen_shapes

HELDOUT_MAP_SEED = 12          # the CLI's held-out seed; training maps use seed + 11
SEG_SEEDS = (0, 1, 2, 3, 4)
SEG_GAMMAS = (0.0, 0.5)


@pytest.fixture
def announce(capsys):
    """Prints one acceptance line straight to the terminal, bypassing capture."""
    def _say(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
        return ok
    return _say


@pytest.fixture(scope="session")
def itn_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("itn_default")
    start = time.perf_counter()
    rc = main(["train-itn", "--out", str(out), "--threads", "1"])
    seconds = time.perf_counter() - start
    assert rc == 0
    with open(out / "curve.json") as fh:
        curve = json.load(fh)
    return {"dir": out, "seconds": seconds, "curve": curve}


@pytest.fixture(scope="session")
def trained_itn(itn_run):
    return freeze(load_checkpoint(itn_run["dir"] / "itn.ifck"))


@pytest.fixture(scope="session")
def heldout_maps():
    return [s.gt_boundary for s in gen_shapes(200, seed=HELDOUT_MAP_SEED)]


@pytest.fixture(scope="session")
def seg_runs(itn_run, tmp_path_factory):
    """Default-config train-seg runs for every (seed, gamma) pair."""
    root = tmp_path_factory.mktemp("seg_runs")
    runs = {}
    start = time.perf_counter()
    for seed in SEG_SEEDS:
        for gamma in SEG_GAMMAS:
            out = root / f"seed{seed}_gamma{gamma:g}"
            rc = main(["train-seg", "--itn", str(itn_run["dir"] / "itn.ifck"), "--seed", str(seed),
                       "--data-seed", str(seed), "--gamma", repr(gamma), "--threads", "1", "--out", str(out)])
            assert rc == 0
            runs[seed, gamma] = out
    return {"runs": runs, "seconds": time.perf_counter() - start, "root": root}
