import json
import os

import numpy as np
import pytest

from inverseform.boundary import save_boundary_pgm
from inverseform.cli import COMMANDS, ConfigError, main, parse_config_file, report_table, resolve_config
from inverseform.itn import freeze, init_itn, save_checkpoint
from inverseform.segtoy import gen_shapes, load_dataset

SMALL_SEG = ["--height", "32", "--width", "32", "--train-count", "6", "--val-count", "3", "--epochs", "1",
             "--batch-size", "3"]


def run_record(out):
    """run.json minus the output directory, which differs between reruns by construction."""
    run = json.loads((out / "run.json").read_text())
    run["config"].pop("out")
    return run


@pytest.fixture(scope="module")
def itn_file(tmp_path_factory):
    m = init_itn(32, seed=0)
    rng = np.random.default_rng(0)
    for p in m.params:
        p.data = p.data + rng.normal(scale=0.01, size=p.shape)
    path = tmp_path_factory.mktemp("itn") / "itn.ifck"
    save_checkpoint(freeze(m), path)
    return str(path)


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 7\nlr=0.2  # trailing\nbatch-size = 4\n")
    values = parse_config_file(cfg)
    assert values == {"epochs": "7", "lr": "0.2", "batch_size": "4"}
    merged = resolve_config("train-itn", values, {"epochs": "2"})
    assert merged["epochs"] == 2 and merged["lr"] == 0.2 and merged["batch_size"] == 4
    assert merged["momentum"] == 0.9


@pytest.mark.parametrize("bad", [{"nope": "1"}, {"epochs": "x"}, {"lr": "-1"}, {"momentum": "1.0"},
                                 {"distance_mode": "manhattan"}, {"lr": "nan"}])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        resolve_config("train-itn", {}, bad)


def test_bad_values_exit_2(tmp_path, capsys):
    assert main(["train-itn", "--epochs", "-1", "--out", str(tmp_path)]) == 2
    (tmp_path / "c.cfg").write_text("unknown_key = 3\n")
    assert main(["train-itn", "--config", str(tmp_path / "c.cfg")]) == 2
    assert main(["train-seg", "--out", str(tmp_path)]) == 2          # no itn checkpoint
    assert main(["train-itn", "--threads", "0"]) == 2
    assert "config error" in capsys.readouterr().err


def test_gen_pairs_and_train_itn_are_deterministic(tmp_path):
    gp = ["gen-pairs", "--count", "4", "--seed", "3"]
    assert main(gp + ["--out", str(tmp_path / "g1")]) == 0
    assert main(gp + ["--out", str(tmp_path / "g2")]) == 0
    for rel in ("pairs/sources.iftn", "pairs/targets.iftn", "pairs/manifest.json", "maps/manifest.json",
                "maps/00000.ppm", "maps/00003.labels.iftn"):
        assert (tmp_path / "g1" / rel).read_bytes() == (tmp_path / "g2" / rel).read_bytes(), rel
    assert run_record(tmp_path / "g1") == run_record(tmp_path / "g2")
    samples, man = load_dataset(tmp_path / "g1" / "maps")
    assert len(samples) == 4 and man["meta"] == {"seed": 3}

    ti = ["train-itn", "--data", str(tmp_path / "g1"), "--epochs", "2", "--batch-size", "8",
          "--holdout-maps", "2", "--threads", "1"]
    assert main(ti + ["--out", str(tmp_path / "i1")]) == 0
    assert main(ti + ["--out", str(tmp_path / "i2")]) == 0
    for rel in ("itn.ifck", "curve.json"):
        assert (tmp_path / "i1" / rel).read_bytes() == (tmp_path / "i2" / rel).read_bytes(), rel
    assert run_record(tmp_path / "i1") == run_record(tmp_path / "i2")
    run = json.loads((tmp_path / "i1" / "run.json").read_text())
    assert run["command"] == "train-itn" and run["config"]["epochs"] == 2 and run["threads"] == 1


def test_train_itn_streamed_small(tmp_path):
    args = ["train-itn", "--maps", "3", "--holdout-maps", "0", "--epochs", "1", "--out", str(tmp_path)]
    assert main(args) == 0
    curve = json.loads((tmp_path / "curve.json").read_text())
    assert curve["epoch"] == [1] and curve["holdout_mse"] == [None]


def test_train_itn_mismatched_data(tmp_path):
    assert main(["gen-pairs", "--count", "2", "--out", str(tmp_path / "g")]) == 0
    assert main(["train-itn", "--data", str(tmp_path / "g"), "--tile-size", "16",
                 "--out", str(tmp_path / "i")]) == 2


def test_eval_distance(tmp_path, itn_file, capsys):
    maps = gen_shapes(2, seed=1)
    save_boundary_pgm(tmp_path / "a.pgm", maps[0].gt_boundary)
    save_boundary_pgm(tmp_path / "b.pgm", maps[1].gt_boundary)
    rc = main(["eval-distance", str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm"), "--itn", itn_file,
               "--out", str(tmp_path / "r.json")])
    assert rc == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["euclidean"] >= 0 and report["geodesic"] >= 0 and report["informative_tiles"] > 0
    assert "euclidean" in capsys.readouterr().out


def test_train_seg_report_and_determinism(tmp_path, itn_file, capsys):
    runs = {}
    for name, gamma in (("g0", "0"), ("g5", "0.5"), ("g5b", "0.5")):
        out = tmp_path / name
        assert main(["train-seg", "--itn", itn_file, "--gamma", gamma, "--out", str(out)] + SMALL_SEG) == 0
        runs[name] = out
    for rel in ("seg.ifsg", "metrics.jsonl"):
        assert (runs["g5"] / rel).read_bytes() == (runs["g5b"] / rel).read_bytes(), rel
    assert run_record(runs["g5"]) == run_record(runs["g5b"])
    r0 = json.loads((runs["g0"] / "run.json").read_text())
    r5 = json.loads((runs["g5"] / "run.json").read_text())
    assert r0["inference"] == r5["inference"]
    capsys.readouterr()
    assert main(["report", str(runs["g0"]), str(runs["g5"]), "--out", str(tmp_path / "r.md")]) == 0
    table = capsys.readouterr().out
    assert "Δ mIoU" in table and "Δ mBA" in table
    row = [line for line in table.splitlines() if str(runs["g5"]) in line][0]
    assert row.split("|")[-3].strip() != "-"
    assert (tmp_path / "r.md").read_text() == table


def test_report_pairs_only_matching_configs():
    def run(gamma, seed):
        cfg = {"gamma": gamma, "seed": seed, "out": f"r{gamma}{seed}", "lr": 0.05}
        return (cfg["out"], {"config": cfg}, [{"val_miou": 0.5 + gamma, "val_pixel_acc": 0.9, "val_mba": 0.4}])

    table = report_table([run(0, 1), run(0.5, 1), run(0.5, 2)])
    lines = table.splitlines()
    assert "+0.5000" in lines[3] and lines[4].endswith("| - | - |")


def test_train_seg_from_dataset_dir(tmp_path, itn_file):
    assert main(["gen-pairs", "--count", "5", "--height", "32", "--width", "32", "--out", str(tmp_path / "g")]) == 0
    out = tmp_path / "s"
    assert main(["train-seg", "--itn", itn_file, "--data", str(tmp_path / "g" / "maps"), "--val-count", "2",
                 "--epochs", "1", "--out", str(out)]) == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1
    assert main(["train-seg", "--itn", itn_file, "--data", str(tmp_path / "g" / "maps"), "--val-count", "5",
                 "--out", str(out)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path, itn_file, capsys):
    out = tmp_path / "d"
    rc = main(["train-seg", "--itn", itn_file, "--lr", "1e300", "--out", str(out)] + SMALL_SEG)
    assert rc == 3
    info = json.loads((out / "divergence.json").read_text())
    assert set(info["components"]) == {"xe", "bxe", "if"} and info["epoch"] == 1
    assert "diverged" in capsys.readouterr().err
    assert not os.path.exists(out / "seg.ifsg")


def test_bench_command(tmp_path, itn_file):
    out = tmp_path / "b"
    args = ["bench", "--itn", itn_file, "--maps", "6", "--num-tiles", "10", "--magnitudes", "0,2",
            "--out", str(out)]
    assert main(args) == 0
    assert (out / "sweep.csv").read_text().count("\n") == 1 + 2 * 4
    assert (out / "sweep.svg").read_text().startswith("<svg")
    assert json.loads((out / "fig2.json").read_text())["n"] == 10
    assert main(args[:-2] + ["--magnitudes", "1,2", "--out", str(out)]) == 2
