"""Command-line entry point: ``inverseform <command> [--config FILE] [--key value ...]``.

Every setting can come from a key=value config file or from a flag; flags
win. Unknown keys and invalid values exit with code 2, a diverging training
run exits with code 3.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .boundary import load_boundary_pgm
from .distance import DistanceConfig, DistanceMode
from .errors import ContractError, DivergenceError, FormatError, InverseFormError
from .fileio import atomic_write_json, atomic_write_text
from .homography import Mode, TransformRanges
from .numcore.tensor import no_grad
from .numcore.tensorio import save_tensor

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

log = logging.getLogger("inverseform")


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class Field:
    type: object
    default: object
    help: str
    check: object = None          # callable(value) -> error message or None


def _positive(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _finite_nonneg(v):
    return None if math.isfinite(v) and v >= 0 else "must be finite and >= 0"


def _unit(v):
    return None if 0 <= v < 1 else "must lie in [0, 1)"


def _choice(*options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(options)}"
    return check


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


_COMMON = {
    "seed": Field(int, 0, "master seed; every random stream derives from it", _nonneg),
    "out": Field(str, "runs/out", "output directory"),
}

_MAPS = {
    "height": Field(int, 96, "image height", _positive),
    "width": Field(int, 96, "image width", _positive),
    "num_classes": Field(int, 5, "classes including background", lambda v: None if v >= 2 else "must be >= 2"),
}

_TILES = {
    "tile_size": Field(int, 32, "tile side in pixels", lambda v: None if v >= 4 else "must be >= 4"),
    "min_boundary_fraction": Field(float, 0.02, "informative-tile threshold", _unit),
}

_DIST = {
    "distance_mode": Field(str, "euclidean", "euclidean or geodesic", _choice("euclidean", "geodesic")),
    "lambda": Field(float, 0.1, "geodesic residual weight", _finite_nonneg),
}

COMMANDS = {
    "gen-pairs": {
        **_COMMON, **_MAPS, **_TILES,
        "count": Field(int, 200, "number of shape maps", _nonneg),
        "mode": Field(str, "affine6", "affine6 or homography8", _choice("affine6", "homography8")),
        "pairs_per_tile": Field(int, 1, "transforms sampled per informative tile", _positive),
    },
    "train-itn": {
        **_COMMON, **_MAPS, **_TILES, **_DIST,
        "data": Field(str, "", "gen-pairs output to train on; empty = fresh transforms every epoch"),
        "maps": Field(int, 8000, "shape maps for streamed training when no data is given", _positive),
        "holdout_maps": Field(int, 800, "shape maps in the held-out set", _nonneg),
        "mode": Field(str, "affine6", "affine6 or homography8", _choice("affine6", "homography8")),
        "epochs": Field(int, 20, "training epochs", _nonneg),
        "batch_size": Field(int, 64, "batch size", _positive),
        "lr": Field(float, 0.03, "learning rate", _finite_nonneg),
        "momentum": Field(float, 0.9, "SGD momentum", _unit),
    },
    "eval-distance": {
        **_TILES,
        "itn": Field(str, "", "ITN checkpoint (.ifck)"),
        "lambda": Field(float, 0.1, "geodesic residual weight", _finite_nonneg),
        "out": Field(str, "", "optional JSON report path"),
    },
    "train-seg": {
        **_COMMON, **_MAPS, **_TILES, **_DIST,
        "itn": Field(str, "", "frozen ITN checkpoint (.ifck)"),
        "data": Field(str, "", "shapes dataset directory (e.g. gen-pairs out/maps); its last val_count "
                               "samples validate. Empty = generate"),
        "train_count": Field(int, 2000, "training samples when generating", _positive),
        "val_count": Field(int, 200, "validation samples", _positive),
        "data_seed": Field(int, 0, "seed of the generated dataset", _nonneg),
        "beta": Field(float, 1.0, "boundary XE weight", _finite_nonneg),
        "gamma": Field(float, 0.5, "InverseForm loss weight", _finite_nonneg),
        "epochs": Field(int, 3, "training epochs", _nonneg),
        "batch_size": Field(int, 8, "batch size", _positive),
        "lr": Field(float, 0.05, "learning rate", _finite_nonneg),
        "momentum": Field(float, 0.9, "SGD momentum", _unit),
        "grad_clip": Field(float, 1.0, "cap on the global gradient norm (0: no clipping)", _finite_nonneg),
        "normalize": Field(_bool, True, "average the IF loss over informative tiles (false: raw sum)"),
        "concat_boundary": Field(_bool, False, "feed the boundary map into the segmentation head"),
    },
    "bench": {
        **_COMMON, **_MAPS, **_TILES, **_DIST,
        "itn": Field(str, "", "frozen ITN checkpoint (.ifck)"),
        "maps": Field(int, 200, "held-out shape maps to draw tiles from", _positive),
        "map_seed": Field(int, 12, "seed of the held-out maps", _nonneg),
        "axis": Field(str, "translation", "translation, rotation or scale",
                      _choice("translation", "rotation", "scale")),
        "magnitudes": Field(_floats, (0.0, 1.0, 2.0, 3.0, 4.0, 6.0), "comma-separated, starting at 0"),
        "num_tiles": Field(int, 500, "tiles per magnitude", _positive),
        "shift_px": Field(float, 3.0, "shift of the mild-shift ordering check", _nonneg),
    },
    "report": {
        "out": Field(str, "", "optional markdown output path"),
    },
}

_POSITIONAL = {"eval-distance": ("map_a", "map_b"), "report": ("runs",)}

_DESCRIPTIONS = {
    "gen-pairs": "generate shape maps, their boundaries and ITN training pairs",
    "train-itn": "train the inverse-transformation network and save a checkpoint",
    "eval-distance": "print the InverseForm distance between two boundary maps",
    "train-seg": "train the segmentation model on the joint loss",
    "bench": "sweep transformations and compare distance measures",
    "report": "tabulate final metrics across train-seg runs",
}


# -- config -------------------------------------------------------------

def parse_config_file(path):
    values = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve_config(command, file_values=None, flag_values=None):
    """defaults < config file < flags, every field converted and validated."""
    fields = COMMANDS[command]
    merged = {k: f.default for k, f in fields.items()}
    for source in (file_values or {}, flag_values or {}):
        for key, raw in source.items():
            if key not in fields:
                raise ConfigError(f"unknown key '{key}' for {command}")
            try:
                merged[key] = fields[key].type(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    for key, f in fields.items():
        if f.check is not None:
            msg = f.check(merged[key])
            if msg:
                raise ConfigError(f"{key}: {msg} (got {merged[key]!r})")
    return merged


def threads_from(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("IF_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"IF_THREADS must be an integer, got {env!r}") from None
    return n


def write_run_json(out_dir, command, cfg, threads, extra=None):
    record = {"command": command, "version": __version__, "config": cfg, "threads": threads}
    if extra:
        record.update(extra)
    atomic_write_json(os.path.join(out_dir, "run.json"), record)


def _dist_cfg(cfg):
    return DistanceConfig(DistanceMode(cfg["distance_mode"]), lam=cfg["lambda"])


def _load_itn(path, tile_size):
    from .itn import freeze, load_checkpoint
    if not path:
        raise ConfigError("itn: a checkpoint path is required")
    if not os.path.exists(path):
        raise ConfigError(f"itn: no such file {path}")
    return freeze(load_checkpoint(path, tile_size))


# -- commands -----------------------------------------------------------

def cmd_gen_pairs(cfg, threads):
    from .itn import make_pair_dataset
    from .segtoy import gen_shapes, save_dataset
    out = cfg["out"]
    samples = gen_shapes(cfg["count"], cfg["height"], cfg["width"], cfg["num_classes"], cfg["seed"])
    save_dataset(os.path.join(out, "maps"), samples, meta={"seed": cfg["seed"]})
    pairs = make_pair_dataset([s.gt_boundary for s in samples], TransformRanges(), cfg["tile_size"],
                              cfg["min_boundary_fraction"], cfg["seed"], Mode(cfg["mode"]),
                              cfg["pairs_per_tile"])
    save_pairs(os.path.join(out, "pairs"), pairs)
    write_run_json(out, "gen-pairs", cfg, threads, {"pairs": len(pairs)})
    print(f"wrote {len(samples)} maps and {len(pairs)} pairs to {out}")


def save_pairs(directory, pairs):
    os.makedirs(directory, exist_ok=True)
    save_tensor(os.path.join(directory, "sources.iftn"), pairs.sources)
    save_tensor(os.path.join(directory, "warped.iftn"), pairs.warped)
    save_tensor(os.path.join(directory, "targets.iftn"), pairs.targets)
    save_tensor(os.path.join(directory, "owner.iftn"), np.asarray(pairs.meta["owner"], dtype=np.float64))
    atomic_write_json(os.path.join(directory, "manifest.json"),
                      {"format": "inverseform-pairs", "version": 1, "count": len(pairs),
                       "tile_size": pairs.meta["tile_size"], "mode": pairs.meta["mode"],
                       "files": ["sources.iftn", "warped.iftn", "targets.iftn", "owner.iftn"]})


def load_pairs(directory):
    from .itn import TilePairBatch
    from .numcore.tensorio import load_tensor
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    if man.get("format") != "inverseform-pairs":
        raise FormatError(f"{directory} is not an inverseform-pairs dataset")
    arrays = [load_tensor(os.path.join(directory, f)) for f in man["files"]]
    return TilePairBatch(arrays[0], arrays[1], arrays[2],
                         {"tile_size": man["tile_size"], "mode": man["mode"], "owner": arrays[3].astype(np.int64)})


def cmd_train_itn(cfg, threads):
    from .itn import init_itn, make_pair_dataset, make_pair_stream, save_checkpoint, save_curve, train_itn
    from .segtoy import gen_shapes
    out = cfg["out"]
    mode = Mode(cfg["mode"])
    shape_args = (cfg["height"], cfg["width"], cfg["num_classes"])
    if cfg["data"]:
        data = load_pairs(os.path.join(cfg["data"], "pairs"))
        if data.meta["tile_size"] != cfg["tile_size"] or data.meta["mode"] != mode.value:
            raise ConfigError("data: pair dataset tile_size/mode differ from the config")
    else:
        maps = gen_shapes(cfg["maps"], *shape_args, seed=cfg["seed"] + 11)
        data = make_pair_stream([s.gt_boundary for s in maps], TransformRanges(), cfg["tile_size"],
                                cfg["min_boundary_fraction"], seed=cfg["seed"] + 1, mode=mode)
    holdout = None
    if cfg["holdout_maps"]:
        ho_maps = gen_shapes(cfg["holdout_maps"], *shape_args, seed=cfg["seed"] + 12)
        holdout = make_pair_dataset([s.gt_boundary for s in ho_maps], TransformRanges(), cfg["tile_size"],
                                    cfg["min_boundary_fraction"], seed=cfg["seed"] + 2, mode=mode)
    model = init_itn(cfg["tile_size"], mode, seed=cfg["seed"], distance_mode=DistanceMode(cfg["distance_mode"]))
    model, curve = train_itn(model, data, cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"],
                             holdout, cfg["momentum"], _dist_cfg(cfg))
    save_checkpoint(model, os.path.join(out, "itn.ifck"))
    save_curve(os.path.join(out, "curve.json"), curve)
    write_run_json(out, "train-itn", cfg, threads, {"final": {k: v[-1] for k, v in curve.items()} if curve["epoch"] else {}})
    for e, tl, ho in zip(curve["epoch"], curve["train_loss"], curve["holdout_mse"]):
        print(f"epoch {e} train_loss {tl:.6f} holdout_mse {ho}")


def cmd_eval_distance(cfg, threads, map_a, map_b):
    from .loss import inverseform_loss_detailed
    itn = _load_itn(cfg["itn"], cfg["tile_size"])
    a, b = load_boundary_pgm(map_a), load_boundary_pgm(map_b)
    report = {"map_a": map_a, "map_b": map_b}
    for mode in DistanceMode:
        with no_grad():
            value, used, skipped = inverseform_loss_detailed(
                a.values, b, itn, DistanceConfig(mode, lam=cfg["lambda"]), cfg["tile_size"],
                cfg["min_boundary_fraction"])
        report[mode.value] = value.item()
        report["informative_tiles"], report["skipped_tiles"] = used, skipped
    for mode in DistanceMode:
        print(f"{mode.value:10s} {report[mode.value]:.9f}")
    print(f"tiles      {report['informative_tiles']} informative, {report['skipped_tiles']} skipped")
    if cfg["out"]:
        atomic_write_json(cfg["out"], report)


def cmd_train_seg(cfg, threads):
    from .loss import LossWeights
    from .segtoy import (SegTrainConfig, dump_metrics_jsonl, gen_shapes, inference_cost, init_seg_model,
                         load_dataset, save_seg_checkpoint, train_seg)
    out = cfg["out"]
    itn = _load_itn(cfg["itn"], cfg["tile_size"])
    if cfg["data"]:
        samples, _ = load_dataset(cfg["data"])
        if len(samples) <= cfg["val_count"]:
            raise ConfigError(f"data: {len(samples)} samples leave nothing to train on after "
                              f"val_count={cfg['val_count']}")
        train, val = samples[:-cfg["val_count"]], samples[-cfg["val_count"]:]
    else:
        shape_args = (cfg["height"], cfg["width"], cfg["num_classes"])
        train = gen_shapes(cfg["train_count"], *shape_args, seed=cfg["data_seed"])
        val = gen_shapes(cfg["val_count"], *shape_args, seed=cfg["data_seed"] + 1_000_003)
    h, w = train[0].labels.shape
    model = init_seg_model(cfg["num_classes"], h, w, cfg["seed"], cfg["concat_boundary"])
    tcfg = SegTrainConfig(cfg["epochs"], cfg["lr"], cfg["momentum"], cfg["batch_size"], cfg["seed"],
                          cfg["tile_size"], cfg["min_boundary_fraction"], normalize=cfg["normalize"],
                          grad_clip=cfg["grad_clip"])
    os.makedirs(out, exist_ok=True)

    def show(r):
        print(" ".join(f"{k} {v:.6f}" if isinstance(v, float) else f"{k} {v}" for k, v in r.items()), flush=True)

    try:
        model, history = train_seg(model, train, val, itn, LossWeights(cfg["beta"], cfg["gamma"]),
                                   _dist_cfg(cfg), tcfg, threads, log=show)
    except DivergenceError as exc:
        atomic_write_json(os.path.join(out, "divergence.json"),
                          {"message": str(exc), "epoch": exc.epoch, "step": exc.step,
                           "components": exc.components})
        raise
    save_seg_checkpoint(model, os.path.join(out, "seg.ifsg"))
    dump_metrics_jsonl(history, os.path.join(out, "metrics.jsonl"))
    params, macs = inference_cost(model)
    write_run_json(out, "train-seg", cfg, threads,
                   {"inference": {"params": params, "macs": macs}, "final": history[-1] if history else {}})


def cmd_bench(cfg, threads):
    from .bench import SweepSpec, fig2_reconstruction, run_sweep, save_sweep
    from .segtoy import gen_shapes
    out = cfg["out"]
    itn = _load_itn(cfg["itn"], cfg["tile_size"])
    maps = [s.gt_boundary for s in gen_shapes(cfg["maps"], cfg["height"], cfg["width"],
                                               cfg["num_classes"], cfg["map_seed"])]
    try:
        spec = SweepSpec(cfg["axis"], cfg["magnitudes"], cfg["num_tiles"], cfg["seed"])
    except ContractError as exc:
        raise ConfigError(f"magnitudes: {exc}") from None
    dist = _dist_cfg(cfg)
    rows = run_sweep(spec, maps, itn, dist, cfg["min_boundary_fraction"], threads)
    save_sweep(rows, os.path.join(out, "sweep.csv"), os.path.join(out, "sweep.svg"),
               f"{cfg['axis']} sweep ({cfg['distance_mode']})")
    fig2 = fig2_reconstruction(maps, itn, dist, cfg["shift_px"], cfg["num_tiles"], cfg["seed"],
                               cfg["min_boundary_fraction"])
    atomic_write_json(os.path.join(out, "fig2.json"), fig2)
    write_run_json(out, "bench", cfg, threads)
    for r in rows:
        print(f"{r['magnitude']:8g} {r['measure']:12s} {r['mean']:.6f} +- {r['stddev']:.6f} (n={r['n']})")
    print(f"shift {cfg['shift_px']:g}px: inverseform orders correctly on {fig2['if_orders_correctly']:.3f}, "
          f"balanced XE inverts on {fig2['xe_inverts']:.3f} of {fig2['n']} tiles")


def load_run(path):
    from .segtoy import load_metrics_jsonl
    with open(os.path.join(path, "run.json")) as fh:
        run = json.load(fh)
    if run.get("command") != "train-seg":
        raise ConfigError(f"{path} is not a train-seg run")
    history = load_metrics_jsonl(os.path.join(path, "metrics.jsonl"))
    return run, history


def report_table(runs):
    """Markdown table of final metrics; gamma > 0 runs are paired with the
    gamma = 0 run that matches them on every other setting."""
    def key(cfg):
        return tuple(sorted((k, v) for k, v in cfg.items() if k not in ("gamma", "out")))

    baselines = {key(r["config"]): h[-1] for _, r, h in runs if r["config"]["gamma"] == 0 and h}
    lines = ["| run | gamma | seed | mIoU | pixel acc | mBA | Δ mIoU | Δ mBA |",
             "|---|---|---|---|---|---|---|---|"]
    for path, r, h in runs:
        if not h:
            continue
        f = h[-1]
        base = baselines.get(key(r["config"])) if r["config"]["gamma"] != 0 else None
        dm = f"{f['val_miou'] - base['val_miou']:+.4f}" if base else "-"
        db = f"{f['val_mba'] - base['val_mba']:+.4f}" if base else "-"
        lines.append(f"| {path} | {r['config']['gamma']:g} | {r['config']['seed']} | {f['val_miou']:.4f} | "
                     f"{f['val_pixel_acc']:.4f} | {f['val_mba']:.4f} | {dm} | {db} |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg, threads, runs):
    loaded = []
    for p in runs:
        if not os.path.exists(os.path.join(p, "run.json")):
            raise ConfigError(f"runs: {p} has no run.json")
        run, history = load_run(p)
        loaded.append((p, run, history))
    table = report_table(loaded)
    print(table, end="")
    if cfg["out"]:
        atomic_write_text(cfg["out"], table)


_HANDLERS = {"gen-pairs": cmd_gen_pairs, "train-itn": cmd_train_itn, "eval-distance": cmd_eval_distance,
             "train-seg": cmd_train_seg, "bench": cmd_bench, "report": cmd_report}


# -- argument parsing ---------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="inverseform", description="InverseForm boundary-distance toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fields in COMMANDS.items():
        p = sub.add_parser(name, help=_DESCRIPTIONS[name], description=_DESCRIPTIONS[name])
        for pos in _POSITIONAL.get(name, ()):
            p.add_argument(pos, nargs="+" if pos == "runs" else None)
        p.add_argument("--config", help="key=value config file (flags override it)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: IF_THREADS or 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key, f in fields.items():
            default = ",".join(f"{x:g}" for x in f.default) if isinstance(f.default, tuple) else f.default
            p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None, metavar="VALUE",
                           help=f"{f.help} (default: {default})")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        threads = threads_from(args)
        if threads < 1:
            raise ConfigError(f"threads: must be >= 1 (got {threads})")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    positional = [getattr(args, p) for p in _POSITIONAL.get(args.command, ())]
    start = time.perf_counter()
    try:
        _HANDLERS[args.command](cfg, threads, *positional)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc} (epoch {exc.epoch}, step {exc.step}, components {exc.components})",
              file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InverseFormError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
