"""Command-line interface: ``fovseg {synth,train,infer,fovmap,goldstd,eval}``.

Every command resolves its parameters from built-in defaults, then an
optional ``--config`` file, then ``--set key=value`` overrides and explicit
flags. The fully resolved parameters are written to ``config.txt`` in the
output directory (flat ``key = value`` lines) together with ``manifest.txt``,
which lists format versions and a SHA-256 for every file written. Passing
that ``config.txt`` back via ``--config`` reproduces the run.

Exit status: 0 on success, 2 for usage or missing-input errors, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .checkpoint import load_checkpoint
from .errors import ConfigError
from .evaluation import (
    confusion_matrix, distribution_grid, foveation_map, foveation_map_at_tiles, gold_standard_argmax_map,
    gold_standard_map, map_mse, scores_from_confusion, segment_image, tile_miou, tiles_to_grid,
    uses_foveation, write_scores_csv,
)
from .patchio import full_to_lr
from .storage import TILE_VERSION, load_labels, save_map16, save_prediction
from .synth import FINE, COARSE, load_split, write_dataset
from .trainer import SeedStreams, TrainConfig, build_models, fit

log = logging.getLogger("fovseg")

THREADS_ENV = "FOVSEG_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# flat key = value configs
# ---------------------------------------------------------------------------


def read_config(path) -> Dict[str, str]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_config(path, values: Dict[str, object]) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {format_value(v)}\n")


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _int_tuple(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _str_tuple(s: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _opt_float(s: str):
    return None if s.lower() in ("none", "") else float(s)


def _path(s: str) -> str:
    return str(Path(s).resolve()) if s else ""


def _converter(default) -> Callable[[str], object]:
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _int_tuple
    return str


def train_keys() -> Dict[str, Tuple[object, Callable]]:
    keys = {"data": ("", _path), "train_split": ("train", str), "val_split": ("val", str)}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        keys[f.name] = (default, _opt_float if default is None else _converter(default))
    return keys


COMMAND_KEYS: Dict[str, Callable[[], Dict[str, Tuple[object, Callable]]]] = {
    "synth": lambda: {"n_images": (20, int), "size": (128, int), "seed": (0, int), "min_fov": (16, int)},
    "train": train_keys,
    "infer": lambda: {"run": ("", _path), "data": ("", _path), "split": ("test", str), "mode": ("", str),
                      "fov_lr_rate": (1.0, float), "seed": (0, int), "threads": (1, int)},
    "fovmap": lambda: {"run": ("", _path), "data": ("", _path), "split": ("test", str),
                       "fov_lr_rate": (1.0, float), "threads": (1, int)},
    "goldstd": lambda: {"baselines": ((), lambda s: tuple(_path(x) for x in _str_tuple(s))),
                        "run": ("", _path), "data": ("", _path), "split": ("test", str),
                        "fov_lr_rate": (1.0, float), "threads": (1, int)},
    "eval": lambda: {"run": ("", _path), "pred": ("", _path), "data": ("", _path), "split": ("test", str),
                     "mode": ("", str), "fov_lr_rate": (1.0, float), "seed": (0, int), "classes": (4, int),
                     "threads": (1, int)},
}

REQUIRED = {
    "train": ("data",),
    "infer": ("run", "data"),
    "fovmap": ("run", "data"),
    "goldstd": ("baselines", "data"),
    "eval": ("data",),
}


def resolve(command: str, args: argparse.Namespace) -> Dict[str, object]:
    keys = COMMAND_KEYS[command]()
    raw: Dict[str, str] = {}
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} not found")
        raw.update(read_config(args.config))
        raw.pop("command", None)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None:
            raw[k] = format_value(flag)
    if "threads" in keys and "threads" not in raw and os.environ.get(THREADS_ENV):
        raw["threads"] = os.environ[THREADS_ENV]
    unknown = set(raw) - set(keys)
    if unknown:
        raise UsageError(f"unknown {command} parameter(s): {', '.join(sorted(unknown))}")
    out = {}
    for k, (default, conv) in keys.items():
        try:
            out[k] = conv(raw[k]) if k in raw else default
        except ValueError as err:
            raise UsageError(f"bad value for {k}: {raw[k]!r} ({err})") from None
    for k in REQUIRED.get(command, ()):
        if not out[k]:
            raise UsageError(f"{command}: '{k}' is required")
    return out


# ---------------------------------------------------------------------------
# output bookkeeping
# ---------------------------------------------------------------------------


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0"


def finish(out: Path, command: str, params: Dict[str, object]) -> None:
    """Write config.txt and a manifest with hashes of everything else in ``out``."""
    write_config(out / "config.txt", {"command": command, **params})
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.txt",))
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"command = {command}\n")
        fh.write(f"fovseg_version = {_version()}\n")
        fh.write(f"checkpoint_format = {checkpoint.VERSION}\n")
        fh.write(f"tiled_image_format = {TILE_VERSION}\n")
        for p in files:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            fh.write(f"file.{p.relative_to(out).as_posix()} = sha256:{digest}\n")


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {path} not found")
    return p


def load_run(run_dir: str):
    """(TrainConfig, FoveationNet, SegNet) from a training output directory."""
    run = _require_dir(run_dir, "run")
    cfg_path, ckpt = run / "config.txt", run / "model.ckpt"
    if not cfg_path.exists() or not ckpt.exists():
        raise UsageError(f"{run} does not contain config.txt and model.ckpt")
    raw = read_config(cfg_path)
    keys = train_keys()
    values = {k: keys[k][1](v) for k, v in raw.items() if k in keys and k not in ("data", "train_split", "val_split")}
    cfg = TrainConfig(**values)
    fov, seg = build_models(cfg, SeedStreams(cfg.seed))
    arrays = load_checkpoint(ckpt)
    fov.load_state_dict(arrays)
    seg.load_state_dict(arrays)
    return cfg, fov, seg


def _samples(data: str, split: str):
    _require_dir(data, "data")
    samples = load_split(data, split)
    if not samples:
        raise UsageError(f"split '{split}' of {data} is empty")
    return samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(p, out: Path) -> None:
    write_dataset(out, p["n_images"], p["size"], p["seed"], min_fov=p["min_fov"])


def cmd_train(p, out: Path) -> None:
    data = _require_dir(p["data"], "data")
    cfg_values = {k: v for k, v in p.items() if k not in ("data", "train_split", "val_split")}
    config = TrainConfig(**cfg_values)
    train = load_split(data, p["train_split"])
    val = load_split(data, p["val_split"])
    if not train:
        raise UsageError(f"split '{p['train_split']}' of {data} is empty")
    # config.txt must exist before checkpoints so the run directory is loadable
    write_config(out / "config.txt", {"command": "train", **p})
    result = fit(train, val, config, out_dir=out)
    log.info("best validation mIoU %.4f at iteration %d (%.1f s)",
             result.best_miou, result.best_iteration, result.log.wall_clock)


def _predict(p, samples):
    cfg, fov, seg = load_run(p["run"])
    mode = p.get("mode") or cfg.mode
    rng = np.random.default_rng(p.get("seed", 0))
    for s in samples:
        yield s, segment_image(s.image, fov, seg, cfg.spec, mode, p["fov_lr_rate"], rng=rng), cfg


def cmd_infer(p, out: Path) -> None:
    samples = _samples(p["data"], p["split"])
    (out / "pred").mkdir(exist_ok=True)
    for s, seg_out, _ in _predict(p, samples):
        save_prediction(out / "pred" / f"{s.image_id}.png", seg_out.pred)


def cmd_eval(p, out: Path) -> None:
    samples = _samples(p["data"], p["split"])
    if bool(p["run"]) == bool(p["pred"]):
        raise UsageError("eval needs exactly one of 'run' or 'pred'")
    if p["run"]:
        classes = load_run(p["run"])[0].classes
        preds = ((s, r.pred) for s, r, _ in _predict(p, samples))
    else:
        pred_dir = _require_dir(p["pred"], "prediction")
        classes = p["classes"]
        preds = ((s, load_labels(pred_dir / f"{s.image_id}.png")) for s in samples)
    total = np.zeros((classes, classes), dtype=np.int64)
    rows = []
    for s, pred in preds:
        conf = confusion_matrix(pred, s.labels, classes)
        total += conf
        rows.append((s.image_id, scores_from_confusion(conf).miou))
    write_scores_csv(out / "scores.csv", scores_from_confusion(total))
    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "miou"])
        w.writerows((i, f"{m:.6f}") for i, m in rows)


def _region_means(fmap, region, full_shape):
    if region is None:
        return "", ""
    h, w = fmap.shape
    rr = np.array([full_to_lr((r, 0), full_shape, (h, w))[0] for r in range(full_shape[0])])
    cc = np.array([full_to_lr((0, c), full_shape, (h, w))[1] for c in range(full_shape[1])])
    up = fmap[np.ix_(rr, cc)]
    return f"{up[region == FINE].mean():.6f}", f"{up[region == COARSE].mean():.6f}"


def cmd_fovmap(p, out: Path) -> None:
    samples = _samples(p["data"], p["split"])
    cfg, fov, seg = load_run(p["run"])
    if not uses_foveation(cfg.mode):
        raise ConfigError(f"run was trained in mode {cfg.mode!r}, which has no foveation output")
    (out / "maps").mkdir(exist_ok=True)
    rows = []
    for s in samples:
        fmap = foveation_map(distribution_grid(s.image, fov, cfg.spec, p["fov_lr_rate"]), cfg.fovs)
        save_map16(out / "maps" / f"{s.image_id}.png", fmap)
        fine, coarse = _region_means(fmap, s.region, s.image.shape)
        rows.append((s.image_id, f"{fmap.mean():.6f}", fine, coarse))
    with open(out / "fovmap_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "mean", "mean_fine", "mean_coarse"])
        w.writerows(rows)


def cmd_goldstd(p, out: Path) -> None:
    samples = _samples(p["data"], p["split"])
    runs = [load_run(b) for b in p["baselines"]]
    fovs = runs[0][0].fovs
    for cfg, _, _ in runs:
        if cfg.fovs != fovs:
            raise ConfigError("all baselines must share the same FoV set")
    modes = [cfg.mode for cfg, _, _ in runs]
    if modes != [f"fixed-{d}" for d in range(len(fovs))]:
        raise ConfigError(f"baselines must be fixed-0 .. fixed-{len(fovs) - 1} in order, got {modes}")
    ours = load_run(p["run"]) if p["run"] else None
    if ours is not None and not uses_foveation(ours[0].mode):
        raise ConfigError(f"run {p['run']} has no foveation output (mode {ours[0].mode!r})")
    for sub in ("gold", "gold_argmax"):
        (out / sub).mkdir(exist_ok=True)
    rows = []
    for s in samples:
        maps, centers = [], None
        for cfg, fov, seg in runs:
            r = segment_image(s.image, fov, seg, cfg.spec, cfg.mode)
            centers = r.centers
            maps.append(tile_miou(r.pred, s.labels, r.centers, cfg.spec, cfg.classes))
        grid = np.stack([tiles_to_grid(m, centers) for m in maps])
        gold = gold_standard_map(grid, fovs)
        save_map16(out / "gold" / f"{s.image_id}.png", gold)
        save_map16(out / "gold_argmax" / f"{s.image_id}.png", gold_standard_argmax_map(grid, fovs))
        if ours is not None:
            cfg, fov, seg = ours
            dist = distribution_grid(s.image, fov, cfg.spec, p["fov_lr_rate"])
            at_tiles = foveation_map_at_tiles(dist, cfg.fovs, centers, s.image.shape)
            ours_grid = tiles_to_grid(at_tiles, centers)
            rows.append((s.image_id, f"{map_mse(gold, ours_grid):.6f}"))
    if rows:
        with open(out / "mse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "mse"])
            w.writerows(rows)
            vals = np.array([float(r[1]) for r in rows])
            w.writerow(["mean", f"{vals.mean():.6f}"])
            w.writerow(["std", f"{vals.std():.6f}"])


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
    "fovmap": cmd_fovmap, "goldstd": cmd_goldstd, "eval": cmd_eval,
}

HELP = {
    "synth": "generate the synthetic two-regime dataset",
    "train": "train a foveated model or a baseline",
    "infer": "segment every image of a split",
    "fovmap": "write foveation maps of a trained model",
    "goldstd": "build gold-standard maps from fixed-patch baselines",
    "eval": "score predictions (IoU, mIoU, pixel accuracy)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fovseg", description="Foveated segmentation of large images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="flat 'key = value' file, e.g. a previous run's config.txt")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one parameter")
        keys = COMMAND_KEYS[name]()
        if "threads" in keys:
            sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        for k in ("data", "run", "split", "mode", "seed", "iterations", "n_images", "size", "pred"):
            if k in keys:
                sp.add_argument(f"--{k.replace('_', '-')}", dest=k, help=f"same as --set {k}=...")
        if "baselines" in keys:
            sp.add_argument("--baselines", nargs="+", help="fixed-0 .. fixed-(D-1) run directories")
    return parser


def main(argv: List[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "baselines", None):
        args.baselines = ",".join(args.baselines)
    try:
        params = resolve(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=max(int(params.get("threads", 1)), 1)):
            COMMANDS[args.command](params, out)
        finish(out, args.command, params)
    except (UsageError, ConfigError, FileNotFoundError) as err:
        print(f"fovseg {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - top-level diagnostic
        log.debug("failure", exc_info=True)
        print(f"fovseg {args.command}: runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
