"""``predgate`` command line: gen-data, train, eval, predict, audit-params, gradcheck, zoo.

Every option may also come from a ``--config`` file of ``name=value``
lines (``#`` starts a comment); flags on the command line win. Exit codes:
0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import cell_zoo as cz
from . import gradcheck as gc
from .datasets import SequenceSet, ShapeGenConfig, gen_sequences, read_sequences, write_sequences
from .errors import ConfigError, FormatError, PredgateError, TrainingError, UsageError
from .experiment import ZOO_COLUMNS, failed_row, run_model
from .metrics import copy_last_frame, evaluate_frames
from .predcode_stack import (
    StackConfig, audit_config, build_stack, load_checkpoint,
    next_frame_predictions, predict_future, save_checkpoint,
)
from .presets import PRESETS, compare_published, preset_config
from .trainer import TrainConfig, train, write_metrics_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


# option name -> (type, default, help); defaults are applied after the config file
SEED = {"seed": (int, None, "random seed (falls back to $PREDGATE_SEED, then 0)")}
STACK = {
    "preset": (str, "desk", f"stack preset, one of {', '.join(PRESETS)}"),
    "model": (str, "M18", "cell model id M1..M20 or alias"),
    "peephole-mode": (str, None, "stacked_conv or elementwise [default: stacked_conv]"),
    "gate-activation": (str, None, "hard_sig or sigmoid [default: hard_sig]"),
    "loss": (str, None, "e_mean or mse [default: mse for desk, else e_mean]"),
    "a-channels": (_ints, None, "override A channels per layer, e.g. 1,16"),
    "r-channels": (_ints, None, "override R channels per layer, e.g. 8,16"),
    "layer-weights": (_floats, None, "loss weight per layer, e.g. 1,0"),
}
TRAIN = {
    "epochs": (int, 1, "passes over the training sequences"),
    "batch-size": (int, 4, "sequences per optimizer step"),
    "lr": (float, 1e-3, "initial learning rate"),
    "decay-factor": (float, 10.0, "learning rate divisor after half the steps"),
    "holdout": (int, 0, "exclude the last N sequences from training"),
}
COMMANDS = {
    "gen-data": dict(SEED, **{
        "out": (str, None, "output .pgsq path (required)"),
        "count": (int, 100, "number of sequences"),
        "canvas": (int, 16, "frame side in pixels"),
        "shapes": (int, 2, "shapes per sequence"),
        "shape-kind": (str, "square", "square or cross"),
        "shape-side": (int, 3, "shape side in pixels"),
        "max-speed": (int, 2, "largest velocity component"),
        "frames": (int, 10, "frames per sequence"),
        "bounce": (_bool, True, "reflect shapes off the walls"),
    }),
    "train": dict(SEED, **STACK, **TRAIN, **{
        "data": (str, None, "training .pgsq file (required)"),
        "out": (str, None, "checkpoint path (required)"),
        "metrics": (str, None, "metrics CSV (default: <out>.metrics.csv)"),
    }),
    "eval": dict(SEED, **{
        "checkpoint": (str, None, "checkpoint path (required)"),
        "data": (str, None, ".pgsq file (required)"),
        "out": (str, None, "metrics CSV (default: print only)"),
        "holdout": (int, 0, "score only the last N sequences (0 = all)"),
    }),
    "predict": dict(SEED, **{
        "checkpoint": (str, None, "checkpoint path (required)"),
        "data": (str, None, ".pgsq file (required)"),
        "out-dir": (str, None, "directory for pred/ and truth/ frames (required)"),
        "k": (int, 3, "frames to extrapolate"),
        "seed-frames": (int, None, "observed frames before extrapolating (default T-k)"),
        "limit": (int, 4, "number of sequences to dump (0 = all)"),
    }),
    "audit-params": dict(STACK, **{
        "expect": (int, None, "exit 1 unless the total equals N"),
    }),
    "gradcheck": dict(SEED, **{
        "models": (_names, None, "comma-separated model ids (default: all, plus op and stack rows)"),
        "peephole-mode": (str, "stacked_conv", "stacked_conv or elementwise"),
        "gate-activation": (str, "hard_sig", "hard_sig or sigmoid"),
        "h": (float, gc.DEFAULT_H, "central difference step"),
        "tol": (float, gc.MODEL_TOL, "relative error tolerance for model and stack rows"),
        "corrupt-op": (str, None, argparse.SUPPRESS),
    }),
    "zoo": dict(SEED, **STACK, **TRAIN, **{
        "data": (str, None, ".pgsq file (required)"),
        "models": (_names, cz.MODEL_IDS, "comma-separated model ids"),
        "out": (str, None, "results CSV (required)"),
    }),
}
COMMANDS["zoo"]["holdout"] = (int, 200, "score on the last N sequences; train on the rest")
REQUIRED = {
    "gen-data": ("out",), "train": ("data", "out"), "eval": ("checkpoint", "data"),
    "predict": ("checkpoint", "data", "out-dir"), "zoo": ("data", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="predgate", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", help="file of name=value lines")
        for opt, (_, default, help_text) in options.items():
            if help_text is not argparse.SUPPRESS and default is not None:
                help_text = f"{help_text} [default: {default}]"
            # defaults are filled in later so the config file can sit between
            p.add_argument(f"--{opt}", default=argparse.SUPPRESS, help=help_text)
    return parser


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected name=value, got {raw!r}")
        values[key.strip().replace("_", "-")] = value.strip()
    return values


def resolve_options(command: str, given: dict, config_path: str | None = None) -> dict:
    """Merge defaults < config file < flags, converting and validating every value."""
    options = COMMANDS[command]
    merged = {}
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in options:
                raise ConfigError(f"unknown key {key!r} in {config_path} for command {command}")
            merged[key] = value
    merged.update({k.replace("_", "-"): v for k, v in given.items()})
    out = {}
    for key, (conv, default, _) in options.items():
        if key in merged:
            try:
                out[key] = conv(merged[key])
            except ValueError as exc:
                raise ConfigError(f"--{key}: {exc}") from None
        else:
            out[key] = default
    if "seed" in options and out["seed"] is None:
        env = os.environ.get("PREDGATE_SEED")
        try:
            out["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"PREDGATE_SEED must be an integer, got {env!r}") from None
    for key in REQUIRED.get(command, ()):
        if out.get(key) is None:
            raise UsageError(f"{command}: --{key} is required")
    return out


def _stack_config(o: dict, model: str | None = None, **fixed) -> StackConfig:
    over = {}
    for key, field in (("peephole-mode", "peephole_mode"), ("gate-activation", "gate_activation"),
                       ("loss", "loss"), ("a-channels", "a_channels"), ("r-channels", "r_channels"),
                       ("layer-weights", "layer_weights")):
        if o[key] is not None:
            over[field] = o[key]
    over.update(fixed)
    return preset_config(o["preset"], model or o["model"], **over)


def _train_config(o: dict) -> TrainConfig:
    return TrainConfig(epochs=o["epochs"], batch_size=o["batch-size"], lr=o["lr"],
                       decay_factor=o["decay-factor"], seed=o["seed"])


def _read_data(path) -> SequenceSet:
    try:
        return read_sequences(path)
    except OSError as exc:
        raise ConfigError(f"cannot read sequence file {path}: {exc.strerror}") from None


def _split(data: SequenceSet, holdout: int) -> tuple[SequenceSet, SequenceSet | None]:
    if holdout <= 0:
        return data, None
    return data.split(holdout)


def _check_data(config: StackConfig, data: SequenceSet, what: str):
    want = (config.height, config.width, config.input_channels)
    got = data.data.shape[2:]
    if got != want:
        raise ConfigError(f"{what}: data frames are {got} (H, W, C) but the stack expects {want}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen_data(o: dict) -> int:
    cfg = ShapeGenConfig(canvas=o["canvas"], shapes=o["shapes"], kind=o["shape-kind"], side=o["shape-side"],
                         max_speed=o["max-speed"], frames=o["frames"], seed=o["seed"], bounce=o["bounce"])
    seqs = gen_sequences(cfg, o["count"])
    write_sequences(seqs, o["out"])
    print(f"{o['out']} sha256={_sha256(o['out'])}")
    return EXIT_OK


def cmd_train(o: dict) -> int:
    config = _stack_config(o)
    data, _ = _split(_read_data(o["data"]), o["holdout"])
    _check_data(config, data, "train")
    stack, log = train(build_stack(config, o["seed"]), data, _train_config(o))
    save_checkpoint(stack, o["out"])
    metrics = o["metrics"] or f"{o['out']}.metrics.csv"
    write_metrics_csv(log, metrics)
    print(f"trained {config.model} for {len(log)} steps; first loss {log[0]['loss']:.6g}, "
          f"last loss {log[-1]['loss']:.6g}")
    print(f"checkpoint {o['out']} sha256={_sha256(o['out'])}")
    print(f"metrics {metrics}")
    return EXIT_OK


def _load(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def cmd_eval(o: dict) -> int:
    stack = _load(o["checkpoint"])
    data = _read_data(o["data"])
    if o["holdout"] > 0:
        _, data = data.split(o["holdout"])
    _check_data(stack.config, data, f"checkpoint {o['checkpoint']}")
    rep = evaluate_frames(next_frame_predictions(stack, data.data), data.data)
    base = evaluate_frames(copy_last_frame(data.data), data.data)
    rows = [dict(r) for r in rep.per_frame]
    rows.append(dict(frame_index="all", mse=rep.mse, mae=rep.mae, ssim=rep.ssim))
    if o["out"]:
        with Path(o["out"]).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["frame_index", "mse", "mae", "ssim"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    print(f"model {stack.config.model}: mse {rep.mse:.6f} mae {rep.mae:.6f} ssim {rep.ssim:.4f} "
          f"on {len(data)} sequences")
    print(f"copy-last-frame baseline: mse {base.mse:.6f} mae {base.mae:.6f} ssim {base.ssim:.4f}")
    return EXIT_OK


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6, 8 bits per sample; grey frames are written as equal RGB."""
    img = np.asarray(frame, dtype=np.float64)
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ConfigError(f"PPM needs 1 or 3 channels, got shape {frame.shape}")
    px = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def cmd_predict(o: dict) -> int:
    stack = _load(o["checkpoint"])
    data = _read_data(o["data"])
    _check_data(stack.config, data, f"checkpoint {o['checkpoint']}")
    k = o["k"]
    if k < 1:
        raise ConfigError("--k must be at least 1")
    n_seed = o["seed-frames"] if o["seed-frames"] is not None else data.frames - k
    if not 1 <= n_seed <= data.frames:
        raise ConfigError(f"--seed-frames must lie in [1, {data.frames}], got {n_seed}")
    n = len(data) if o["limit"] in (0, None) else min(o["limit"], len(data))
    out = Path(o["out-dir"])
    (out / "pred").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    preds = predict_future(stack, data.data[:n, :n_seed], k)
    written = 0
    for s in range(n):
        for j in range(k):
            t = n_seed + j
            write_ppm(out / "pred" / f"seq{s:04d}_t{t:02d}.ppm", preds[s, j])
            written += 1
            if t < data.frames:
                write_ppm(out / "truth" / f"seq{s:04d}_t{t:02d}.ppm", data.data[s, t])
    print(f"wrote {written} predicted frames ({k} per sequence, {n} sequences) to {out / 'pred'}")
    return EXIT_OK


def cmd_audit_params(o: dict) -> int:
    config = _stack_config(o)
    report = audit_config(config)
    shape_bad, notes = compare_published(o["preset"], report)
    print(f"preset {o['preset']}  model {config.model}  peephole {config.peephole_mode}")
    print(f"{'layer':>5}  {'kernel':<11} {'shape':<20} {'bias':>5} {'params':>10}")
    for r in report.rows:
        print(f"{r.layer:>5}  {r.kernel:<11} {str(r.shape):<20} {r.bias:>5} {r.n_params:>10,}")
    print(f"biases per layer: {report.layer_biases()}")
    print(f"total: {report.total:,}")
    for line in shape_bad:
        print(f"SHAPE MISMATCH {line}")
    for line in notes:
        print(f"DISCREPANCY {line}")
    status = EXIT_FAIL if shape_bad else EXIT_OK
    if o["expect"] is not None and o["expect"] != report.total:
        print(f"EXPECT FAILED: expected {o['expect']:,}, kernel rows sum to {report.total:,}")
        status = EXIT_FAIL
    return status


def cmd_gradcheck(o: dict) -> int:
    hook = gc.corrupted_backward(o["corrupt-op"]) if o["corrupt-op"] else contextlib.nullcontext()
    if o["corrupt-op"] and o["corrupt-op"] not in gc.ad.OPS:
        raise ConfigError(f"unknown op kind {o['corrupt-op']!r}")
    rows = []
    with hook:
        if o["models"] is None:
            rows += gc.check_ops(h=o["h"], seed=o["seed"])
            models = cz.MODEL_IDS
        else:
            models = tuple(cz.resolve_model_id(m) for m in o["models"])
        rows += gc.check_models(models, h=o["h"], tol=o["tol"], seed=o["seed"],
                                peephole_mode=o["peephole-mode"], gate_activation=o["gate-activation"])
        if o["models"] is None:
            rows.append(gc.check_stack(h=o["h"], tol=o["tol"], seed=o["seed"]))
    print(f"{'check':<26} {'max_rel_err':>12} {'tol':>8} {'checked':>8} {'kink_margin':>12}  result")
    for r in rows:
        rep = r.report
        print(f"{r.name:<26} {rep.max_rel_error:>12.3e} {rep.tol:>8.0e} {rep.n_checked:>8} "
              f"{rep.kink_margin:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def cmd_zoo(o: dict) -> int:
    data = _read_data(o["data"])
    train_set, test_set = data.split(o["holdout"])
    tc = _train_config(o)
    models = tuple(o["models"])
    status = EXIT_OK
    with Path(o["out"]).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ZOO_COLUMNS))
        w.writeheader()
        for m in models:
            try:
                config = _stack_config(o, model=m)
                _check_data(config, data, f"zoo {m}")
                row = run_model(config, train_set, test_set, tc)
            except (PredgateError, ValueError, FloatingPointError) as exc:
                row = failed_row(m, exc)
                status = EXIT_FAIL
                print(f"{m}: FAILED {row['error']}", file=sys.stderr)
            w.writerow({k: _fmt(v) for k, v in row.items()})
            fh.flush()
            if not row["error"]:
                print(f"{row['model']:>4} params {row['params']:>9,} mse {row['mse']:.5f} "
                      f"mae {row['mae']:.5f} ssim {row['ssim']:.4f} ({row['train_wall_ms'] / 1000:.1f}s)")
    return status


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "audit-params": cmd_audit_params, "gradcheck": cmd_gradcheck, "zoo": cmd_zoo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        options = resolve_options(args.command, given, args.config)
        return HANDLERS[args.command](options)
    except TrainingError as exc:
        print(f"predgate {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"predgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"predgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
