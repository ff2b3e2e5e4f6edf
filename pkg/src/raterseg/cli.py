"""Command-line entry point: ``raterseg {gen,train,eval,plot,selftest}``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage error.
Configuration precedence is defaults, then ``--config`` file, then flags.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import selftest, vstn
from .config import METHODS, ConfigError, RunConfig
from .evaluation import InputError, ModelStateError, confidence_map, disagreement_map, evaluate_model, predict_maps
from .nets import ConfigError as ArchError, init_params
from .synthetic import SPLITS, ConfigError as ManifestError, generate_dataset, read_dataset, write_dataset
from .trainer import (ContractError, TrainingAborted, save_checkpoint, load_checkpoint, train_independent_baseline,
                      train_joint, train_mc_dropout_baseline)

USAGE_ERRORS = (ConfigError, ArchError, ManifestError, ContractError)
RUNTIME_ERRORS = (OSError, vstn.FormatError, TrainingAborted, ModelStateError, InputError)

METRIC_HEADER = "epoch,ce,rec,kl,total"


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raterseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value file applied before flags")
    common.add_argument("--seed", type=_u64, metavar="U64")

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic multi-rater dataset")
    gen.add_argument("--out", required=True, metavar="DIR")

    train = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    train.add_argument("--data", required=True, metavar="DIR")
    train.add_argument("--out", required=True, metavar="DIR")
    train.add_argument("--method", choices=METHODS)
    train.add_argument("--epochs", type=_positive, metavar="E")

    for name, text in (("eval", "score confidence maps against the rater average"),
                       ("plot", "write PGM images of sampled segmentations")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True, metavar="PATH",
                       help="checkpoint file, or a directory of checkpoints")
        p.add_argument("--data", required=True, metavar="DIR")
        p.add_argument("--samples", type=_positive, metavar="M")
        p.add_argument("--split", choices=SPLITS)
    sub.choices["eval"].add_argument("--out", metavar="FILE", help="also write the score table here")
    sub.choices["plot"].add_argument("--out", required=True, metavar="DIR")
    sub.choices["plot"].add_argument("--sample", metavar="ID", help="sample id (default: first in split)")

    sub.add_parser("selftest", help="run gradient checks and the ELBO oracle")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update_from_file(args.config)
    for key in ("seed", "method", "epochs", "samples", "split"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.set(key, value)
    return cfg


# -- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _run_config(args)
    manifest = cfg.manifest()
    write_dataset(manifest, generate_dataset(manifest), args.out)
    print(f"wrote {args.out}: train={manifest.n_train} val={manifest.n_val} test={manifest.n_test} "
          f"raters={manifest.num_raters} size={manifest.height}x{manifest.width} seed={manifest.seed}")
    return 0


def write_metrics(path: Path, history: list[dict]) -> None:
    lines = [METRIC_HEADER]
    # repr of a Python float round-trips exactly
    lines += [",".join([str(h["epoch"])] + [repr(float(h[k])) for k in ("ce", "rec", "kl", "total")])
              for h in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest, data = read_dataset(args.data)
    arch, tcfg = cfg.arch(manifest), cfg.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.method == "joint":
        model, history = train_joint(init_params(arch, cfg.seed), data["train"], tcfg)
        save_checkpoint(model, out / "joint.ckpt")
        write_metrics(out / "metrics.csv", history)
    elif cfg.method == "independent":
        nets, logs = train_independent_baseline(data["train"], manifest.num_raters, tcfg, arch)
        for k, (net, log) in enumerate(zip(nets, logs)):
            save_checkpoint(net, out / f"rater{k}.ckpt")
            write_metrics(out / f"metrics_rater{k}.csv", log)
        history = logs[-1]
    else:
        net, history = train_mc_dropout_baseline(data["train"], tcfg, arch)
        save_checkpoint(net, out / "dropout.ckpt")
        write_metrics(out / "metrics.csv", history)
    print(f"trained {cfg.method} for {tcfg.epochs} epochs, final total={history[-1]['total']:.6f}")
    return 0


def load_model(path):
    """A checkpoint file, or a directory holding one joint/dropout checkpoint or K rater checkpoints."""
    path = Path(path)
    if not path.is_dir():
        return load_checkpoint(path)
    files = sorted(path.glob("*.ckpt"), key=lambda p: (len(p.name), p.name))
    if not files:
        raise OSError(f"no checkpoint files in {path}")
    models = [load_checkpoint(f) for f in files]
    return models[0] if len(models) == 1 else models


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = load_model(args.checkpoint)
    _, data = read_dataset(args.data)
    result = evaluate_model(model, data[cfg.split], cfg.samples, cfg.seed)
    table = result.table()
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 0


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit binary PGM with [0, 1] mapped linearly to [0, 255]."""
    img = np.asarray(values, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    pixels = np.round(255 * np.clip(img, 0, 1)).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens
    if magic != b"P5" or maxval != b"255":
        raise vstn.FormatError(f"{path}: not an 8-bit P5 image")
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(raw[pos + 1:], dtype=np.uint8).reshape(int(h), int(w))


def cmd_plot(args) -> int:
    cfg = _run_config(args)
    model = load_model(args.checkpoint)
    _, data = read_dataset(args.data)
    items = data[cfg.split]
    if args.sample is None:
        sample = items[0]
    else:
        matches = [s for s in items if s.sample_id == args.sample]
        if not matches:
            raise UsageError(f"no sample {args.sample!r} in split {cfg.split}")
        sample = matches[0]
    maps = predict_maps(model, sample.image, cfg.samples, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "input.pgm", sample.image)
    for i, m in enumerate(maps):
        write_pgm(out / f"sample{i:02d}.pgm", m)
    write_pgm(out / "confidence.pgm", confidence_map(maps).values)
    var = disagreement_map(maps) if len(maps) > 1 else np.zeros_like(maps[0])
    write_pgm(out / "disagreement.pgm", var)
    print(f"wrote {len(maps) + 3} images for {sample.sample_id} to {out}")
    return 0


def cmd_selftest(args) -> int:
    ok = True
    for name, passed, detail in selftest.run():
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "plot": cmd_plot, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"raterseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"raterseg {args.command}: training aborted: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"raterseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
