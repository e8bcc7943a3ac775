"""Command line: train, eval, predict, gradcheck, synth.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (SynthConfig, fit_samples, generate_synthetic, load_dataset, load_pgm,
                   preprocess, save_pgm, write_dataset)
from .gradcheck import run_gradcheck
from .model import ModelConfig, load_checkpoint
from .serialize import FormatError, save_tensor
from .train import NumericalError, TrainConfig, evaluate, predict, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _split(samples, val_fraction):
    n_val = int(round(len(samples) * val_fraction))
    if n_val < 1 or len(samples) - n_val < 2:
        raise UsageError(f"cannot hold out {val_fraction:.0%} of {len(samples)} samples for validation")
    return samples[:-n_val], samples[-n_val:]


def cmd_train(args) -> int:
    model_cfg = ModelConfig.from_dict(_read_json(args.model_config)) if args.model_config else ModelConfig()
    model_cfg.validate()
    tc = _read_json(args.train_config) if args.train_config else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc.update(checkpoint_path=str(out / "best.ckpt"), log_path=str(out / "train_log.jsonl"))
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    train_cfg = TrainConfig.from_dict(tc)

    samples = fit_samples(load_dataset(args.data), model_cfg.input_size)
    if args.val_data:
        train_set, val_set = samples, fit_samples(load_dataset(args.val_data), model_cfg.input_size)
    else:
        train_set, val_set = _split(samples, args.val_fraction)

    def progress(r):
        val = f" val_dsc={r.val['dsc']:.4f}" if r.val else ""
        print(f"epoch {r.epoch:3d} step {r.step:5d} loss={r.loss:.4f} lr={r.lr:.2e} "
              f"train_dsc={r.train_dsc:.4f}{val} t={r.wall_clock:.0f}s", flush=True)

    result = train(model_cfg, train_cfg, train_set, val_set, progress=progress)
    (out / "model_config.json").write_text(json.dumps(model_cfg.to_dict(), indent=2))
    (out / "train_config.json").write_text(json.dumps(train_cfg.to_dict(), indent=2))
    print(f"best val DSC {result.best_dsc:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {train_cfg.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = fit_samples(load_dataset(args.data), model.cfg.input_size)
    report = evaluate(model, samples)
    text = report.to_json(include_per_sample=args.per_sample)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = preprocess(load_pgm(args.image), model.cfg.input_size)
    probs, mask = predict(model, image)
    save_pgm(mask, args.out)
    prob_path = args.prob_out or str(Path(args.out).with_suffix(".prob.s3tu"))
    save_tensor(probs, prob_path)
    print(f"mask -> {args.out} ({int(mask.sum())} foreground px); probabilities -> {prob_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = run_gradcheck(args.scope, seed=args.seed or 0)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failing: {failed}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_samples is not None:
        cfg["n_samples"] = args.n_samples
    synth = SynthConfig.from_dict(cfg)
    manifest = write_dataset(generate_synthetic(synth), args.out)
    (Path(args.out) / "synth_config.json").write_text(json.dumps(synth.to_dict(), indent=2))
    print(f"{synth.n_samples} samples -> {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s3tunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train a model")
    p.add_argument("--model-config", help="ModelConfig JSON (defaults if omitted)")
    p.add_argument("--train-config", help="TrainConfig JSON (defaults if omitted)")
    p.add_argument("--data", required=True, help="manifest JSON list or SynthConfig JSON object")
    p.add_argument("--val-data", help="separate validation data; otherwise a tail split is held out")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=int, help="override TrainConfig.epochs")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the MetricReport JSON here")
    p.add_argument("--per-sample", action="store_true", help="include per-sample rows in the report")

    p = add("predict", cmd_predict, "segment one PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="mask PGM path")
    p.add_argument("--prob-out", help="probability tensor path (default <out>.prob.s3tu)")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--scope", default="all", help="block name or 'all'")

    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FormatError, FileNotFoundError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
