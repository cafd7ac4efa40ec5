"""Command-line entry points.

Subcommands: generate | train | eval | ablate | sweep | visualize.
Exit codes: 0 success, 2 config fault, 3 data fault, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import experiments
from .experiments import (
    ExperimentConfig,
    ensure_dataset,
    load_arrays,
    load_config,
    run_ablation,
    run_sweep,
    run_training,
    run_variant,
    run_visualize,
)
from .faults import ConfigError, DataError, NumericError
from .model import load_checkpoint
from .synth import generate_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dranet",
        description="Reverse-attention compositional recognition experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="override config output_dir")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("generate", help="render the synthetic dataset + manifest")
    common(p)

    p = sub.add_parser("train", help="train a model on the generated dataset")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (report JSON + curve CSV)")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train and evaluate the full ablation ladder")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel variant workers")

    p = sub.add_parser("sweep", help="sweep one hyperparameter")
    common(p)
    p.add_argument("parameter", choices=experiments.SWEEPABLE)
    p.add_argument("values", help="comma-separated numeric values")
    p.add_argument("--checkpoint", default=None,
                   help="reuse a trained checkpoint (eta sweeps only)")

    p = sub.add_parser("visualize", help="export attention heatmaps for an image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="path to an input image")

    return parser


def _load(args) -> tuple[ExperimentConfig, Path]:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out_dir = Path(args.out) if args.out else Path(config.output_dir)
    return config, out_dir


def _cmd_generate(args) -> int:
    config, out_dir = _load(args)
    split, manifest = generate_dataset(config.generator, config.split,
                                       experiments.dataset_dir(out_dir))
    print(f"manifest: {manifest}")
    print(f"pairs: {len(split.seen_pairs) + len(split.unseen_pairs)} "
          f"(seen {len(split.seen_pairs)}, unseen {len(split.unseen_pairs)})")
    print(f"train samples: {len(split.train)}, test samples: {len(split.test)}")
    return 0


def _cmd_train(args) -> int:
    config, out_dir = _load(args)
    data = load_arrays(ensure_dataset(config, out_dir))
    result = run_training(config, data, out_dir / "run")
    report, curve = experiments._evaluate_arrays(
        result.params, result.model_config, data, config.fusion, config.num_biases)
    experiments.write_report(report, config.fusion, result.model_config.fusion_mode,
                             config.num_biases, out_dir / "run" / "report.json")
    experiments.write_curve(curve, out_dir / "run" / "curve.csv")
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint:  {result.best_checkpoint}")
    print(f"log: {result.log_path}")
    print(f"S={report.S:.4f} U={report.U:.4f} HM={report.HM:.4f} AUC={report.AUC:.4f}")
    return 0


def _cmd_eval(args) -> int:
    config, out_dir = _load(args)
    data = load_arrays(ensure_dataset(config, out_dir))
    params, model_config = load_checkpoint(args.checkpoint)
    report, curve = experiments._evaluate_arrays(
        params, model_config, data, config.fusion, config.num_biases)
    out_dir.mkdir(parents=True, exist_ok=True)
    experiments.write_report(report, config.fusion, model_config.fusion_mode,
                             config.num_biases, out_dir / "report.json")
    experiments.write_curve(curve, out_dir / "curve.csv")
    print(f"report: {out_dir / 'report.json'}")
    print(f"curve:  {out_dir / 'curve.csv'}")
    print(f"S={report.S:.4f} U={report.U:.4f} HM={report.HM:.4f} AUC={report.AUC:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    config, out_dir = _load(args)
    rows = run_ablation(config, out_dir, jobs=args.jobs)
    print(f"table: {out_dir / 'ablation.csv'}")
    for name, report in rows:
        print(f"{name:>20s}  S={report.S:.4f} U={report.U:.4f} "
              f"HM={report.HM:.4f} AUC={report.AUC:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    config, out_dir = _load(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep values must be numeric, got {args.values!r}") from None
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = run_sweep(config, args.parameter, values, out_dir, checkpoint=args.checkpoint)
    print(f"table: {out_dir / f'sweep_{args.parameter}.csv'}")
    for value, report in rows:
        print(f"{args.parameter}={value:g}  S={report.S:.4f} U={report.U:.4f} "
              f"HM={report.HM:.4f} AUC={report.AUC:.4f}")
    return 0


def _cmd_visualize(args) -> int:
    config, out_dir = _load(args)
    written = run_visualize(config, args.checkpoint, args.image, out_dir / "viz")
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "visualize": _cmd_visualize,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config fault: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data fault: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
