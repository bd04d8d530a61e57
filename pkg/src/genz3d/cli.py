"""Command line entry points.

Subcommands cover data synthesis, the individual training stages, full runs,
the bias grid search, baselines, re-evaluation from checkpoints, and report
rendering. Exit codes: 0 success, 1 usage, 2 configuration, 3 data,
4 training, 5 evaluation.
"""

import argparse
import os
import sys

from .data import (
    DEFAULT_ROSTER,
    STRUCTURAL_CLASSES,
    SynthConfig,
    generate_synthetic,
    synthetic_prototypes,
    write_dataset,
    write_split_file,
)
from .evaluation import parse_report_csv, render_report_text
from .experiment import (
    CURVES_FILE,
    evaluate_checkpoints,
    grid_search_stage,
    load_experiment_config,
    resolve_output,
    run_baseline,
    run_experiment,
    run_reference_experiment,
    train_backbone_stage,
    train_classifier_stage,
    train_generator_stage,
)
from .prototypes import PrototypeSet, save_prototypes
from .validation import (
    ConfigError,
    EvaluationError,
    InductiveViolationError,
    NotFittedError,
    PrototypeFormatError,
    SceneFormatError,
    TrainingError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this project reserves 2 for
    configuration problems, so usage errors exit with 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _names(raw):
    return tuple(n for n in (part.strip() for part in raw.split(",")) if n)


def cmd_synth(args):
    roster = _names(args.roster)
    unseen = _names(args.unseen)
    bad = [n for n in unseen if n not in roster]
    if bad:
        raise ConfigError(f"unseen classes {bad} are not in the roster")
    seen = tuple(n for n in roster if n not in set(unseen))
    if not seen or not unseen:
        raise ConfigError("the split needs both seen and unseen classes")
    config = SynthConfig(
        roster=roster, points_per_object=args.points_per_object,
        ground_points=args.ground_points, wall_points=args.wall_points,
        objects_per_scene=args.objects_per_scene, extent=args.extent,
        noise=args.noise,
    )
    scenes = generate_synthetic(config, args.mode, args.count, args.seed)
    out = resolve_output(args.out)
    write_dataset(out, scenes, roster)
    excluded = tuple(n for n in STRUCTURAL_CLASSES if n in seen)
    write_split_file(os.path.join(out, "split.txt"), seen, unseen, excluded)
    save_prototypes(os.path.join(out, "prototypes.txt"),
                    PrototypeSet(synthetic_prototypes(roster)))
    print(f"wrote {len(scenes)} {args.mode} scenes to {out}")
    print(f"seen: {', '.join(seen)}")
    print(f"unseen: {', '.join(unseen)}")
    return EXIT_OK


def _load_config(args):
    config = load_experiment_config(args.config)
    if getattr(args, "out", None):
        config.output = args.out
    if getattr(args, "threads", None):
        config.threads = args.threads
    if getattr(args, "generator", None):
        config.generator = args.generator
    if getattr(args, "setting", None):
        config.setting = args.setting
    if getattr(args, "grid_search", False):
        config.grid_search = True
    if getattr(args, "joint", False):
        config.joint = True
    if getattr(args, "allow_zsl_segmentation", False):
        config.allow_zsl_segmentation = True
    if getattr(args, "beta", None) is not None:
        config.beta = args.beta
    if getattr(args, "epsilon", None) is not None:
        config.epsilon = args.epsilon
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def cmd_run(args):
    config = _load_config(args)
    if args.mode == "pipeline":
        result = run_experiment(config)
        print(render_report_text(result.report))
        print(f"beta={result.beta:g} epsilon={result.epsilon:g}")
    else:
        result = run_reference_experiment(config,
                                          args.mode.replace("-", "_"))
        print(render_report_text(result.report))
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def cmd_grid_search(args):
    config = _load_config(args)
    grid = grid_search_stage(config)
    out = resolve_output(config.output)
    print(f"chosen beta={grid.beta:g} epsilon={grid.epsilon:g}")
    print(f"objective curves in {os.path.join(out, CURVES_FILE)}")
    return EXIT_OK


def cmd_train_backbone(args):
    print(f"wrote {train_backbone_stage(_load_config(args))}")
    return EXIT_OK


def cmd_train_generator(args):
    print(f"wrote {train_generator_stage(_load_config(args))}")
    return EXIT_OK


def cmd_train_classifier(args):
    print(f"wrote {train_classifier_stage(_load_config(args))}")
    return EXIT_OK


def cmd_baseline(args):
    config = _load_config(args)
    result = run_baseline(config, args.method, k=args.k,
                          checkpoint_dir=args.checkpoints, out_dir=args.out)
    print(render_report_text(result.report))
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    # resolve the checkpoint default from the file before --out overrides it
    config = load_experiment_config(args.config)
    checkpoints = args.checkpoints or config.output
    result = evaluate_checkpoints(config, checkpoints, out_dir=args.out)
    print(render_report_text(result.report))
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def cmd_report(args):
    try:
        with open(args.csv, encoding="utf-8") as fh:
            parsed = parse_report_csv(fh.read())
    except FileNotFoundError:
        raise SceneFormatError(f"report file not found: {args.csv}") from None
    lines = []
    for (metric, cls, subset), value in parsed.items():
        if metric == "meta":
            lines.append(f"# {cls}: {value}")
    for (metric, cls, subset), value in parsed.items():
        if metric == "meta":
            continue
        label = metric if not cls else f"{metric} {cls}"
        if subset:
            label += f" [{subset}]"
        lines.append(f"{label:<32} {100.0 * value:5.1f}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser():
    parser = CliParser(
        prog="genz3d",
        description="zero-shot 3d point cloud pipeline on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=CliParser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--mode", choices=("segmentation", "classification"),
                   default="segmentation")
    p.add_argument("--count", type=int, default=40, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--roster", default=",".join(DEFAULT_ROSTER),
                   help="comma separated class names")
    p.add_argument("--unseen", default="cone,ridden_cylinder",
                   help="comma separated unseen class names")
    p.add_argument("--points-per-object", type=int, default=96)
    p.add_argument("--ground-points", type=int, default=160)
    p.add_argument("--wall-points", type=int, default=96)
    p.add_argument("--objects-per-scene", type=int, default=4)
    p.add_argument("--extent", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    def add_config(p):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("run", help="train all stages and evaluate")
    add_config(p)
    p.add_argument("--mode", default="pipeline",
                   choices=("pipeline", "zsl-trivial", "zsl-backbone",
                            "full-supervision"))
    p.add_argument("--grid-search", action="store_true",
                   help="search beta and epsilon before the final fit")
    p.add_argument("--joint", action="store_true",
                   help="search the full beta x epsilon product")
    p.add_argument("--generator", choices=("gmmn", "dae"))
    p.add_argument("--setting", choices=("zsl", "gzsl"))
    p.add_argument("--threads", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-zsl-segmentation", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid-search", help="search the bias knobs")
    add_config(p)
    p.add_argument("--joint", action="store_true")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_grid_search)

    for name, fn in (("train-backbone", cmd_train_backbone),
                     ("train-generator", cmd_train_generator),
                     ("train-classifier", cmd_train_classifier)):
        p = sub.add_parser(name, help=f"run the {name.split('-')[1]} stage")
        add_config(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("baseline", help="fit and evaluate a baseline")
    add_config(p)
    p.add_argument("--method", required=True, choices=("devise", "zslpc"))
    p.add_argument("--k", type=int, default=5,
                   help="neighbours for the unseen-preference rule")
    p.add_argument("--checkpoints",
                   help="reuse a trained backbone from this directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="re-evaluate saved checkpoints")
    add_config(p)
    p.add_argument("--checkpoints",
                   help="checkpoint directory (default: config output)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a metrics CSV as text")
    p.add_argument("--csv", required=True, help="path to a report.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SceneFormatError, PrototypeFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, InductiveViolationError, NotFittedError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION


if __name__ == "__main__":
    sys.exit(main())
