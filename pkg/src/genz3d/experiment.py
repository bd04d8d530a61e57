"""Experiment configuration files, stage orchestration and artifacts.

A run reads a dataset directory pair (train/test), a class split file and a
prototype file, then trains backbone, generator and classifier in sequence
and writes checkpoints plus evaluation reports into an output directory.
Stages can also be run one at a time against the same output directory; a
later stage picks up the earlier checkpoints and produces bit-identical
results to a one-shot run.

Configuration lives in an INI file with sections [data], [pipeline], [bias]
and [experiment]; every key has a default except the four data paths.
"""

import configparser
import os
from dataclasses import dataclass, fields

from .backbone import PointNetBackbone
from .baselines import DeviseBaseline, ZslpcBaseline
from .data import inductive_filter, read_dataset, read_split_file
from .evaluation import render_report_csv, render_report_text
from .generators import load_generator
from .pipeline import (
    FeatureClassifier,
    ZslPipeline,
    ZslSplit,
    grid_search_bias,
    run_reference,
)
from .prototypes import ideal_prototypes, load_prototypes
from .validation import ConfigError

OUTPUT_ROOT_ENV = "GENZ3D_OUTPUT_ROOT"

BACKBONE_FILE = "backbone.net"
GENERATOR_FILE = "generator.net"
CLASSIFIER_FILE = "classifier.net"
REPORT_TEXT_FILE = "report.txt"
REPORT_CSV_FILE = "report.csv"
CURVES_FILE = "curves.csv"
RESOLVED_FILE = "resolved.ini"


@dataclass
class ExperimentConfig:
    # [data]
    train_dataset: str = ""
    test_dataset: str = ""
    split: str = ""
    prototypes: str = ""
    task: str = "segmentation"
    # [pipeline]
    setting: str = "gzsl"
    generator: str = "gmmn"
    feature_dim: int = 64
    noise_dim: int = 32
    hidden: int = 128
    backbone_epochs: int = 30
    generator_epochs: int = 40
    classifier_epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    per_class: int = 500
    total_budget: int = 0  # zero means the per-class default applies
    corruption: float = 0.1
    seed: int = 0
    # [bias]
    beta: float = 50.0
    epsilon: float = 0.0
    grid_search: bool = False
    joint: bool = False
    n_splits: int = 3
    # [experiment]
    output: str = "run"
    ideal_prototypes: bool = False
    allow_zsl_segmentation: bool = False
    threads: int = 1


_SECTIONS = {
    "data": ("train_dataset", "test_dataset", "split", "prototypes", "task"),
    "pipeline": ("setting", "generator", "feature_dim", "noise_dim", "hidden",
                 "backbone_epochs", "generator_epochs", "classifier_epochs",
                 "batch_size", "learning_rate", "per_class", "total_budget",
                 "corruption", "seed"),
    "bias": ("beta", "epsilon", "grid_search", "joint", "n_splits"),
    "experiment": ("output", "ideal_prototypes", "allow_zsl_segmentation",
                   "threads"),
}

_BOOLEANS = {"true": True, "false": False, "yes": True, "no": False,
             "1": True, "0": False, "on": True, "off": False}


def _parse_value(key, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOLEANS:
                raise ValueError(raw)
            return _BOOLEANS[raw.lower()]
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}"
        ) from None


def load_experiment_config(path):
    """Read an INI experiment file, rejecting unknown sections and keys."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    config = ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in section [{section}]"
                )
            kind = kinds[types[key]] if isinstance(types[key], str) \
                else types[key]
            setattr(config, key, _parse_value(key, raw, kind))
    return config


def resolve_output(path):
    """Prefix relative output paths with the output-root env var, if set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _require(value, name):
    if not value:
        raise ConfigError(f"config key {name} is required for this command")
    return value


@dataclass
class DataBundle:
    train_scenes: list
    test_scenes: list
    split: ZslSplit
    prototypes: object
    excluded: tuple


def load_bundle(config, need_test=True):
    """Load datasets, class split and prototypes; cross-check the rosters."""
    train_scenes, roster = read_dataset(_require(config.train_dataset,
                                                 "data.train_dataset"))
    test_scenes = []
    if need_test:
        test_scenes, test_roster = read_dataset(
            _require(config.test_dataset, "data.test_dataset"))
        if test_roster != roster:
            raise ConfigError(
                "train and test datasets disagree on the class roster"
            )
    sections = read_split_file(_require(config.split, "data.split"))
    split = ZslSplit(roster, sections["seen"], sections["unseen"])
    prototypes = load_prototypes(_require(config.prototypes,
                                          "data.prototypes"))
    missing = [n for n in split.seen + split.unseen
               if n not in prototypes.classes]
    if missing:
        raise ConfigError(f"prototype file lacks classes {missing}")
    return DataBundle(train_scenes, test_scenes, split, prototypes,
                      sections["validation-excluded"])


def _validate_task_setting(config):
    if (config.task == "segmentation" and config.setting == "zsl"
            and not config.allow_zsl_segmentation):
        raise ConfigError(
            "the zero-shot setting for segmentation scores unseen classes "
            "only; set allow_zsl_segmentation = true to run it anyway"
        )
    if config.ideal_prototypes and config.grid_search:
        raise ConfigError(
            "ideal prototypes force beta = 1 and epsilon = 0; disable the "
            "grid search"
        )


def pipeline_params(config):
    """ZslPipeline keyword arguments shared by runs and the grid search."""
    return dict(
        task=config.task, setting=config.setting, generator=config.generator,
        feature_dim=config.feature_dim, noise_dim=config.noise_dim,
        hidden=config.hidden, backbone_epochs=config.backbone_epochs,
        generator_epochs=config.generator_epochs,
        classifier_epochs=config.classifier_epochs,
        batch_size=config.batch_size, learning_rate=config.learning_rate,
        per_class=config.per_class,
        total_budget=config.total_budget or None,
        corruption=config.corruption, seed=config.seed,
    )


def build_pipeline(config, beta=None, epsilon=None):
    pipe = ZslPipeline(**pipeline_params(config))
    pipe.set_params(beta=config.beta if beta is None else beta,
                    epsilon=config.epsilon if epsilon is None else epsilon)
    return pipe


def _swap_in_ideal_prototypes(config, pipe, bundle):
    """Replace file prototypes with feature-space class means (oracle mode)."""
    split = bundle.split
    pipe.prototypes_ = ideal_prototypes(
        pipe.backbone_, bundle.train_scenes, split.roster,
        split.seen, split.unseen, task=config.task,
    )
    pipe.set_params(beta=1.0, epsilon=0.0)


def write_resolved(out_dir, beta, epsilon):
    parser = configparser.ConfigParser(interpolation=None)
    parser["bias"] = {"beta": repr(float(beta)),
                      "epsilon": repr(float(epsilon))}
    with open(os.path.join(out_dir, RESOLVED_FILE), "w",
              encoding="utf-8") as fh:
        parser.write(fh)


def read_resolved(out_dir):
    """(beta, epsilon) recorded by an earlier stage, or None."""
    path = os.path.join(out_dir, RESOLVED_FILE)
    if not os.path.exists(path):
        return None
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    try:
        return (float(parser["bias"]["beta"]),
                float(parser["bias"]["epsilon"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed resolved values ({exc})") from None


def render_curves_csv(rows):
    lines = ["stage,beta,epsilon,split,seen_measure,unseen_measure,objective"]
    for r in rows:
        lines.append(
            f"{r.stage},{r.beta:g},{r.epsilon:g},{r.split_index},"
            f"{r.seen_measure:.6g},{r.unseen_measure:.6g},{r.objective:.6g}"
        )
    return "\n".join(lines) + "\n"


def _write_report_files(out_dir, report):
    with open(os.path.join(out_dir, REPORT_TEXT_FILE), "w",
              encoding="utf-8") as fh:
        fh.write(render_report_text(report))
    with open(os.path.join(out_dir, REPORT_CSV_FILE), "w",
              encoding="utf-8") as fh:
        fh.write(render_report_csv(report))


@dataclass
class RunResult:
    out_dir: str
    report: object
    beta: float
    epsilon: float
    grid: object = None


def run_experiment(config):
    """Full pipeline run: train all stages, evaluate, persist artifacts.

    All validation and data loading happen before anything is written, so a
    failing configuration leaves no partial output directory behind.
    """
    _validate_task_setting(config)
    bundle = load_bundle(config)
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    pipe = build_pipeline(config)
    pipe._prepare(bundle.train_scenes, bundle.split, bundle.prototypes)
    pipe._fit_backbone()
    grid = None
    if config.ideal_prototypes:
        _swap_in_ideal_prototypes(config, pipe, bundle)
    elif config.grid_search:
        clean = inductive_filter(bundle.train_scenes,
                                 bundle.split.unseen_ids)
        grid = grid_search_bias(
            clean, bundle.split, bundle.prototypes,
            pipeline_params=pipeline_params(config),
            n_splits=config.n_splits, seed=config.seed, joint=config.joint,
            threads=config.threads, excluded=bundle.excluded or None,
        )
        pipe.set_params(beta=grid.beta, epsilon=grid.epsilon)
    pipe._fit_generator()
    pipe._fit_classifier()
    report = pipe.evaluate(bundle.test_scenes)
    os.makedirs(out_dir, exist_ok=True)
    pipe.backbone_.save(os.path.join(out_dir, BACKBONE_FILE))
    pipe.generator_.save(os.path.join(out_dir, GENERATOR_FILE))
    pipe.classifier_.save(os.path.join(out_dir, CLASSIFIER_FILE))
    write_resolved(out_dir, pipe.beta, pipe.epsilon)
    if grid is not None:
        with open(os.path.join(out_dir, CURVES_FILE), "w",
                  encoding="utf-8") as fh:
            fh.write(render_curves_csv(grid.rows))
    _write_report_files(out_dir, report)
    return RunResult(out_dir, report, pipe.beta, pipe.epsilon, grid)


def run_reference_experiment(config, mode):
    """One of the supervised reference runs; writes report files only."""
    bundle = load_bundle(config)
    report = run_reference(
        mode, bundle.train_scenes, bundle.test_scenes, bundle.split,
        task=config.task, feature_dim=config.feature_dim,
        backbone_epochs=config.backbone_epochs,
        classifier_epochs=config.classifier_epochs,
        batch_size=config.batch_size, learning_rate=config.learning_rate,
        seed=config.seed,
    )
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    os.makedirs(out_dir, exist_ok=True)
    _write_report_files(out_dir, report)
    return RunResult(out_dir, report, 1.0, 0.0)


def _checkpoint_path(out_dir, filename):
    path = os.path.join(out_dir, filename)
    if not os.path.exists(path):
        raise ConfigError(
            f"missing checkpoint {path}; run the earlier stages first"
        )
    return path


def train_backbone_stage(config):
    _validate_task_setting(config)
    bundle = load_bundle(config, need_test=False)
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    pipe = build_pipeline(config)
    pipe._prepare(bundle.train_scenes, bundle.split, bundle.prototypes)
    pipe._fit_backbone()
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, BACKBONE_FILE)
    pipe.backbone_.save(path)
    return path


def train_generator_stage(config):
    _validate_task_setting(config)
    bundle = load_bundle(config, need_test=False)
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    pipe = build_pipeline(config)
    pipe._prepare(bundle.train_scenes, bundle.split, bundle.prototypes)
    pipe._adopt_backbone(
        PointNetBackbone.load(_checkpoint_path(out_dir, BACKBONE_FILE)))
    if config.ideal_prototypes:
        _swap_in_ideal_prototypes(config, pipe, bundle)
    pipe._fit_generator()
    path = os.path.join(out_dir, GENERATOR_FILE)
    pipe.generator_.save(path)
    return path


def train_classifier_stage(config):
    _validate_task_setting(config)
    bundle = load_bundle(config, need_test=False)
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    pipe = build_pipeline(config)
    pipe._prepare(bundle.train_scenes, bundle.split, bundle.prototypes)
    pipe._adopt_backbone(
        PointNetBackbone.load(_checkpoint_path(out_dir, BACKBONE_FILE)))
    if config.ideal_prototypes:
        _swap_in_ideal_prototypes(config, pipe, bundle)
    else:
        resolved = read_resolved(out_dir)
        if resolved is not None:
            pipe.set_params(beta=resolved[0], epsilon=resolved[1])
    pipe._adopt_generator(
        load_generator(_checkpoint_path(out_dir, GENERATOR_FILE)))
    pipe._fit_classifier()
    path = os.path.join(out_dir, CLASSIFIER_FILE)
    pipe.classifier_.save(path)
    write_resolved(out_dir, pipe.beta, pipe.epsilon)
    return path


def grid_search_stage(config):
    """Standalone bias search; records the chosen knobs for later stages."""
    _validate_task_setting(config)
    if config.ideal_prototypes:
        raise ConfigError("grid search is pointless with ideal prototypes")
    bundle = load_bundle(config, need_test=False)
    out_dir = resolve_output(_require(config.output, "experiment.output"))
    clean = inductive_filter(bundle.train_scenes, bundle.split.unseen_ids)
    grid = grid_search_bias(
        clean, bundle.split, bundle.prototypes,
        pipeline_params=pipeline_params(config),
        n_splits=config.n_splits, seed=config.seed, joint=config.joint,
        threads=config.threads, excluded=bundle.excluded or None,
    )
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CURVES_FILE), "w",
              encoding="utf-8") as fh:
        fh.write(render_curves_csv(grid.rows))
    write_resolved(out_dir, grid.beta, grid.epsilon)
    return grid


def evaluate_checkpoints(config, checkpoint_dir, out_dir=None):
    """Re-evaluate saved backbone and classifier on the test dataset.

    Produces byte-identical report files to those written by the run that
    created the checkpoints.
    """
    _validate_task_setting(config)
    bundle = load_bundle(config)
    checkpoint_dir = resolve_output(checkpoint_dir)
    pipe = build_pipeline(config)
    resolved = read_resolved(checkpoint_dir)
    if resolved is not None:
        pipe.set_params(beta=resolved[0], epsilon=resolved[1])
    pipe.split_ = bundle.split
    pipe.backbone_ = PointNetBackbone.load(
        _checkpoint_path(checkpoint_dir, BACKBONE_FILE))
    pipe.classifier_ = FeatureClassifier.load(
        _checkpoint_path(checkpoint_dir, CLASSIFIER_FILE))
    report = pipe.evaluate(bundle.test_scenes)
    target = resolve_output(out_dir) if out_dir else checkpoint_dir
    os.makedirs(target, exist_ok=True)
    _write_report_files(target, report)
    return RunResult(target, report, pipe.beta, pipe.epsilon)


def run_baseline(config, method, k=5, checkpoint_dir=None, out_dir=None):
    """Fit and evaluate one projection baseline over the same backbone."""
    _validate_task_setting(config)
    bundle = load_bundle(config)
    if checkpoint_dir:
        backbone = PointNetBackbone.load(
            _checkpoint_path(resolve_output(checkpoint_dir), BACKBONE_FILE))
    else:
        pipe = build_pipeline(config)
        pipe._prepare(bundle.train_scenes, bundle.split, bundle.prototypes)
        pipe._fit_backbone()
        backbone = pipe.backbone_
    if method == "devise":
        model = DeviseBaseline(
            k=k, epochs=config.classifier_epochs,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate, seed=config.seed,
        )
    elif method == "zslpc":
        model = ZslpcBaseline(k=k)
    else:
        raise ConfigError(f"unknown baseline method {method!r}")
    model.fit(bundle.train_scenes, bundle.split, bundle.prototypes, backbone)
    report = model.evaluate(bundle.test_scenes)
    target = resolve_output(out_dir) if out_dir \
        else resolve_output(_require(config.output, "experiment.output")) \
        + f"_{method}"
    os.makedirs(target, exist_ok=True)
    _write_report_files(target, report)
    return RunResult(target, report, 1.0, 0.0)
