"""Generative zero-shot classification and semantic segmentation of point clouds.

A small PointNet-style backbone turns clouds into features, a conditional
generator (moment matching or denoising autoencoder) synthesizes features
for classes that have no training data, and a linear classifier trained on
the mix predicts over all classes, with the seen-class bias countered by
loss weighting and calibrated stacking.
"""

from .backbone import PointNetBackbone
from .baselines import DeviseBaseline, ZslpcBaseline, knn_unseen_preference
from .data import (
    DEFAULT_ROSTER,
    Scene,
    SynthConfig,
    generate_synthetic,
    inductive_filter,
    read_dataset,
    synthetic_prototypes,
    write_dataset,
)
from .evaluation import (
    ConfusionMatrix,
    MetricsReport,
    build_report,
    harmonic_mean,
    render_report,
)
from .generators import (
    DaeGenerator,
    GmmnGenerator,
    build_classifier_trainset,
    load_generator,
    mmd_biased,
)
from .pipeline import (
    FeatureClassifier,
    ZslPipeline,
    ZslSplit,
    calibrated_stacking,
    grid_search_bias,
    run_reference,
)
from .prototypes import PrototypeSet, ideal_prototypes, load_prototypes
from .validation import (
    ConfigError,
    EvaluationError,
    GenZ3DError,
    InductiveViolationError,
    PrototypeFormatError,
    SceneFormatError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConfusionMatrix",
    "DEFAULT_ROSTER",
    "DaeGenerator",
    "DeviseBaseline",
    "EvaluationError",
    "FeatureClassifier",
    "GenZ3DError",
    "GmmnGenerator",
    "InductiveViolationError",
    "MetricsReport",
    "PointNetBackbone",
    "PrototypeFormatError",
    "PrototypeSet",
    "Scene",
    "SceneFormatError",
    "SynthConfig",
    "TrainingError",
    "ZslPipeline",
    "ZslSplit",
    "ZslpcBaseline",
    "build_classifier_trainset",
    "build_report",
    "calibrated_stacking",
    "generate_synthetic",
    "grid_search_bias",
    "harmonic_mean",
    "ideal_prototypes",
    "inductive_filter",
    "knn_unseen_preference",
    "load_generator",
    "load_prototypes",
    "mmd_biased",
    "read_dataset",
    "render_report",
    "run_reference",
    "synthetic_prototypes",
    "write_dataset",
]
