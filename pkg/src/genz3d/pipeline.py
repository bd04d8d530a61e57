"""End-to-end zero-shot pipeline: backbone, generator, biased classifier.

The flow is: train the backbone on seen-class scenes, train a conditional
generator on the backbone's features, generate features for unseen classes,
train the final classifier on the generated (plus, in the generalised
setting, real seen) features, and predict with calibrated softmax scores.

Two knobs fight the seen-class bias: an unseen-class weight on the classifier
loss (beta) and calibrated stacking at prediction time (epsilon). Both are
chosen by a sequential grid search that never touches test unseen labels.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .backbone import PointNetBackbone
from .data import (
    STRUCTURAL_CLASSES,
    assert_inductive,
    inductive_filter,
    make_validation_splits,
    split_scenes_by_labels,
)
from .evaluation import ConfusionMatrix, build_report, harmonic_mean
from .generators import DaeGenerator, GmmnGenerator, build_classifier_trainset
from .validation import (
    ConfigError,
    TrainingError,
    as_labels,
    as_matrix,
    check_fitted,
)

BETA_GRID = (1.0, 5.0, 10.0, 50.0, 100.0)
EPSILON_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.995)


@dataclass(frozen=True)
class ZslSplit:
    """Class roster partitioned into seen and unseen names."""

    roster: tuple
    seen: tuple
    unseen: tuple

    def __post_init__(self):
        object.__setattr__(self, "roster", tuple(self.roster))
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", tuple(self.unseen))
        if len(set(self.roster)) != len(self.roster):
            raise ConfigError("duplicate class names in roster")
        if not self.seen or not self.unseen:
            raise ConfigError("both seen and unseen must be non-empty")
        missing = (set(self.seen) | set(self.unseen)) - set(self.roster)
        if missing:
            raise ConfigError(f"classes {sorted(missing)} not in the roster")
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ConfigError(f"classes {sorted(overlap)} are both seen and unseen")

    def id(self, name):
        return self.roster.index(name)

    @property
    def seen_ids(self):
        return tuple(sorted(self.id(n) for n in self.seen))

    @property
    def unseen_ids(self):
        return tuple(sorted(self.id(n) for n in self.unseen))


@dataclass(frozen=True)
class BiasConfig:
    """Bias-reduction knobs: loss weight on unseen, calibration on seen."""

    beta: float = 50.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.beta < 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def calibrated_stacking(scores, seen_mask, epsilon):
    """Subtract epsilon from the seen-class columns of a score matrix.

    No clamping and no renormalisation; epsilon zero returns an exact copy.
    """
    scores = as_matrix(scores, "scores")
    seen_mask = np.asarray(seen_mask, dtype=bool)
    if seen_mask.shape != (scores.shape[1],):
        raise ValueError("seen_mask must mark each score column")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    out = scores.copy()
    out[:, seen_mask] -= epsilon
    return out


class FeatureClassifier(BaseEstimator):
    """Softmax classifier over backbone features with an unseen-class weight.

    ``hidden`` is a tuple of hidden widths; the default is a single dense
    layer. Cross-entropy terms of unseen-class rows are multiplied by
    ``unseen_weight``; a weight of one is bit-identical to unweighted
    training. Ties at prediction argmax resolve to the lowest class id.
    """

    def __init__(self, hidden=(), epochs=30, batch_size=64, learning_rate=1e-3,
                 unseen_weight=1.0, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.unseen_weight = unseen_weight
        self.seed = seed

    def fit(self, features, labels, classes, unseen=()):
        """Train on features with roster-id labels; classes fixes the outputs."""
        features = as_matrix(features, "features")
        labels = as_labels(labels, n=features.shape[0])
        if self.unseen_weight < 1:
            raise ConfigError(
                f"unseen weight must be >= 1, got {self.unseen_weight}"
            )
        self.classes_ = tuple(sorted(int(c) for c in classes))
        local = {c: i for i, c in enumerate(self.classes_)}
        bad = set(labels.tolist()) - set(self.classes_)
        if bad:
            raise TrainingError(f"labels {sorted(bad)} outside declared classes")
        targets = np.array([local[int(l)] for l in labels])
        weights = np.ones(len(self.classes_))
        for c in unseen:
            if int(c) in local:
                weights[local[int(c)]] = self.unseen_weight
        self.unseen_ = tuple(sorted(int(c) for c in unseen if int(c) in local))
        rng = np.random.default_rng(self.seed)
        widths = [features.shape[1], *self.hidden, len(self.classes_)]
        activations = ["relu"] * len(self.hidden) + ["identity"]
        self.net_ = nn.Mlp.create(widths, activations, rng)
        params = self.net_.parameters()
        state = nn.AdamState(params, learning_rate=self.learning_rate)
        n = features.shape[0]
        self.fit_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            total, batches = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                logits, caches = nn.mlp_forward(self.net_, features[idx])
                loss, d_logits = nn.softmax_cross_entropy(
                    logits, targets[idx], class_weights=weights
                )
                _, grads = nn.mlp_backward(self.net_, caches, d_logits)
                nn.adam_step(params, grads, state)
                total += loss
                batches += 1
            self.fit_history_.append(total / batches)
        return self

    def predict_scores(self, features):
        """Softmax probabilities, one column per entry of ``classes_``."""
        check_fitted(self, "net_")
        features = as_matrix(features, "features")
        return nn.softmax(self.net_.forward(features))

    def seen_column_mask(self):
        check_fitted(self, "net_")
        unseen = set(self.unseen_)
        return np.array([c not in unseen for c in self.classes_])

    def predict(self, features, epsilon=0.0):
        """Calibrated prediction: stack scores, argmax, map to roster ids."""
        scores = calibrated_stacking(
            self.predict_scores(features), self.seen_column_mask(), epsilon
        )
        return np.asarray(self.classes_)[scores.argmax(axis=1)]

    def save(self, path):
        check_fitted(self, "net_")
        meta = {
            "kind": "classifier",
            "classes": " ".join(str(c) for c in self.classes_),
            "unseen": " ".join(str(c) for c in self.unseen_),
            "unseen_weight": repr(float(self.unseen_weight)),
        }
        nn.save_checkpoint(path, {"net": self.net_}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "classifier":
            raise TrainingError(f"{path}: not a classifier checkpoint")
        model = cls(unseen_weight=float(meta["unseen_weight"]))
        model.net_ = nets["net"]
        model.classes_ = tuple(int(c) for c in meta["classes"].split())
        model.unseen_ = tuple(int(c) for c in meta["unseen"].split())
        model.fit_history_ = []
        return model


class ZslPipeline(BaseEstimator):
    """Backbone + generator + biased classifier, fit end to end.

    ``setting`` is "zsl" (classifier sees generated unseen features only) or
    "gzsl" (real seen features are added). Scenes containing unseen-class
    points are discarded before any training; the count is kept in
    ``discarded_``. ``epsilon`` only affects prediction, so it can be changed
    after fitting without retraining.
    """

    def __init__(self, task="segmentation", setting="gzsl", generator="gmmn",
                 feature_dim=64, noise_dim=32, hidden=128,
                 backbone_epochs=30, generator_epochs=40, classifier_epochs=30,
                 batch_size=64, learning_rate=1e-3,
                 beta=50.0, epsilon=0.0, per_class=500, total_budget=None,
                 corruption=0.1, seed=0):
        self.task = task
        self.setting = setting
        self.generator = generator
        self.feature_dim = feature_dim
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.backbone_epochs = backbone_epochs
        self.generator_epochs = generator_epochs
        self.classifier_epochs = classifier_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta = beta
        self.epsilon = epsilon
        self.per_class = per_class
        self.total_budget = total_budget
        self.corruption = corruption
        self.seed = seed

    def fit(self, scenes, split, prototypes):
        self._fit_representation(scenes, split, prototypes)
        self._fit_classifier()
        return self

    def _fit_representation(self, scenes, split, prototypes):
        """Steps independent of beta: backbone, real features, generator."""
        self._prepare(scenes, split, prototypes)
        self._fit_backbone()
        self._fit_generator()
        return self

    def _prepare(self, scenes, split, prototypes):
        """Validate the knobs, filter the scenes, stash training state."""
        if self.task not in ("segmentation", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.setting not in ("zsl", "gzsl"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.generator not in ("gmmn", "dae"):
            raise ConfigError(f"unknown generator {self.generator!r}")
        BiasConfig(self.beta, self.epsilon)  # validates the knobs
        self.split_ = split
        missing = [n for n in split.seen + split.unseen
                   if n not in prototypes.classes]
        if missing:
            raise ConfigError(f"no prototypes for classes {missing}")
        self.prototypes_ = prototypes
        clean, contaminated = split_scenes_by_labels(scenes, split.unseen_ids)
        self.discarded_ = len(contaminated)
        if not clean:
            raise TrainingError("every scene was discarded by the inductive filter")
        assert_inductive(clean, split.seen_ids, "backbone training")
        self.clean_ = clean
        return self

    def _fit_backbone(self):
        check_fitted(self, "clean_")
        backbone = PointNetBackbone(
            mode=self.task, feature_dim=self.feature_dim,
            epochs=self.backbone_epochs, learning_rate=self.learning_rate,
            seed=self.seed,
        )
        backbone.fit(self.clean_, self.split_.seen_ids)
        return self._adopt_backbone(backbone)

    def _adopt_backbone(self, backbone):
        """Install a trained backbone (fresh or from a checkpoint)."""
        check_fitted(self, "clean_")
        self.backbone_ = backbone
        self.real_features_, self.real_labels_ = \
            backbone.extract_features(self.clean_)
        return self

    def _fit_generator(self):
        check_fitted(self, "real_features_")
        split = self.split_
        seen_ids = split.seen_ids
        seen_protos = self.prototypes_.matrix(
            [split.roster[i] for i in seen_ids])
        if self.generator == "gmmn":
            generator = GmmnGenerator(
                noise_dim=self.noise_dim, hidden=self.hidden,
                epochs=self.generator_epochs, batch_size=self.batch_size,
                learning_rate=self.learning_rate, seed=self.seed + 1,
            )
        else:
            generator = DaeGenerator(
                noise_dim=self.noise_dim, hidden=self.hidden,
                corruption=self.corruption,
                epochs=self.generator_epochs, batch_size=self.batch_size,
                learning_rate=self.learning_rate, seed=self.seed + 1,
            )
        generator.fit(self.real_features_, self.real_labels_,
                      seen_ids, seen_protos)
        return self._adopt_generator(generator)

    def _adopt_generator(self, generator):
        check_fitted(self, "real_features_")
        self.generator_ = generator
        return self

    def _fit_classifier(self):
        """Beta-dependent step: generate unseen features, train the classifier."""
        check_fitted(self, "generator_")
        split = self.split_
        unseen_protos = {
            i: self.prototypes_[split.roster[i]] for i in split.unseen_ids
        }
        trainset = build_classifier_trainset(
            self.generator_, self.setting, self.task, unseen_protos,
            real_features=self.real_features_, real_labels=self.real_labels_,
            per_class=self.per_class, total_budget=self.total_budget,
            seed=self.seed + 3,
        )
        self.trainset_summary_ = {
            "rows": int(trainset.labels.size),
            "generated": int(np.count_nonzero(trainset.provenance == "generated")),
            "real": int(np.count_nonzero(trainset.provenance == "real")),
        }
        classes = sorted(set(trainset.labels.tolist()))
        self.classifier_ = FeatureClassifier(
            epochs=self.classifier_epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, unseen_weight=self.beta,
            seed=self.seed + 2,
        )
        self.classifier_.fit(trainset.features, trainset.labels, classes,
                             unseen=split.unseen_ids)
        return self

    def _scene_features(self, scene):
        if self.task == "classification":
            return self.backbone_.global_feature(scene.points)[None, :]
        return self.backbone_.point_features(scene.points)

    def predict_scene(self, scene):
        """Roster ids per point (segmentation) or for the cloud (classification)."""
        check_fitted(self, "classifier_")
        pred = self.classifier_.predict(self._scene_features(scene),
                                        epsilon=self.epsilon)
        return int(pred[0]) if self.task == "classification" else pred

    def score_scenes(self, scenes):
        """Uncalibrated scores and ground truth, concatenated over scenes."""
        check_fitted(self, "classifier_")
        scores, gts = [], []
        for scene in scenes:
            scores.append(self.classifier_.predict_scores(
                self._scene_features(scene)))
            if self.task == "classification":
                gts.append(np.array([scene.cloud_label()]))
            else:
                gts.append(scene.labels)
        return np.vstack(scores), np.concatenate(gts)

    def evaluate(self, scenes, metadata=None):
        """Predict every scene and build a metrics report over the roster."""
        check_fitted(self, "classifier_")
        split = self.split_
        cm = ConfusionMatrix(split.roster)
        for scene in scenes:
            if self.task == "classification":
                gt = np.array([scene.cloud_label()])
                pred = np.array([self.predict_scene(scene)])
            else:
                gt = scene.labels
                pred = self.predict_scene(scene)
            cm.accumulate(gt, pred)
        meta = {"task": self.task, "setting": self.setting,
                "beta": self.beta, "epsilon": self.epsilon}
        if metadata:
            meta.update(metadata)
        return build_report(cm, split.seen, split.unseen, task=self.task,
                            metadata=meta)


# ----- bias-parameter search --------------------------------------------


@dataclass
class GridRow:
    stage: str  # "beta", "epsilon" or "joint"
    beta: float
    epsilon: float
    split_index: int
    seen_measure: float
    unseen_measure: float
    objective: float


@dataclass
class GridSearchResult:
    beta: float
    epsilon: float
    rows: list = field(default_factory=list)
    beta_means: dict = field(default_factory=dict)
    epsilon_means: dict = field(default_factory=dict)


def _measure_pair(scores, gts, classes, seen_mask, epsilon,
                  train_names, val_names, roster, task):
    """(train measure, val measure, harmonic mean) at one epsilon."""
    stacked = calibrated_stacking(scores, seen_mask, epsilon)
    preds = np.asarray(classes)[stacked.argmax(axis=1)]
    cm = ConfusionMatrix(roster)
    cm.accumulate(gts, preds)
    if task == "segmentation":
        s = cm.miou(train_names)
        u = cm.miou(val_names)
    else:
        s = cm.mean_class_accuracy(train_names)
        u = cm.mean_class_accuracy(val_names)
    return s, u, harmonic_mean(s, u)


def grid_search_bias(scenes, split, prototypes, pipeline_params=None,
                     beta_grid=BETA_GRID, epsilon_grid=EPSILON_GRID,
                     n_splits=3, seed=0, joint=False, threads=1,
                     excluded=None):
    """Sequential search for the bias knobs on seen-class data only.

    Validation splits hold out seen classes to play the unseen role. Per
    split, the backbone and generator are trained once on the scenes that
    survive the validation-class filter; only the classifier is retrained per
    beta. Scores on the held-out (filtered-out) scenes are cached, so the
    epsilon stage replays predictions without any retraining. The objective
    is the harmonic mean between the train-class and validation-class
    measures. Stage one picks beta at epsilon zero; stage two sweeps epsilon
    at the chosen beta. ``joint=True`` instead picks the best pair over the
    full product, still from the cached scores. Ties resolve to the earliest
    grid entry. Results do not depend on ``threads``. ``excluded`` names
    classes never drawn as validation classes; it defaults to the ubiquitous
    structural ones.
    """
    assert_inductive(scenes, split.seen_ids, "grid search")
    params = dict(pipeline_params or {})
    task = params.get("task", "segmentation")
    if excluded is None:
        excluded = [c for c in STRUCTURAL_CLASSES if c in split.seen]
    class_splits = make_validation_splits(split.seen, excluded, n_splits, seed)

    def run_split(index):
        train_names, val_names = class_splits[index]
        pseudo = ZslSplit(roster=split.roster, seen=train_names,
                          unseen=val_names)
        _, held_out = split_scenes_by_labels(scenes, pseudo.unseen_ids)
        if not held_out:
            raise ConfigError(
                f"validation split {index}: no scenes contain the held-out "
                f"classes {list(val_names)}"
            )
        pipe = ZslPipeline(**params)
        pipe.set_params(beta=1.0, epsilon=0.0)
        pipe._fit_representation(scenes, pseudo, prototypes)
        cache = {}
        for beta in beta_grid:
            pipe.set_params(beta=beta)
            pipe._fit_classifier()
            scores, gts = pipe.score_scenes(held_out)
            cache[beta] = (
                scores, gts, pipe.classifier_.classes_,
                pipe.classifier_.seen_column_mask(),
            )
        return train_names, val_names, cache

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            split_runs = list(pool.map(run_split, range(len(class_splits))))
    else:
        split_runs = [run_split(i) for i in range(len(class_splits))]

    rows = []

    def sweep(stage, beta, epsilon):
        values = []
        for index, (train_names, val_names, cache) in enumerate(split_runs):
            scores, gts, classes, seen_mask = cache[beta]
            s, u, obj = _measure_pair(
                scores, gts, classes, seen_mask, epsilon,
                train_names, val_names, split.roster, task,
            )
            rows.append(GridRow(stage, beta, epsilon, index, s, u, obj))
            values.append(obj)
        return float(np.mean(values))

    if joint:
        joint_means = {}
        for beta in beta_grid:
            for epsilon in epsilon_grid:
                joint_means[(beta, epsilon)] = sweep("joint", beta, epsilon)
        best = max(joint_means, key=lambda k: joint_means[k])
        beta_means = {b: joint_means[(b, 0.0)] for b in beta_grid
                      if (b, 0.0) in joint_means}
        eps_means = {e: joint_means[(best[0], e)] for e in epsilon_grid}
        return GridSearchResult(best[0], best[1], rows, beta_means, eps_means)

    beta_means = {beta: sweep("beta", beta, 0.0) for beta in beta_grid}
    best_beta = max(beta_grid, key=lambda b: beta_means[b])
    eps_means = {eps: sweep("epsilon", best_beta, eps) for eps in epsilon_grid}
    best_eps = max(epsilon_grid, key=lambda e: eps_means[e])
    return GridSearchResult(best_beta, best_eps, rows, beta_means, eps_means)


# ----- supervised reference runs ------------------------------------------


REFERENCE_MODES = ("full_supervision", "zsl_backbone", "zsl_trivial")


def run_reference(mode, train_scenes, test_scenes, split, task="segmentation",
                  feature_dim=64, backbone_epochs=30, classifier_epochs=30,
                  batch_size=64, learning_rate=1e-3, seed=0):
    """Supervised upper and lower bounds around the zero-shot pipeline.

    full_supervision: backbone and classifier trained on everything.
    zsl_backbone: backbone restricted to seen-class scenes, classifier still
    supervised on all classes (isolates the feature-quality gap).
    zsl_trivial: both restricted to seen, so unseen mIoU is zero by
    construction.
    """
    if mode not in REFERENCE_MODES:
        raise ConfigError(f"unknown reference mode {mode!r}")
    all_ids = tuple(sorted(split.seen_ids + split.unseen_ids))
    backbone = PointNetBackbone(mode=task, feature_dim=feature_dim,
                                epochs=backbone_epochs,
                                learning_rate=learning_rate, seed=seed)
    if mode == "full_supervision":
        backbone.fit(train_scenes, all_ids)
    else:
        clean = inductive_filter(train_scenes, split.unseen_ids)
        if not clean:
            raise TrainingError("inductive filter discarded every scene")
        assert_inductive(clean, split.seen_ids, f"{mode} backbone training")
        backbone.fit(clean, split.seen_ids)
    if mode == "zsl_trivial":
        features, labels = backbone.extract_features(
            inductive_filter(train_scenes, split.unseen_ids))
        classes = split.seen_ids
    else:
        features, labels = backbone.extract_features(train_scenes)
        classes = all_ids
    classifier = FeatureClassifier(epochs=classifier_epochs,
                                   batch_size=batch_size,
                                   learning_rate=learning_rate, seed=seed + 2)
    classifier.fit(features, labels, classes)
    cm = ConfusionMatrix(split.roster)
    for scene in test_scenes:
        feats = (backbone.global_feature(scene.points)[None, :]
                 if task == "classification"
                 else backbone.point_features(scene.points))
        pred = classifier.predict(feats)
        gt = (np.array([scene.cloud_label()])
              if task == "classification" else scene.labels)
        cm.accumulate(gt, pred)
    return build_report(cm, split.seen, split.unseen, task=task,
                        metadata={"mode": mode})
