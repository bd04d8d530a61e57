"""Point-cloud feature backbone: shared per-point MLP + coordinate-wise max.

The per-point MLP embeds each point independently; a coordinate-wise max over
the embeddings gives an order-invariant global feature. In segmentation mode a
head maps (global feature ‖ per-point embedding) to the per-point feature
space. Training attaches a linear classifier over the declared class ids and
minimises cross-entropy; that classifier is kept only as an auxiliary output,
downstream zero-shot classifiers are trained elsewhere.

Hidden layers are relu, feature-producing output layers are identity so the
generator target space is unconstrained.
"""

import numpy as np

from sklearn.base import BaseEstimator

from . import nn
from .validation import (
    InductiveViolationError,
    TrainingError,
    as_points,
    check_fitted,
)


def _normalize_cloud(points):
    """Center on the centroid and scale to unit max radius."""
    pts = as_points(points)
    centered = pts - pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius > 0.0:
        centered = centered / radius
    return centered


class PointNetBackbone(BaseEstimator):
    """Order-invariant feature extractor for clouds and scenes.

    mode="classification": one feature per cloud (the max-pooled embedding).
    mode="segmentation": one feature per point (head over global ‖ local).
    """

    def __init__(self, mode="segmentation", point_mlp_widths=(3, 32, 64),
                 feature_dim=64, head_hidden=64, epochs=30,
                 learning_rate=1e-3, seed=0):
        self.mode = mode
        self.point_mlp_widths = point_mlp_widths
        self.feature_dim = feature_dim
        self.head_hidden = head_hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed

    # ----- architecture -------------------------------------------------

    def _build(self, n_classes, rng):
        widths = list(self.point_mlp_widths)
        if widths[0] != 3:
            raise TrainingError("point MLP must take 3-D coordinates")
        acts = ["relu"] * (len(widths) - 2) + ["identity"]
        self.point_mlp_ = nn.Mlp.create(widths, acts, rng)
        embed = widths[-1]
        if self.mode == "segmentation":
            self.head_ = nn.Mlp.create(
                [2 * embed, self.head_hidden, self.feature_dim],
                ["relu", "identity"], rng,
            )
            out_dim = self.feature_dim
        else:
            self.head_ = None
            out_dim = embed
        self.classifier_ = nn.Mlp.create([out_dim, n_classes], ["identity"], rng)

    def _parameters(self):
        params = self.point_mlp_.parameters()
        if self.head_ is not None:
            params += self.head_.parameters()
        return params + self.classifier_.parameters()

    # ----- forward ------------------------------------------------------

    def _embed(self, points):
        """Per-point embeddings plus max-pool info; points already normalised."""
        h, caches = nn.mlp_forward(self.point_mlp_, points)
        argmax = h.argmax(axis=0)
        g = h[argmax, np.arange(h.shape[1])]
        return h, caches, argmax, g

    def global_feature(self, points):
        """Cloud-level feature: coordinate-wise max of per-point embeddings."""
        check_fitted(self, "point_mlp_")
        x = _normalize_cloud(points)
        h, _ = nn.mlp_forward(self.point_mlp_, x)
        return h.max(axis=0)

    def point_features(self, points):
        """Per-point features for segmentation: head(global ‖ local)."""
        check_fitted(self, "point_mlp_")
        if self.head_ is None:
            raise TrainingError("point_features needs a segmentation backbone")
        x = _normalize_cloud(points)
        h, _ = nn.mlp_forward(self.point_mlp_, x)
        g = h.max(axis=0)
        concat = np.hstack([np.tile(g, (h.shape[0], 1)), h])
        feats, _ = nn.mlp_forward(self.head_, concat)
        return feats

    def classify_features(self, features):
        """Auxiliary classifier over the trained class ids; returns roster ids."""
        check_fitted(self, "classifier_")
        logits = self.classifier_.forward(np.atleast_2d(features))
        local = logits.argmax(axis=1)
        return np.array([self.classes_[i] for i in local])

    def extract_features(self, scenes):
        """Features and roster labels for a list of scenes.

        Classification: one row per cloud. Segmentation: one row per point.
        """
        check_fitted(self, "point_mlp_")
        feats, labels = [], []
        for scene in scenes:
            if self.mode == "classification":
                feats.append(self.global_feature(scene.points)[None, :])
                labels.append(np.array([scene.cloud_label()]))
            else:
                feats.append(self.point_features(scene.points))
                labels.append(scene.labels)
        return np.vstack(feats), np.concatenate(labels)

    # ----- training -----------------------------------------------------

    def fit(self, scenes, classes):
        """Train on scenes whose labels all lie in ``classes`` (roster ids).

        Any label outside ``classes`` aborts before training starts: the
        backbone must never observe an unseen-class point.
        """
        if self.mode not in ("classification", "segmentation"):
            raise TrainingError(f"unknown mode {self.mode!r}")
        if not scenes:
            raise TrainingError("no training scenes")
        classes = tuple(int(c) for c in classes)
        allowed = set(classes)
        for i, scene in enumerate(scenes):
            present = set(int(l) for l in np.unique(scene.labels))
            bad = present - allowed
            if bad:
                raise InductiveViolationError(
                    f"backbone training: scene {i} contains class ids "
                    f"{sorted(bad)} outside the declared set"
                )
        self.classes_ = classes
        local = {c: i for i, c in enumerate(classes)}
        rng = np.random.default_rng(self.seed)
        self._build(len(classes), rng)
        params = self._parameters()
        state = nn.AdamState(params, learning_rate=self.learning_rate)
        prepared = []
        for scene in scenes:
            x = _normalize_cloud(scene.points)
            if self.mode == "classification":
                y = np.array([local[scene.cloud_label()]])
            else:
                y = np.array([local[int(l)] for l in scene.labels])
            prepared.append((x, y))
        self.fit_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(prepared))
            total = 0.0
            for idx in order:
                x, y = prepared[idx]
                loss, grads = self._scene_loss_and_grads(x, y)
                nn.adam_step(params, grads, state)
                total += loss
            self.fit_history_.append(total / len(prepared))
        return self

    def _scene_loss_and_grads(self, x, y):
        embed = self.point_mlp_.layers[-1].n_out
        h, pm_caches, argmax, g = self._embed(x)
        cols = np.arange(embed)
        if self.mode == "classification":
            logits, cls_caches = nn.mlp_forward(self.classifier_, g[None, :])
            loss, d_logits = nn.softmax_cross_entropy(logits, y)
            d_g, cls_grads = nn.mlp_backward(self.classifier_, cls_caches, d_logits)
            d_h = np.zeros_like(h)
            d_h[argmax, cols] = d_g[0]
            _, pm_grads = nn.mlp_backward(self.point_mlp_, pm_caches, d_h)
            return loss, pm_grads + cls_grads
        concat = np.hstack([np.tile(g, (h.shape[0], 1)), h])
        feats, head_caches = nn.mlp_forward(self.head_, concat)
        logits, cls_caches = nn.mlp_forward(self.classifier_, feats)
        loss, d_logits = nn.softmax_cross_entropy(logits, y)
        d_feats, cls_grads = nn.mlp_backward(self.classifier_, cls_caches, d_logits)
        d_concat, head_grads = nn.mlp_backward(self.head_, head_caches, d_feats)
        # the global feature fed every row: sum its gradient over rows, then
        # route it into the argmax points; the local path adds directly
        d_g = d_concat[:, :embed].sum(axis=0)
        d_h = d_concat[:, embed:].copy()
        d_h[argmax, cols] += d_g
        _, pm_grads = nn.mlp_backward(self.point_mlp_, pm_caches, d_h)
        return loss, pm_grads + head_grads + cls_grads

    # ----- persistence --------------------------------------------------

    def save(self, path):
        check_fitted(self, "point_mlp_")
        nets = {"point_mlp": self.point_mlp_, "classifier": self.classifier_}
        if self.head_ is not None:
            nets["head"] = self.head_
        meta = {
            "kind": "backbone",
            "mode": self.mode,
            "classes": " ".join(str(c) for c in self.classes_),
            "feature_dim": str(self.feature_dim),
        }
        nn.save_checkpoint(path, nets, meta)

    @classmethod
    def load(cls, path):
        nets, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "backbone":
            raise TrainingError(f"{path}: not a backbone checkpoint")
        model = cls(mode=meta["mode"], feature_dim=int(meta["feature_dim"]))
        model.point_mlp_ = nets["point_mlp"]
        model.classifier_ = nets["classifier"]
        model.head_ = nets.get("head")
        model.classes_ = tuple(int(c) for c in meta["classes"].split())
        model.point_mlp_widths = tuple(model.point_mlp_.widths)
        model.fit_history_ = []
        return model
