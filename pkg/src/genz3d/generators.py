"""Conditional feature generators and the classifier training sets they feed.

Both generators map (noise, class prototype) to backbone-feature space, so
features can be synthesised for classes whose points were never observed.

GMMN: a conditional MLP trained to minimise the biased (V-statistic) squared
maximum mean discrepancy between generated and real per-class features, summed
over Gaussian kernels at several bandwidths.

DAE: a denoising autoencoder whose decoder is conditioned on the prototype;
trained with mean squared reconstruction error, then sampled by feeding the
decoder standard-normal latents.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from sklearn.base import BaseEstimator

from . import nn
from .validation import (
    InductiveViolationError,
    TrainingError,
    as_labels,
    as_matrix,
    check_fitted,
)

DEFAULT_BANDWIDTH_MULTIPLIERS = (1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_GENERATED_PER_CLASS = 500


def _kernel_matrices(x, y, bandwidths):
    x2 = (x * x).sum(axis=1)
    y2 = (y * y).sum(axis=1)
    d2 = np.maximum(x2[:, None] + y2[None, :] - 2.0 * (x @ y.T), 0.0)
    return [np.exp(-d2 / (2.0 * s * s)) for s in bandwidths]


def mmd_biased(x, y, bandwidths):
    """Biased squared MMD summed over Gaussian kernel bandwidths.

    Uses the V-statistic (diagonal terms included):
      sum_s [ mean K_s(x,x) + mean K_s(y,y) - 2 mean K_s(x,y) ].
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError("x and y must share the feature dimension")
    bandwidths = [float(s) for s in bandwidths]
    if not bandwidths or any(s <= 0 for s in bandwidths):
        raise ValueError("bandwidths must be positive")
    total = 0.0
    for kxx, kyy, kxy in zip(
        _kernel_matrices(x, x, bandwidths),
        _kernel_matrices(y, y, bandwidths),
        _kernel_matrices(x, y, bandwidths),
    ):
        total += kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    return float(total)


def mmd_biased_grad(x, y, bandwidths):
    """(mmd, d mmd / d x) for the biased estimate above.

    d/dx_a mean K(x,x) = -(2/n^2) sum_j K[a,j] (x_a - x_j) / s^2
    d/dx_a mean K(x,y) = -(1/nm) sum_j K[a,j] (x_a - y_j) / s^2
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    bandwidths = [float(s) for s in bandwidths]
    n, m = x.shape[0], y.shape[0]
    value = 0.0
    grad = np.zeros_like(x)
    for s, kxx, kyy, kxy in zip(
        bandwidths,
        _kernel_matrices(x, x, bandwidths),
        _kernel_matrices(y, y, bandwidths),
        _kernel_matrices(x, y, bandwidths),
    ):
        value += kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
        s2 = s * s
        # sum_j K[a,j] (x_a - x_j) = rowsum(K)*x_a - K @ x
        within = kxx.sum(axis=1)[:, None] * x - kxx @ x
        cross = kxy.sum(axis=1)[:, None] * x - kxy @ y
        grad += (-2.0 / (n * n * s2)) * within + (2.0 / (n * m * s2)) * cross
    return float(value), grad


def median_pairwise_distance(features, cap=2000, seed=0):
    """Median Euclidean distance between feature rows (subsampled above cap)."""
    features = as_matrix(features, "features")
    if features.shape[0] < 2:
        raise TrainingError("need at least two features for the median heuristic")
    if features.shape[0] > cap:
        idx = np.random.default_rng(seed).choice(
            features.shape[0], size=cap, replace=False
        )
        features = features[idx]
    med = float(np.median(pdist(features)))
    if med == 0.0:
        raise TrainingError("degenerate features: zero median pairwise distance")
    return med


class _GeneratorBase(BaseEstimator):
    """Shared fit-time bookkeeping for both generator families."""

    def _check_training_inputs(self, features, labels, classes, prototype_matrix):
        features = as_matrix(features, "features")
        labels = as_labels(labels, n=features.shape[0])
        classes = tuple(int(c) for c in classes)
        protos = as_matrix(prototype_matrix, "prototype_matrix")
        if protos.shape[0] != len(classes):
            raise ValueError("one prototype row per declared class is required")
        bad = set(labels.tolist()) - set(classes)
        if bad:
            raise InductiveViolationError(
                f"generator training: labels {sorted(bad)} outside the declared "
                "class set"
            )
        return features, labels, classes, protos

    def sample(self, prototype, n, seed):
        """Generate n features conditioned on one prototype vector.

        Pure function of (parameters, prototype, seed, n).
        """
        check_fitted(self, "feature_dim_")
        prototype = np.asarray(prototype, dtype=np.float64).ravel()
        if prototype.shape != (self.prototype_dim_,):
            raise ValueError(
                f"prototype must have dim {self.prototype_dim_}, "
                f"got {prototype.shape}"
            )
        if n == 0:
            return np.zeros((0, self.feature_dim_))
        z = np.random.default_rng(seed).standard_normal((n, self.noise_dim))
        return self._decode(z, np.tile(prototype, (n, 1)))


class GmmnGenerator(_GeneratorBase):
    """Conditional MLP generator trained by minimising biased MMD per class."""

    def __init__(self, noise_dim=32, hidden=128,
                 bandwidth_multipliers=DEFAULT_BANDWIDTH_MULTIPLIERS,
                 epochs=60, batch_size=64, learning_rate=1e-3, seed=0):
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.bandwidth_multipliers = bandwidth_multipliers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _decode(self, z, protos):
        return self.net_.forward(np.hstack([z, protos]))

    def fit(self, features, labels, classes, prototype_matrix):
        """Match generated to real features per class (labels are roster ids).

        Kernel bandwidths are frozen before the first update: the configured
        multipliers times the median pairwise distance of the real features.
        """
        features, labels, classes, protos = self._check_training_inputs(
            features, labels, classes, prototype_matrix
        )
        self.feature_dim_ = features.shape[1]
        self.prototype_dim_ = protos.shape[1]
        base = median_pairwise_distance(features, seed=self.seed)
        self.bandwidths_ = tuple(m * base for m in self.bandwidth_multipliers)
        rng = np.random.default_rng(self.seed)
        self.net_ = nn.Mlp.create(
            [self.noise_dim + self.prototype_dim_, self.hidden, self.feature_dim_],
            ["relu", "identity"], rng,
        )
        params = self.net_.parameters()
        state = nn.AdamState(params, learning_rate=self.learning_rate)
        by_class = [np.flatnonzero(labels == c) for c in classes]
        trainable = [i for i, idx in enumerate(by_class) if idx.size > 0]
        if not trainable:
            raise TrainingError("no training features for any declared class")
        self.fit_history_ = []
        for _ in range(self.epochs):
            epoch_total = 0.0
            for i in trainable:
                idx = by_class[i]
                pick = rng.choice(idx, size=self.batch_size,
                                  replace=idx.size < self.batch_size)
                real = features[pick]
                z = rng.standard_normal((self.batch_size, self.noise_dim))
                gen_in = np.hstack([z, np.tile(protos[i], (self.batch_size, 1))])
                generated, caches = nn.mlp_forward(self.net_, gen_in)
                value, d_gen = mmd_biased_grad(generated, real, self.bandwidths_)
                _, grads = nn.mlp_backward(self.net_, caches, d_gen)
                nn.adam_step(params, grads, state)
                epoch_total += value
            self.fit_history_.append(epoch_total / len(trainable))
        self.classes_ = classes
        return self

    def save(self, path):
        check_fitted(self, "feature_dim_")
        meta = {
            "kind": "generator",
            "type": "gmmn",
            "noise_dim": str(self.noise_dim),
            "feature_dim": str(self.feature_dim_),
            "prototype_dim": str(self.prototype_dim_),
            "classes": " ".join(str(c) for c in self.classes_),
            "bandwidths": " ".join(repr(float(b)) for b in self.bandwidths_),
        }
        nn.save_checkpoint(path, {"net": self.net_}, meta)


class DaeGenerator(_GeneratorBase):
    """Denoising autoencoder with a prototype-conditioned decoder."""

    def __init__(self, noise_dim=32, hidden=128, corruption=0.1,
                 epochs=60, batch_size=64, learning_rate=1e-3, seed=0):
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.corruption = corruption
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _decode(self, z, protos):
        return self.decoder_.forward(np.hstack([z, protos]))

    def fit(self, features, labels, classes, prototype_matrix):
        """Reconstruct corrupted features through a prototype-conditioned decoder."""
        features, labels, classes, protos = self._check_training_inputs(
            features, labels, classes, prototype_matrix
        )
        self.feature_dim_ = features.shape[1]
        self.prototype_dim_ = protos.shape[1]
        rng = np.random.default_rng(self.seed)
        self.encoder_ = nn.Mlp.create(
            [self.feature_dim_, self.hidden, self.noise_dim],
            ["relu", "identity"], rng,
        )
        self.decoder_ = nn.Mlp.create(
            [self.noise_dim + self.prototype_dim_, self.hidden, self.feature_dim_],
            ["relu", "identity"], rng,
        )
        local = {c: i for i, c in enumerate(classes)}
        proto_rows = protos[[local[int(l)] for l in labels]]
        params = self.encoder_.parameters() + self.decoder_.parameters()
        state = nn.AdamState(params, learning_rate=self.learning_rate)
        n = features.shape[0]
        self.fit_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            epoch_total = 0.0
            n_batches = 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                x = features[idx]
                noisy = x + self.corruption * rng.standard_normal(x.shape)
                loss, grads = self._loss_and_grads(noisy, x, proto_rows[idx])
                nn.adam_step(params, grads, state)
                epoch_total += loss
                n_batches += 1
            self.fit_history_.append(epoch_total / n_batches)
        self.classes_ = classes
        return self

    def _loss_and_grads(self, noisy, clean, proto_rows):
        latent, enc_caches = nn.mlp_forward(self.encoder_, noisy)
        dec_in = np.hstack([latent, proto_rows])
        recon, dec_caches = nn.mlp_forward(self.decoder_, dec_in)
        diff = recon - clean
        loss = float(np.mean(diff * diff))
        d_recon = 2.0 * diff / diff.size
        d_dec_in, dec_grads = nn.mlp_backward(self.decoder_, dec_caches, d_recon)
        d_latent = d_dec_in[:, :self.noise_dim]
        _, enc_grads = nn.mlp_backward(self.encoder_, enc_caches, d_latent)
        return loss, enc_grads + dec_grads

    def save(self, path):
        check_fitted(self, "feature_dim_")
        meta = {
            "kind": "generator",
            "type": "dae",
            "noise_dim": str(self.noise_dim),
            "feature_dim": str(self.feature_dim_),
            "prototype_dim": str(self.prototype_dim_),
            "classes": " ".join(str(c) for c in self.classes_),
            "corruption": repr(float(self.corruption)),
        }
        nn.save_checkpoint(
            path, {"encoder": self.encoder_, "decoder": self.decoder_}, meta
        )


def load_generator(path):
    """Load a generator checkpoint; dispatches on its recorded type."""
    nets, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise TrainingError(f"{path}: not a generator checkpoint")
    common = dict(noise_dim=int(meta["noise_dim"]))
    if meta["type"] == "gmmn":
        model = GmmnGenerator(**common)
        model.net_ = nets["net"]
        model.bandwidths_ = tuple(float(b) for b in meta["bandwidths"].split())
    elif meta["type"] == "dae":
        model = DaeGenerator(corruption=float(meta["corruption"]), **common)
        model.encoder_ = nets["encoder"]
        model.decoder_ = nets["decoder"]
    else:
        raise TrainingError(f"{path}: unknown generator type {meta['type']!r}")
    model.feature_dim_ = int(meta["feature_dim"])
    model.prototype_dim_ = int(meta["prototype_dim"])
    model.classes_ = tuple(int(c) for c in meta["classes"].split())
    model.fit_history_ = []
    return model


@dataclass
class GeneratedSet:
    """Classifier training material: features, roster labels, provenance."""

    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray  # "generated" or "real" per row

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.provenance.shape != (n,):
            raise ValueError("features, labels, provenance lengths differ")


def _generation_counts(targets, real_labels, total_budget):
    """Split a generation budget across target classes by scene frequency.

    Seen-class frequencies come from the real labels; every target (unseen)
    class is assigned the mean seen-class frequency. Rounding distributes the
    remainder to the largest fractional parts, lowest class id first on ties.
    """
    real_labels = as_labels(real_labels, name="real_labels")
    seen_ids, seen_counts = np.unique(real_labels, return_counts=True)
    if seen_ids.size == 0:
        raise TrainingError("no real labels to derive class frequencies from")
    mean_freq = float(seen_counts.mean())
    freqs = np.array([mean_freq for _ in targets], dtype=np.float64)
    shares = freqs / freqs.sum() * total_budget
    counts = np.floor(shares).astype(int)
    remainder = total_budget - counts.sum()
    frac = shares - counts
    order = sorted(range(len(targets)), key=lambda i: (-frac[i], targets[i]))
    for i in order[:remainder]:
        counts[i] += 1
    return {c: max(1, int(k)) for c, k in zip(targets, counts)}


def build_classifier_trainset(generator, setting, task, unseen_prototypes,
                              real_features=None, real_labels=None,
                              per_class=DEFAULT_GENERATED_PER_CLASS,
                              total_budget=None, seed=0):
    """Assemble the final classifier's training set.

    ``unseen_prototypes`` maps roster class id -> prototype vector; those are
    the generation targets. In the zero-shot setting the result contains only
    generated unseen-class rows. In the generalised setting every real seen
    feature is appended exactly once. For segmentation, per-class generation
    counts follow the scene-frequency rule of ``_generation_counts``;
    classification generates ``per_class`` rows per unseen class.
    """
    if setting not in ("zsl", "gzsl"):
        raise ValueError(f"unknown setting {setting!r}")
    if task not in ("classification", "segmentation"):
        raise ValueError(f"unknown task {task!r}")
    if not unseen_prototypes:
        raise ValueError("no generation targets")
    targets = sorted(int(c) for c in unseen_prototypes)
    if task == "segmentation":
        if real_labels is None:
            raise TrainingError(
                "segmentation generation counts need real seen labels"
            )
        budget = total_budget if total_budget is not None else per_class * len(targets)
        counts = _generation_counts(targets, real_labels, budget)
    else:
        counts = {c: per_class for c in targets}
    child_seeds = np.random.SeedSequence(seed).generate_state(len(targets))
    feats, labels, prov = [], [], []
    for cls, child in zip(targets, child_seeds):
        gen = generator.sample(unseen_prototypes[cls], counts[cls], int(child))
        feats.append(gen)
        labels.append(np.full(counts[cls], cls))
        prov.append(np.full(counts[cls], "generated"))
    if setting == "gzsl":
        if real_features is None or real_labels is None:
            raise TrainingError("the generalised setting needs real seen features")
        real_features = as_matrix(real_features, "real_features")
        real_labels = as_labels(real_labels, n=real_features.shape[0])
        overlap = set(real_labels.tolist()) & set(targets)
        if overlap:
            raise InductiveViolationError(
                f"real features carry unseen class ids {sorted(overlap)}"
            )
        feats.append(real_features)
        labels.append(real_labels)
        prov.append(np.full(real_features.shape[0], "real"))
    return GeneratedSet(
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        provenance=np.concatenate(prov),
    )
