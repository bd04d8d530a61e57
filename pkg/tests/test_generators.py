import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genz3d import nn
from genz3d.generators import (
    DaeGenerator,
    GmmnGenerator,
    build_classifier_trainset,
    load_generator,
    median_pairwise_distance,
    mmd_biased,
    mmd_biased_grad,
)
from genz3d.validation import InductiveViolationError, TrainingError


def mmd_oracle(x, y, bandwidths):
    """Literal double-loop transcription of the biased estimate."""
    def k(a, b, s):
        return math.exp(-float(((a - b) ** 2).sum()) / (2.0 * s * s))

    total = 0.0
    for s in bandwidths:
        xx = sum(k(a, b, s) for a in x for b in x) / (len(x) * len(x))
        yy = sum(k(a, b, s) for a in y for b in y) / (len(y) * len(y))
        xy = sum(k(a, b, s) for a in x for b in y) / (len(x) * len(y))
        total += xx + yy - 2.0 * xy
    return total


def test_mmd_singleton_example():
    # two 1-d singletons at 0 and 1 with unit bandwidth: 2 - 2 exp(-1/2)
    value = mmd_biased([[0.0]], [[1.0]], [1.0])
    assert value == pytest.approx(0.7869386805747332, abs=1e-15)


def test_mmd_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, m, d = rng.integers(1, 11), rng.integers(1, 11), rng.integers(1, 7)
        x = rng.uniform(-5, 5, size=(n, d))
        y = rng.uniform(-5, 5, size=(m, d))
        bws = rng.choice([0.5, 1.0, 2.0, 4.0], size=rng.integers(1, 4),
                         replace=False)
        assert mmd_biased(x, y, bws) == pytest.approx(
            mmd_oracle(x, y, list(bws)), abs=1e-10)


def test_mmd_self_distance_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 5))
    assert abs(mmd_biased(x, x.copy(), [1.0, 2.0])) <= 1e-12


@given(
    st.lists(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
             min_size=1, max_size=5),
    st.lists(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
             min_size=1, max_size=5),
)
@settings(max_examples=60, deadline=None)
def test_mmd_symmetric_and_nonnegative(xs, ys):
    x, y = np.array(xs), np.array(ys)
    forward = mmd_biased(x, y, [0.5, 1.0])
    assert forward >= -1e-10
    assert forward == pytest.approx(mmd_biased(y, x, [0.5, 1.0]), abs=1e-12)


def test_mmd_rejects_bad_inputs():
    with pytest.raises(ValueError):
        mmd_biased([[0.0]], [[0.0, 1.0]], [1.0])
    with pytest.raises(ValueError):
        mmd_biased([[0.0]], [[1.0]], [])
    with pytest.raises(ValueError):
        mmd_biased([[0.0]], [[1.0]], [-1.0])


def test_mmd_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(5, 3))
    bws = [0.7, 1.3]

    def fun(params):
        value, grad = mmd_biased_grad(params[0], y, bws)
        return value, [grad]

    assert nn.grad_check(fun, [x]) < 1e-5


def test_median_pairwise_distance_small_example():
    # 1-d points 0, 1, 3: pairwise distances 1, 3, 2 -> median 2
    assert median_pairwise_distance(np.array([[0.0], [1.0], [3.0]])) == 2.0


def test_median_pairwise_distance_degenerate():
    with pytest.raises(TrainingError):
        median_pairwise_distance(np.ones((5, 3)))


def _toy_features(seed=0, per_class=40, dim=6):
    rng = np.random.default_rng(seed)
    centers = {0: 2.0, 1: -2.0}
    feats, labels = [], []
    for cls, mu in centers.items():
        feats.append(mu + 0.3 * rng.normal(size=(per_class, dim)))
        labels.append(np.full(per_class, cls))
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    return np.vstack(feats), np.concatenate(labels), (0, 1), protos


def test_gmmn_freezes_bandwidths_from_median():
    feats, labels, classes, protos = _toy_features()
    model = GmmnGenerator(epochs=1, batch_size=8, seed=0)
    model.fit(feats, labels, classes, protos)
    base = median_pairwise_distance(feats, seed=0)
    assert model.bandwidths_ == tuple(m * base for m in (1, 2, 4, 8, 16))


def test_gmmn_training_reduces_mmd():
    feats, labels, classes, protos = _toy_features()
    model = GmmnGenerator(epochs=40, batch_size=32, seed=1)
    model.fit(feats, labels, classes, protos)
    assert model.fit_history_[-1] < model.fit_history_[0]


def test_gmmn_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    net = nn.Mlp.create([4, 8, 3], ["relu", "identity"], rng)
    z = rng.normal(size=(6, 4))
    real = rng.normal(size=(7, 3))
    bws = [0.8, 1.6]

    def fun(params):
        generated, caches = nn.mlp_forward(net, z)
        value, d_gen = mmd_biased_grad(generated, real, bws)
        _, grads = nn.mlp_backward(net, caches, d_gen)
        return value, grads

    assert nn.grad_check(fun, net.parameters()) < 1e-4


def test_gmmn_rejects_label_outside_declared_classes():
    feats, labels, classes, protos = _toy_features()
    labels = labels.copy()
    labels[0] = 9
    model = GmmnGenerator(epochs=1)
    with pytest.raises(InductiveViolationError, match="9"):
        model.fit(feats, labels, classes, protos)
    assert not hasattr(model, "net_")


def test_sampling_is_pure_and_seeded():
    feats, labels, classes, protos = _toy_features()
    model = GmmnGenerator(epochs=2, batch_size=8, seed=0)
    model.fit(feats, labels, classes, protos)
    proto = np.array([0.5, 0.5])
    a = model.sample(proto, 12, seed=3)
    b = model.sample(proto, 12, seed=3)
    c = model.sample(proto, 12, seed=4)
    assert a.shape == (12, feats.shape[1])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_validates_prototype_dim():
    feats, labels, classes, protos = _toy_features()
    model = GmmnGenerator(epochs=1, batch_size=8).fit(feats, labels, classes, protos)
    with pytest.raises(ValueError):
        model.sample(np.zeros(5), 4, seed=0)


def test_dae_zero_corruption_overfits_small_set():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(10, 8))
    labels = np.zeros(10, dtype=int)
    protos = np.array([[1.0, -1.0]])
    model = DaeGenerator(noise_dim=8, hidden=128, corruption=0.0,
                         epochs=800, batch_size=10, learning_rate=3e-3, seed=0)
    model.fit(feats, labels, (0,), protos)
    assert model.fit_history_[-1] < 1e-3


def test_dae_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    model = DaeGenerator(noise_dim=3, hidden=6, seed=0)
    feats = rng.normal(size=(5, 4))
    labels = np.array([0, 0, 1, 1, 0])
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    model.fit(feats[:2], labels[:2], (0, 1), protos)  # builds the nets
    noisy = rng.normal(size=(5, 4))
    proto_rows = protos[labels]

    def fun(params):
        return model._loss_and_grads(noisy, feats, proto_rows)

    params = model.encoder_.parameters() + model.decoder_.parameters()
    assert nn.grad_check(fun, params) < 1e-4


def test_generator_checkpoint_round_trip(tmp_path):
    feats, labels, classes, protos = _toy_features()
    for model in (
        GmmnGenerator(epochs=2, batch_size=8, seed=0),
        DaeGenerator(epochs=2, batch_size=16, seed=0),
    ):
        model.fit(feats, labels, classes, protos)
        path = tmp_path / f"{type(model).__name__}.net"
        model.save(path)
        loaded = load_generator(path)
        proto = np.array([0.25, 0.75])
        assert np.array_equal(model.sample(proto, 6, seed=1),
                              loaded.sample(proto, 6, seed=1))
        assert loaded.classes_ == classes


def test_load_generator_rejects_other_kinds(tmp_path):
    path = tmp_path / "other.net"
    nn.save_checkpoint(path, {}, {"kind": "backbone"})
    with pytest.raises(TrainingError):
        load_generator(path)


class StubGenerator:
    """Deterministic stand-in so trainset tests stay fast."""

    def sample(self, prototype, n, seed):
        rng = np.random.default_rng(seed)
        return prototype[0] + rng.normal(size=(n, 4))


def test_trainset_zsl_classification_is_generated_unseen_only():
    out = build_classifier_trainset(
        StubGenerator(), "zsl", "classification",
        {5: np.array([1.0, 0.0]), 6: np.array([2.0, 0.0])},
        per_class=50, seed=0,
    )
    assert out.features.shape == (100, 4)
    assert set(out.labels.tolist()) == {5, 6}
    assert np.all(out.provenance == "generated")
    assert np.count_nonzero(out.labels == 5) == 50
    assert np.count_nonzero(out.labels == 6) == 50


def test_trainset_gzsl_appends_every_real_row_once():
    rng = np.random.default_rng(1)
    real = rng.normal(size=(30, 4))
    real_labels = rng.integers(0, 3, size=30)
    out = build_classifier_trainset(
        StubGenerator(), "gzsl", "classification",
        {5: np.array([1.0, 0.0])},
        real_features=real, real_labels=real_labels, per_class=20, seed=0,
    )
    assert out.features.shape == (50, 4)
    assert np.array_equal(out.features[-30:], real)
    assert np.array_equal(out.labels[-30:], real_labels)
    assert np.all(out.provenance[-30:] == "real")
    assert np.all(out.provenance[:20] == "generated")


def test_trainset_rejects_unseen_ids_in_real_rows():
    real = np.zeros((4, 4))
    with pytest.raises(InductiveViolationError):
        build_classifier_trainset(
            StubGenerator(), "gzsl", "classification",
            {5: np.array([1.0, 0.0])},
            real_features=real, real_labels=np.array([0, 1, 5, 2]),
        )


def test_trainset_segmentation_equal_frequencies_equal_counts():
    real_labels = np.repeat([0, 1, 2], 40)  # three seen classes, equal counts
    out = build_classifier_trainset(
        StubGenerator(), "zsl", "segmentation",
        {7: np.array([1.0, 0.0]), 8: np.array([2.0, 0.0])},
        real_labels=real_labels, total_budget=90, seed=0,
    )
    assert np.count_nonzero(out.labels == 7) == 45
    assert np.count_nonzero(out.labels == 8) == 45


def test_trainset_segmentation_needs_frequencies():
    with pytest.raises(TrainingError):
        build_classifier_trainset(
            StubGenerator(), "zsl", "segmentation",
            {7: np.array([1.0, 0.0])},
        )


def test_trainset_budget_and_determinism():
    real_labels = np.repeat([0, 1], 25)
    kwargs = dict(
        setting="zsl", task="segmentation",
        unseen_prototypes={3: np.array([1.0, 0.0]), 4: np.array([0.5, 0.0]),
                           9: np.array([2.0, 0.0])},
        real_labels=real_labels, total_budget=100, seed=42,
    )
    a = build_classifier_trainset(StubGenerator(), **kwargs)
    b = build_classifier_trainset(StubGenerator(), **kwargs)
    assert a.labels.size == 100
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
