import numpy as np
import pytest

from genz3d.data import (
    SynthConfig,
    generate_synthetic,
    inductive_filter,
    synthetic_prototypes,
)
from genz3d.pipeline import (
    BETA_GRID,
    EPSILON_GRID,
    BiasConfig,
    FeatureClassifier,
    ZslPipeline,
    ZslSplit,
    calibrated_stacking,
    grid_search_bias,
    run_reference,
)
from genz3d.prototypes import PrototypeSet
from genz3d.validation import (
    ConfigError,
    InductiveViolationError,
    NotFittedError,
    TrainingError,
)

ROSTER = ("ground", "wall", "box", "sphere", "cylinder", "cone")
SEEN = ("ground", "wall", "box", "sphere", "cylinder")
UNSEEN = ("cone",)


def small_config(**overrides):
    base = dict(roster=ROSTER, points_per_object=36, ground_points=70,
                wall_points=40, objects_per_scene=2)
    base.update(overrides)
    return SynthConfig(**base)


def tiny_pipeline(**overrides):
    base = dict(task="segmentation", setting="gzsl", generator="gmmn",
                backbone_epochs=6, generator_epochs=8, classifier_epochs=8,
                per_class=60, seed=0)
    base.update(overrides)
    return ZslPipeline(**base)


@pytest.fixture(scope="module")
def seg_data():
    config = small_config()
    train = generate_synthetic(config, "segmentation", 14, seed=0)
    test = generate_synthetic(config, "segmentation", 5, seed=100)
    return train, test


@pytest.fixture(scope="module")
def fitted(seg_data):
    train, test = seg_data
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    pipe = tiny_pipeline().fit(train, split, protos)
    return pipe, train, test


def test_split_ids_and_validation():
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    assert split.seen_ids == (0, 1, 2, 3, 4)
    assert split.unseen_ids == (5,)
    with pytest.raises(ConfigError):
        ZslSplit(ROSTER, SEEN, ("sphere",))  # overlap
    with pytest.raises(ConfigError):
        ZslSplit(ROSTER, SEEN, ("pyramid",))  # not in roster
    with pytest.raises(ConfigError):
        ZslSplit(ROSTER, (), UNSEEN)


def test_bias_config_bounds():
    BiasConfig(1.0, 0.0)
    BiasConfig(100.0, 0.995)
    with pytest.raises(ConfigError):
        BiasConfig(beta=0.5)
    with pytest.raises(ConfigError):
        BiasConfig(epsilon=1.5)


def test_stacking_zero_epsilon_is_exact_copy():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=(40, 6))
    mask = np.array([True, True, True, False, False, False])
    out = calibrated_stacking(scores, mask, 0.0)
    assert np.array_equal(out, scores)
    assert out is not scores


def test_stacking_shifts_only_seen_columns():
    scores = np.full((3, 4), 0.25)
    mask = np.array([True, False, True, False])
    out = calibrated_stacking(scores, mask, 0.4)
    assert np.allclose(out[:, [0, 2]], -0.15)  # may go negative, no clamp
    assert np.allclose(out[:, [1, 3]], 0.25)


def test_stacking_validates_inputs():
    with pytest.raises(ValueError):
        calibrated_stacking(np.ones((2, 3)), np.array([True, False]), 0.1)
    with pytest.raises(ValueError):
        calibrated_stacking(np.ones((2, 2)), np.array([True, False]), 1.5)


def test_stacking_unseen_set_grows_with_epsilon():
    rng = np.random.default_rng(1)
    logits = rng.normal(scale=2.0, size=(200, 5))
    scores = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    mask = np.array([True, True, True, False, False])
    previous = None
    for eps in np.linspace(0.0, 1.0, 21):
        pred = calibrated_stacking(scores, mask, eps).argmax(axis=1)
        unseen_rows = set(np.flatnonzero(~mask[pred]).tolist())
        if previous is not None:
            assert previous <= unseen_rows
        previous = unseen_rows
    assert len(previous) == 200  # epsilon one sends every row to unseen


def _blobs(seed=0, n=60, overlap=0.3):
    rng = np.random.default_rng(seed)
    a = rng.normal(loc=-1.0, scale=overlap, size=(n, 4))
    b = rng.normal(loc=1.0, scale=overlap, size=(n, 4))
    feats = np.vstack([a, b])
    labels = np.concatenate([np.zeros(n, dtype=int), np.full(n, 3)])
    return feats, labels


def test_classifier_learns_separable_blobs():
    feats, labels = _blobs(overlap=0.1)
    clf = FeatureClassifier(epochs=40, seed=0).fit(feats, labels, (0, 3))
    assert np.array_equal(clf.predict(feats), labels)
    assert clf.classes_ == (0, 3)


def test_classifier_unit_weight_matches_unweighted_bitwise():
    feats, labels = _blobs()
    plain = FeatureClassifier(epochs=10, seed=7).fit(feats, labels, (0, 3))
    weighted = FeatureClassifier(epochs=10, seed=7, unseen_weight=1.0).fit(
        feats, labels, (0, 3), unseen=(3,))
    assert np.array_equal(plain.predict_scores(feats),
                          weighted.predict_scores(feats))


def test_classifier_weight_shifts_predictions_toward_unseen():
    feats, labels = _blobs(overlap=1.5)
    low = FeatureClassifier(epochs=150, seed=0).fit(
        feats, labels, (0, 3), unseen=(3,))
    high = FeatureClassifier(epochs=150, seed=0, unseen_weight=100.0).fit(
        feats, labels, (0, 3), unseen=(3,))
    n_low = np.count_nonzero(low.predict(feats) == 3)
    n_high = np.count_nonzero(high.predict(feats) == 3)
    assert n_high > n_low


def test_classifier_input_validation():
    feats, labels = _blobs()
    with pytest.raises(ConfigError):
        FeatureClassifier(unseen_weight=0.5).fit(feats, labels, (0, 3))
    with pytest.raises(TrainingError):
        FeatureClassifier().fit(feats, labels, (0, 1))  # label 3 undeclared
    with pytest.raises(NotFittedError):
        FeatureClassifier().predict(feats)


def test_pipeline_fit_discards_contaminated_scenes(fitted):
    pipe, train, _ = fitted
    cone_id = ROSTER.index("cone")
    kept = inductive_filter(train, [cone_id])
    assert pipe.discarded_ == len(train) - len(kept)
    assert pipe.discarded_ >= 1
    assert pipe.trainset_summary_["real"] > 0  # generalised setting
    assert pipe.trainset_summary_["generated"] > 0


def test_pipeline_predictions_and_report(fitted):
    pipe, _, test = fitted
    pred = pipe.predict_scene(test[0])
    assert pred.shape == test[0].labels.shape
    assert set(pred.tolist()) <= set(range(len(ROSTER)))
    report = pipe.evaluate(test)
    assert 0.0 <= report.hm_iou <= 1.0
    assert 0.0 <= report.miou_seen <= 1.0
    assert report.metadata["setting"] == "gzsl"


def test_pipeline_epsilon_applies_without_refit(fitted):
    pipe, _, test = fitted
    classifier_before = pipe.classifier_
    scores, _ = pipe.score_scenes([test[0]])
    mask = pipe.classifier_.seen_column_mask()
    classes = np.asarray(pipe.classifier_.classes_)
    pipe.set_params(epsilon=0.6)
    try:
        expect = classes[calibrated_stacking(scores, mask, 0.6).argmax(axis=1)]
        assert np.array_equal(pipe.predict_scene(test[0]), expect)
        assert pipe.classifier_ is classifier_before
    finally:
        pipe.set_params(epsilon=0.0)


def test_pipeline_seed_determinism(seg_data):
    train, test = seg_data
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    small = dict(backbone_epochs=3, generator_epochs=4, classifier_epochs=4,
                 per_class=30)
    a = tiny_pipeline(**small).fit(train, split, protos)
    b = tiny_pipeline(**small).fit(train, split, protos)
    sa, _ = a.score_scenes(test[:2])
    sb, _ = b.score_scenes(test[:2])
    assert np.array_equal(sa, sb)


def test_pipeline_zsl_classifier_covers_unseen_only(seg_data):
    train, _ = seg_data
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    pipe = tiny_pipeline(setting="zsl", backbone_epochs=3, generator_epochs=4,
                         classifier_epochs=4, per_class=30)
    pipe.fit(train, split, protos)
    assert pipe.classifier_.classes_ == split.unseen_ids
    assert pipe.trainset_summary_["real"] == 0


def test_pipeline_classification_mode():
    config = small_config()
    clouds = generate_synthetic(config, "classification", 40, seed=3)
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    pipe = tiny_pipeline(task="classification", backbone_epochs=8,
                         generator_epochs=6, classifier_epochs=6, per_class=40)
    pipe.fit(clouds, split, protos)
    label = pipe.predict_scene(clouds[0])
    assert isinstance(label, int)
    report = pipe.evaluate(clouds[:10])
    assert report.task == "classification"


def test_pipeline_rejects_bad_knobs(seg_data):
    train, _ = seg_data
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    with pytest.raises(ConfigError):
        tiny_pipeline(generator="vae").fit(train, split, protos)
    with pytest.raises(ConfigError):
        tiny_pipeline(beta=0.0).fit(train, split, protos)
    with pytest.raises(ConfigError):
        protos_missing = PrototypeSet(
            {n: v for n, v in synthetic_prototypes(ROSTER).items()
             if n != "cone"})
        tiny_pipeline().fit(train, split, protos_missing)


def test_reference_modes_and_ordering(seg_data):
    train, test = seg_data
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    kwargs = dict(task="segmentation", backbone_epochs=6, classifier_epochs=8,
                  seed=0)
    trivial = run_reference("zsl_trivial", train, test, split, **kwargs)
    assert trivial.miou_unseen == 0.0
    full = run_reference("full_supervision", train, test, split, **kwargs)
    assert full.miou_seen > 0.0
    assert full.metadata["mode"] == "full_supervision"
    backbone_only = run_reference("zsl_backbone", train, test, split, **kwargs)
    assert backbone_only.miou_unseen >= trivial.miou_unseen
    with pytest.raises(ConfigError):
        run_reference("oracle", train, test, split, **kwargs)


@pytest.fixture(scope="module")
def grid_inputs():
    config = small_config(objects_per_scene=1)
    scenes = generate_synthetic(config, "segmentation", 24, seed=5)
    split = ZslSplit(ROSTER, SEEN, UNSEEN)
    clean = inductive_filter(scenes, split.unseen_ids)
    protos = PrototypeSet(synthetic_prototypes(ROSTER))
    params = dict(task="segmentation", setting="gzsl", generator="gmmn",
                  backbone_epochs=3, generator_epochs=4, classifier_epochs=4,
                  per_class=30, seed=0)
    return clean, split, protos, params


def test_grid_search_rejects_unseen_labels(grid_inputs):
    _, split, protos, params = grid_inputs
    config = small_config()
    dirty = generate_synthetic(config, "segmentation", 8, seed=9)
    assert any(s.labels.max() == ROSTER.index("cone") for s in dirty)
    with pytest.raises(InductiveViolationError):
        grid_search_bias(dirty, split, protos, pipeline_params=params,
                         n_splits=2)


def test_grid_search_two_stages(grid_inputs):
    clean, split, protos, params = grid_inputs
    result = grid_search_bias(
        clean, split, protos, pipeline_params=params,
        beta_grid=(1.0, 50.0), epsilon_grid=(0.0, 0.5), n_splits=2, seed=0,
    )
    assert result.beta in (1.0, 50.0)
    assert result.epsilon in (0.0, 0.5)
    stage1 = [r for r in result.rows if r.stage == "beta"]
    stage2 = [r for r in result.rows if r.stage == "epsilon"]
    assert len(stage1) == 4  # two betas times two splits
    assert len(stage2) == 4  # two epsilons times two splits
    assert all(r.epsilon == 0.0 for r in stage1)
    assert all(r.beta == result.beta for r in stage2)
    assert set(result.beta_means) == {1.0, 50.0}
    for row in result.rows:
        assert 0.0 <= row.objective <= 1.0


def test_grid_search_thread_count_does_not_change_results(grid_inputs):
    clean, split, protos, params = grid_inputs
    kwargs = dict(pipeline_params=params, beta_grid=(1.0, 50.0),
                  epsilon_grid=(0.0, 0.5), n_splits=2, seed=0)
    serial = grid_search_bias(clean, split, protos, threads=1, **kwargs)
    threaded = grid_search_bias(clean, split, protos, threads=3, **kwargs)
    assert serial.beta == threaded.beta
    assert serial.epsilon == threaded.epsilon
    assert [(r.stage, r.beta, r.epsilon, r.split_index, r.objective)
            for r in serial.rows] == \
        [(r.stage, r.beta, r.epsilon, r.split_index, r.objective)
         for r in threaded.rows]


def test_grid_search_joint_mode(grid_inputs):
    clean, split, protos, params = grid_inputs
    result = grid_search_bias(
        clean, split, protos, pipeline_params=params,
        beta_grid=(1.0,), epsilon_grid=(0.0, 0.3), n_splits=2, seed=0,
        joint=True,
    )
    assert result.beta == 1.0
    assert result.epsilon in (0.0, 0.3)
    assert all(r.stage == "joint" for r in result.rows)


def test_default_grids_match_protocol():
    assert BETA_GRID == (1.0, 5.0, 10.0, 50.0, 100.0)
    assert EPSILON_GRID[:3] == (0.0, 0.1, 0.2)
    assert EPSILON_GRID[-2:] == (0.95, 0.995)
