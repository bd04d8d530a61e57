import numpy as np
import pytest

from genz3d import data
from genz3d.validation import ConfigError, InductiveViolationError, SceneFormatError


def small_config(**kw):
    defaults = dict(points_per_object=24, ground_points=40, wall_points=24,
                    objects_per_scene=3)
    defaults.update(kw)
    return data.SynthConfig(**defaults)


def test_generation_is_pure_in_config_and_seed():
    cfg = small_config()
    a = data.generate_synthetic(cfg, "segmentation", 3, seed=42)
    b = data.generate_synthetic(cfg, "segmentation", 3, seed=42)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.points, sb.points)
        np.testing.assert_array_equal(sa.labels, sb.labels)
        np.testing.assert_array_equal(sa.instances, sb.instances)
    c = data.generate_synthetic(cfg, "segmentation", 3, seed=43)
    assert not np.array_equal(a[0].points, c[0].points)


def test_zero_count_gives_empty_dataset():
    assert data.generate_synthetic(small_config(), "segmentation", 0, 1) == []


def test_segmentation_scene_structure():
    cfg = small_config()
    (scene,) = data.generate_synthetic(cfg, "segmentation", 1, seed=7)
    assert scene.labels.min() >= 0
    assert scene.labels.max() < len(cfg.roster)
    present = set(scene.labels.tolist())
    assert cfg.roster.index("ground") in present
    assert cfg.roster.index("wall") in present
    # ground + wall + one instance per object
    assert len(set(scene.instances.tolist())) == 2 + cfg.objects_per_scene


def test_object_footprints_do_not_overlap():
    cfg = small_config(objects_per_scene=4)
    scenes = data.generate_synthetic(cfg, "segmentation", 5, seed=3)
    for scene in scenes:
        ids = [i for i in np.unique(scene.instances) if i >= 2]
        for a in ids:
            for b in ids:
                if a >= b:
                    continue
                pa = scene.points[scene.instances == a][:, :2]
                pb = scene.points[scene.instances == b][:, :2]
                d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
                assert d.min() > 0.02


def test_classification_cloud_has_single_label():
    cfg = small_config()
    clouds = data.generate_synthetic(cfg, "classification", 8, seed=5)
    for cloud in clouds:
        label = cloud.cloud_label()
        assert cfg.roster[label] in cfg.object_classes()
        assert cloud.instances is None


def test_cloud_label_rejects_mixed_scene():
    cfg = small_config()
    (scene,) = data.generate_synthetic(cfg, "segmentation", 1, seed=2)
    with pytest.raises(SceneFormatError):
        scene.cloud_label()


def test_unknown_family_rejected():
    with pytest.raises(ConfigError):
        data.SynthConfig(roster=("ground", "wall", "pyramid"))
    with pytest.raises(ConfigError):
        data.SynthConfig(roster=("ground", "ground"))


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        data.generate_synthetic(small_config(), "detection", 1, 0)


def test_scene_round_trip_is_exact(tmp_path):
    cfg = small_config()
    (scene,) = data.generate_synthetic(cfg, "segmentation", 1, seed=11)
    path = tmp_path / "scene.txt"
    data.write_scene(path, scene)
    back = data.read_scene(path)
    np.testing.assert_array_equal(scene.points, back.points)
    np.testing.assert_array_equal(scene.labels, back.labels)
    np.testing.assert_array_equal(scene.instances, back.instances)


def test_scene_round_trip_without_instances(tmp_path):
    cfg = small_config()
    (cloud,) = data.generate_synthetic(cfg, "classification", 1, seed=11)
    path = tmp_path / "cloud.txt"
    data.write_scene(path, cloud)
    back = data.read_scene(path)
    np.testing.assert_array_equal(cloud.points, back.points)
    assert back.instances is None


@pytest.mark.parametrize("content,fragment", [
    ("wrong-magic\nN 1\n0 0 0 0\n", ":1:"),
    ("genz3d-scene v1\nM 1\n0 0 0 0\n", ":2:"),
    ("genz3d-scene v1\nN x\n0 0 0 0\n", ":2:"),
    ("genz3d-scene v1\nN 0\n", "positive"),
    ("genz3d-scene v1\nN 2\n0 0 0 0\n", "2 points but found 1"),
    ("genz3d-scene v1\nN 1\n0 0 0\n", ":3:"),
    ("genz3d-scene v1\nN 1\n0 zero 0 0\n", ":3:"),
    ("genz3d-scene v1\nN 1\nnan 0 0 0\n", "non-finite"),
    ("genz3d-scene v1\nN 1\n0 0 0 -2\n", "negative label"),
    ("genz3d-scene v1\nN 2\n0 0 0 0 1\n0 0 1 0\n", "instance"),
])
def test_scene_reader_rejects_malformed_input(tmp_path, content, fragment):
    path = tmp_path / "bad.txt"
    path.write_text(content)
    with pytest.raises(SceneFormatError) as err:
        data.read_scene(path)
    assert fragment in str(err.value)


def test_split_file_round_trip(tmp_path):
    path = tmp_path / "split.txt"
    data.write_split_file(path, ["ground", "wall", "box"], ["cone"], ["ground"])
    split = data.read_split_file(path)
    assert split["seen"] == ("ground", "wall", "box")
    assert split["unseen"] == ("cone",)
    assert split["validation-excluded"] == ("ground",)


def test_split_file_comments_and_blanks(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text(
        "# benchmark split\n[seen]\nground  # everywhere\n\nwall\n"
        "[unseen]\ncone\n[validation-excluded]\n"
    )
    split = data.read_split_file(path)
    assert split["seen"] == ("ground", "wall")
    assert split["validation-excluded"] == ()


@pytest.mark.parametrize("content,fragment", [
    ("[lost]\nx\n", "unknown section"),
    ("ground\n[seen]\n", "before any section"),
    ("[seen]\nground\nground\n", "duplicate"),
    ("[seen]\nbox\n[unseen]\nbox\n", "both seen and unseen"),
    ("[seen]\nbox\n[unseen]\ncone\n[validation-excluded]\nwall\n", "not in seen"),
])
def test_split_file_rejects_malformed_input(tmp_path, content, fragment):
    path = tmp_path / "bad.txt"
    path.write_text(content)
    with pytest.raises(SceneFormatError) as err:
        data.read_split_file(path)
    assert fragment in str(err.value)


def test_inductive_filter_partitions_scenes():
    cfg = small_config()
    scenes = data.generate_synthetic(cfg, "segmentation", 12, seed=9)
    unseen_ids = {cfg.roster.index("cone"), cfg.roster.index("ridden_cylinder")}
    kept = data.inductive_filter(scenes, unseen_ids)
    clean, contaminated = data.split_scenes_by_labels(scenes, unseen_ids)
    assert len(kept) == len(clean)
    assert len(clean) + len(contaminated) == len(scenes)
    for s in kept:
        assert not data.scene_contains(s, unseen_ids)
    for s in contaminated:
        assert data.scene_contains(s, unseen_ids)


def test_assert_inductive_catches_single_injected_point():
    cfg = small_config()
    scenes = data.generate_synthetic(cfg, "segmentation", 2, seed=1)
    unseen = cfg.roster.index("cone")
    clean = data.inductive_filter(scenes, {unseen, cfg.roster.index("ridden_cylinder")})
    allowed = [i for i in range(len(cfg.roster)) if cfg.roster[i] not in
               ("cone", "ridden_cylinder")]
    data.assert_inductive(clean, allowed, "test")
    if not clean:
        pytest.skip("filter dropped everything at this seed")
    clean[0].labels[5] = unseen
    with pytest.raises(InductiveViolationError):
        data.assert_inductive(clean, allowed, "test")


def test_validation_split_sizes():
    seen = [f"c{i}" for i in range(30)]
    splits = data.make_validation_splits(seen, set(), 5, seed=0)
    assert len(splits) == 5
    for train, val in splits:
        assert len(val) == 6  # round(0.2 * 30)
        assert set(train) | set(val) == set(seen)
        assert not set(train) & set(val)
    assert len({val for _, val in splits}) == 5


def test_validation_split_minimum_of_two():
    seen = ["a", "b", "c", "d", "e", "f"]
    splits = data.make_validation_splits(seen, {"a", "b"}, 3, seed=1)
    for _, val in splits:
        assert len(val) == 2  # max(2, round(1.2))
        assert not {"a", "b"} & set(val)


def test_validation_split_determinism_and_errors():
    seen = ["a", "b", "c", "d", "e"]
    s1 = data.make_validation_splits(seen, {"a"}, 3, seed=7)
    s2 = data.make_validation_splits(seen, {"a"}, 3, seed=7)
    assert s1 == s2
    with pytest.raises(ConfigError):
        data.make_validation_splits(["a", "b", "c"], {"a", "b"}, 1, seed=0)
    with pytest.raises(ConfigError):
        data.make_validation_splits(seen, {"a"}, 99, seed=0)


def test_synthetic_prototypes_cover_roster():
    protos = data.synthetic_prototypes(data.DEFAULT_ROSTER)
    assert set(protos) == set(data.DEFAULT_ROSTER)
    base = protos["cylinder"]
    ridden = protos["ridden_cylinder"]
    assert ridden[6] == 1.0 and base[6] == 0.0
    assert ridden[0] > base[0]
    with pytest.raises(ConfigError):
        data.synthetic_prototypes(("ground", "obelisk"))


def test_dataset_directory_round_trip(tmp_path):
    cfg = small_config()
    scenes = data.generate_synthetic(cfg, "segmentation", 3, seed=4)
    data.write_dataset(tmp_path / "ds", scenes, cfg.roster)
    back, roster = data.read_dataset(tmp_path / "ds")
    assert roster == cfg.roster
    assert len(back) == 3
    np.testing.assert_array_equal(back[0].points, scenes[0].points)


def test_read_dataset_requires_roster(tmp_path):
    (tmp_path / "scenes").mkdir()
    with pytest.raises(SceneFormatError):
        data.read_dataset(tmp_path)
