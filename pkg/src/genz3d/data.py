"""Synthetic point-cloud scenes, on-disk formats, and split bookkeeping.

Scenes are parametric shapes on a ground plane. Labels are integer indices
into a class roster (a tuple of class names); files store one point per line.
Composite classes named ``ridden_<base>`` put a small sphere rider on top of
the base shape, so an unseen composite shares geometry with its seen base.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    ConfigError,
    SceneFormatError,
    as_labels,
    as_points,
)

SCENE_MAGIC = "genz3d-scene v1"

SPLIT_SECTIONS = ("seen", "unseen", "validation-excluded")

# Ubiquitous surfaces every scene contains; excluded from validation draws.
STRUCTURAL_CLASSES = ("ground", "wall")

OBJECT_FAMILIES = ("box", "sphere", "cylinder", "cone", "torus")

DEFAULT_ROSTER = (
    "ground", "wall", "box", "sphere", "cylinder", "torus",
    "cone", "ridden_cylinder",
)

SHAPE_PARAMS = {
    "box": (("w", 0.4, 0.8), ("d", 0.4, 0.8), ("h", 0.3, 0.9)),
    "sphere": (("r", 0.25, 0.45),),
    "cylinder": (("r", 0.15, 0.30), ("h", 0.7, 1.2)),
    "cone": (("r", 0.25, 0.45), ("h", 0.6, 1.1)),
    "torus": (("R", 0.25, 0.40), ("r", 0.08, 0.14)),
}
RIDER_RADIUS = (0.15, 0.22)
WALL_HEIGHT = 1.8

# Eight-dimensional class descriptors used as side information for the
# synthetic benchmark: height, footprint, roundness, flatness, taper,
# hollowness, rider flag, uprightness.
CLASS_DESCRIPTORS = {
    "ground":   (0.00, 1.00, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
    "wall":     (0.90, 1.00, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
    "box":      (0.30, 0.30, 0.0, 0.6, 0.0, 0.0, 0.0, 0.4),
    "sphere":   (0.40, 0.20, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "cylinder": (0.50, 0.12, 0.7, 0.2, 0.0, 0.0, 0.0, 1.0),
    "cone":     (0.40, 0.20, 0.6, 0.1, 1.0, 0.0, 0.0, 1.0),
    "torus":    (0.15, 0.25, 0.9, 0.2, 0.0, 1.0, 0.0, 0.0),
}


@dataclass
class Scene:
    """One point cloud: coordinates, per-point labels, optional instances."""

    points: np.ndarray
    labels: np.ndarray
    instances: np.ndarray = None

    def __post_init__(self):
        self.points = as_points(self.points)
        n = self.points.shape[0]
        self.labels = as_labels(self.labels, n=n)
        if self.labels.min() < 0:
            raise SceneFormatError("negative class label")
        if self.instances is not None:
            self.instances = as_labels(self.instances, n=n, name="instances")

    @property
    def n_points(self):
        return self.points.shape[0]

    def cloud_label(self):
        """The single label of a whole-cloud sample; error if labels are mixed."""
        unique = np.unique(self.labels)
        if unique.size != 1:
            raise SceneFormatError("scene has mixed labels, not a whole-cloud sample")
        return int(unique[0])


@dataclass
class SynthConfig:
    """Knobs for the synthetic generator; generation is pure in (config, seed)."""

    roster: tuple = DEFAULT_ROSTER
    points_per_object: int = 96
    ground_points: int = 160
    wall_points: int = 96
    objects_per_scene: int = 4
    extent: float = 5.0
    noise: float = 0.01
    max_place_tries: int = 200

    def __post_init__(self):
        self.roster = tuple(self.roster)
        if len(self.roster) != len(set(self.roster)):
            raise ConfigError("duplicate class names in roster")
        for name in self.roster:
            if name in ("ground", "wall"):
                continue
            base = name[len("ridden_"):] if name.startswith("ridden_") else name
            if base not in OBJECT_FAMILIES:
                raise ConfigError(f"unknown shape family {name!r}")
        if self.points_per_object < 8:
            raise ConfigError("points_per_object must be at least 8")
        if self.objects_per_scene < 1:
            raise ConfigError("objects_per_scene must be at least 1")
        if self.extent <= 2.0:
            raise ConfigError("extent must exceed 2.0")

    def object_classes(self):
        return tuple(c for c in self.roster if c not in ("ground", "wall"))


def _draw_params(family, rng):
    return {name: rng.uniform(lo, hi) for name, lo, hi in SHAPE_PARAMS[family]}


def _sample_sphere(rng, n, r):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * r
    pts[:, 2] += r
    return pts


def _sample_box(rng, n, w, d, h):
    areas = np.array([d * h, d * h, w * h, w * h, w * d, w * d])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.zeros((n, 3))
    for i, (f, a, b) in enumerate(zip(faces, u, v)):
        if f == 0:
            pts[i] = (-w / 2, a * d, (b + 0.5) * h)
        elif f == 1:
            pts[i] = (w / 2, a * d, (b + 0.5) * h)
        elif f == 2:
            pts[i] = (a * w, -d / 2, (b + 0.5) * h)
        elif f == 3:
            pts[i] = (a * w, d / 2, (b + 0.5) * h)
        elif f == 4:
            pts[i] = (a * w, b * d, 0.0)
        else:
            pts[i] = (a * w, b * d, h)
    return pts


def _sample_cylinder(rng, n, r, h):
    lateral = 2 * np.pi * r * h
    caps = np.pi * r * r
    which = rng.choice(3, size=n, p=np.array([lateral, caps, caps])
                       / (lateral + 2 * caps))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(0, 1, size=n)
    rad = r * np.sqrt(rng.uniform(0, 1, size=n))
    pts = np.empty((n, 3))
    for i in range(n):
        if which[i] == 0:
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), z[i] * h)
        else:
            zz = 0.0 if which[i] == 1 else h
            pts[i] = (rad[i] * np.cos(theta[i]), rad[i] * np.sin(theta[i]), zz)
    return pts


def _sample_cone(rng, n, r, h):
    slant_area = np.pi * r * np.hypot(r, h)
    base_area = np.pi * r * r
    lateral = rng.uniform(0, 1, size=n) < slant_area / (slant_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n))  # area-uniform from apex
    rad = r * np.sqrt(rng.uniform(0, 1, size=n))
    pts = np.empty((n, 3))
    for i in range(n):
        if lateral[i]:
            pts[i] = (r * t[i] * np.cos(theta[i]),
                      r * t[i] * np.sin(theta[i]),
                      h * (1.0 - t[i]))
        else:
            pts[i] = (rad[i] * np.cos(theta[i]), rad[i] * np.sin(theta[i]), 0.0)
    return pts


def _sample_torus(rng, n, big_r, r):
    # Flat donut; poloidal angle rejection-weighted by (R + r cos phi).
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        cand = n - filled
        theta = rng.uniform(0, 2 * np.pi, size=cand)
        phi = rng.uniform(0, 2 * np.pi, size=cand)
        keep = rng.uniform(0, 1, size=cand) < (
            (big_r + r * np.cos(phi)) / (big_r + r)
        )
        k = int(keep.sum())
        ring = big_r + r * np.cos(phi[keep])
        pts[filled:filled + k, 0] = ring * np.cos(theta[keep])
        pts[filled:filled + k, 1] = ring * np.sin(theta[keep])
        pts[filled:filled + k, 2] = r + r * np.sin(phi[keep])
        filled += k
    return pts


def _sample_object(family, rng, n):
    """Sample a local-frame shape resting on z=0; returns (points, footprint)."""
    if family.startswith("ridden_"):
        base = family[len("ridden_"):]
        n_rider = max(4, n // 3)
        base_pts, footprint = _sample_object(base, rng, n - n_rider)
        top = float(base_pts[:, 2].max())
        rider_r = rng.uniform(*RIDER_RADIUS)
        rider = _sample_sphere(rng, n_rider, rider_r)
        rider[:, 2] += top
        return np.vstack([base_pts, rider]), footprint
    p = _draw_params(family, rng)
    if family == "sphere":
        return _sample_sphere(rng, n, p["r"]), p["r"]
    if family == "box":
        pts = _sample_box(rng, n, p["w"], p["d"], p["h"])
        return pts, float(np.hypot(p["w"], p["d"]) / 2)
    if family == "cylinder":
        return _sample_cylinder(rng, n, p["r"], p["h"]), p["r"]
    if family == "cone":
        return _sample_cone(rng, n, p["r"], p["h"]), p["r"]
    if family == "torus":
        return _sample_torus(rng, n, p["R"], p["r"]), p["R"] + p["r"]
    raise ConfigError(f"unknown shape family {family!r}")


def _place_objects(config, rng, footprints):
    """Rejection-sample non-overlapping xy centers; gap 0.15 between disks."""
    placed = []
    gap = 0.15
    for fp in footprints:
        lo_x, hi_x = fp + 0.1, config.extent - fp - 0.1
        lo_y, hi_y = fp + 0.4, config.extent - fp - 0.1  # keep off the wall
        if lo_x >= hi_x or lo_y >= hi_y:
            raise ConfigError(
                f"extent {config.extent} too small for footprint {fp:.2f}"
            )
        for _ in range(config.max_place_tries):
            x = rng.uniform(lo_x, hi_x)
            y = rng.uniform(lo_y, hi_y)
            if all(np.hypot(x - px, y - py) >= fp + pfp + gap
                   for px, py, pfp in placed):
                placed.append((x, y, fp))
                break
        else:
            raise ConfigError(
                f"could not place {len(footprints)} objects in extent "
                f"{config.extent} after {config.max_place_tries} tries"
            )
    return [(x, y) for x, y, _ in placed]


def _segmentation_scene(config, rng):
    roster = config.roster
    parts, labels, instances = [], [], []
    instance = 0
    if "ground" in roster:
        g = np.empty((config.ground_points, 3))
        g[:, 0] = rng.uniform(0, config.extent, size=config.ground_points)
        g[:, 1] = rng.uniform(0, config.extent, size=config.ground_points)
        g[:, 2] = 0.0
        parts.append(g)
        labels.append(np.full(len(g), roster.index("ground")))
        instances.append(np.full(len(g), instance))
        instance += 1
    if "wall" in roster:
        w = np.empty((config.wall_points, 3))
        w[:, 0] = rng.uniform(0, config.extent, size=config.wall_points)
        w[:, 1] = 0.0
        w[:, 2] = rng.uniform(0, WALL_HEIGHT, size=config.wall_points)
        parts.append(w)
        labels.append(np.full(len(w), roster.index("wall")))
        instances.append(np.full(len(w), instance))
        instance += 1
    object_classes = config.object_classes()
    chosen = [object_classes[i] for i in
              rng.integers(0, len(object_classes), size=config.objects_per_scene)]
    sampled = [_sample_object(c, rng, config.points_per_object) for c in chosen]
    centers = _place_objects(config, rng, [fp for _, fp in sampled])
    for cls, (pts, _), (x, y) in zip(chosen, sampled, centers):
        moved = pts + np.array([x, y, 0.0])
        parts.append(moved)
        labels.append(np.full(len(moved), roster.index(cls)))
        instances.append(np.full(len(moved), instance))
        instance += 1
    points = np.vstack(parts)
    points += rng.normal(scale=config.noise, size=points.shape)
    return Scene(points, np.concatenate(labels), np.concatenate(instances))


def _classification_cloud(config, rng):
    object_classes = config.object_classes()
    cls = object_classes[int(rng.integers(0, len(object_classes)))]
    pts, _ = _sample_object(cls, rng, config.points_per_object)
    pts += rng.normal(scale=config.noise, size=pts.shape)
    return Scene(pts, np.full(len(pts), config.roster.index(cls)))


def generate_synthetic(config, mode, count, seed):
    """Generate ``count`` scenes (segmentation) or clouds (classification)."""
    if mode not in ("classification", "segmentation"):
        raise ConfigError(f"unknown mode {mode!r}")
    if count < 0:
        raise ConfigError("count must be nonnegative")
    rng = np.random.default_rng(seed)
    if mode == "segmentation":
        return [_segmentation_scene(config, rng) for _ in range(count)]
    return [_classification_cloud(config, rng) for _ in range(count)]


def synthetic_prototypes(roster):
    """Deterministic 8-dim class descriptors for a synthetic roster."""
    protos = {}
    for name in roster:
        if name in CLASS_DESCRIPTORS:
            protos[name] = np.array(CLASS_DESCRIPTORS[name])
        elif name.startswith("ridden_") and name[len("ridden_"):] in CLASS_DESCRIPTORS:
            d = np.array(CLASS_DESCRIPTORS[name[len("ridden_"):]])
            d[0] += 0.3   # taller with the rider on top
            d[6] = 1.0    # rider flag
            protos[name] = d
        else:
            raise ConfigError(f"no descriptor for class {name!r}")
    return protos


def scene_contains(scene, label_ids):
    label_ids = set(int(i) for i in label_ids)
    return any(int(l) in label_ids for l in np.unique(scene.labels))


def inductive_filter(scenes, unseen_ids):
    """Drop every scene containing at least one point of an unseen class."""
    return [s for s in scenes if not scene_contains(s, unseen_ids)]


def split_scenes_by_labels(scenes, label_ids):
    """Partition scenes into (clean, contaminated) w.r.t. the given labels."""
    clean, contaminated = [], []
    for s in scenes:
        (contaminated if scene_contains(s, label_ids) else clean).append(s)
    return clean, contaminated


def assert_inductive(scenes, allowed_ids, stage):
    """Full scan guaranteeing only allowed labels are present before training."""
    from .validation import InductiveViolationError

    allowed = set(int(i) for i in allowed_ids)
    for i, s in enumerate(scenes):
        present = set(int(l) for l in np.unique(s.labels))
        bad = present - allowed
        if bad:
            raise InductiveViolationError(
                f"{stage}: scene {i} contains disallowed class ids {sorted(bad)}"
            )


def make_validation_splits(seen, excluded, n_splits, seed):
    """Draw n distinct validation-class subsets from seen minus excluded.

    Validation size is max(2, round(0.2 * |seen|)); |seen| counts the whole
    seen set, the draw pool excludes the ubiquitous classes.
    """
    seen = list(seen)
    excluded = set(excluded)
    pool = [c for c in seen if c not in excluded]
    k = max(2, round(0.2 * len(seen)))
    if k > len(pool):
        raise ConfigError(
            f"need {k} validation classes but only {len(pool)} are eligible"
        )
    from math import comb
    if comb(len(pool), k) < n_splits:
        raise ConfigError(
            f"cannot draw {n_splits} distinct validation subsets of size {k} "
            f"from {len(pool)} classes"
        )
    rng = np.random.default_rng(seed)
    splits = []
    chosen = set()
    while len(splits) < n_splits:
        pick = tuple(sorted(rng.choice(len(pool), size=k, replace=False)))
        if pick in chosen:
            continue
        chosen.add(pick)
        val = tuple(pool[i] for i in pick)
        train = tuple(c for c in seen if c not in set(val))
        splits.append((train, val))
    return splits


def write_scene(path, scene):
    lines = [SCENE_MAGIC, f"N {scene.n_points}"]
    has_instances = scene.instances is not None
    for i in range(scene.n_points):
        x, y, z = (float(v) for v in scene.points[i])
        row = f"{x!r} {y!r} {z!r} {int(scene.labels[i])}"
        if has_instances:
            row += f" {int(scene.instances[i])}"
        lines.append(row)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SCENE_MAGIC:
        raise SceneFormatError(f"{path}:1: expected header {SCENE_MAGIC!r}")
    if len(lines) < 2 or not lines[1].startswith("N "):
        raise SceneFormatError(f"{path}:2: expected point count line 'N <count>'")
    try:
        n = int(lines[1][2:])
    except ValueError:
        raise SceneFormatError(f"{path}:2: malformed point count") from None
    if n < 1:
        raise SceneFormatError(f"{path}:2: point count must be positive")
    body = [l for l in lines[2:] if l.strip()]
    if len(body) != n:
        raise SceneFormatError(
            f"{path}: header says {n} points but found {len(body)} data lines"
        )
    points = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    instances = None
    for i, line in enumerate(body):
        lineno = i + 3
        parts = line.split()
        if len(parts) not in (4, 5):
            raise SceneFormatError(
                f"{path}:{lineno}: expected 'x y z label [instance]', got "
                f"{len(parts)} fields"
            )
        try:
            xyz = [float(v) for v in parts[:3]]
            label = int(parts[3])
            inst = int(parts[4]) if len(parts) == 5 else None
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(np.isfinite(v) for v in xyz):
            raise SceneFormatError(f"{path}:{lineno}: non-finite coordinate")
        if label < 0:
            raise SceneFormatError(f"{path}:{lineno}: negative label")
        if i == 0:
            instances = np.empty(n, dtype=np.int64) if inst is not None else None
        if (inst is None) != (instances is None):
            raise SceneFormatError(
                f"{path}:{lineno}: inconsistent instance column"
            )
        points[i] = xyz
        labels[i] = label
        if instances is not None:
            instances[i] = inst
    return Scene(points, labels, instances)


def write_split_file(path, seen, unseen, validation_excluded=()):
    lines = ["[seen]"] + list(seen) + ["", "[unseen]"] + list(unseen)
    lines += ["", "[validation-excluded]"] + list(validation_excluded)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split_file(path):
    """Returns {'seen': (...), 'unseen': (...), 'validation-excluded': (...)}."""
    sections = {name: [] for name in SPLIT_SECTIONS}
    current = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1]
                if name not in sections:
                    raise SceneFormatError(
                        f"{path}:{lineno}: unknown section [{name}]"
                    )
                current = name
                continue
            if current is None:
                raise SceneFormatError(
                    f"{path}:{lineno}: class name before any section header"
                )
            if line in sections[current]:
                raise SceneFormatError(
                    f"{path}:{lineno}: duplicate class {line!r} in [{current}]"
                )
            sections[current].append(line)
    overlap = set(sections["seen"]) & set(sections["unseen"])
    if overlap:
        raise SceneFormatError(
            f"{path}: classes in both seen and unseen: {sorted(overlap)}"
        )
    stray = set(sections["validation-excluded"]) - set(sections["seen"])
    if stray:
        raise SceneFormatError(
            f"{path}: validation-excluded classes not in seen: {sorted(stray)}"
        )
    return {name: tuple(values) for name, values in sections.items()}


def write_dataset(directory, scenes, roster):
    """Write classes.txt plus scenes/scene_<i>.txt under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "classes.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(roster) + "\n")
    scene_dir = os.path.join(directory, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    for i, scene in enumerate(scenes):
        write_scene(os.path.join(scene_dir, f"scene_{i:05d}.txt"), scene)


def read_dataset(directory):
    """Read a dataset directory; returns (scenes, roster)."""
    roster_path = os.path.join(directory, "classes.txt")
    if not os.path.exists(roster_path):
        raise SceneFormatError(f"{directory}: missing classes.txt")
    with open(roster_path, "r", encoding="utf-8") as fh:
        roster = tuple(line.strip() for line in fh if line.strip())
    if len(roster) != len(set(roster)):
        raise SceneFormatError(f"{roster_path}: duplicate class names")
    scene_dir = os.path.join(directory, "scenes")
    if not os.path.isdir(scene_dir):
        raise SceneFormatError(f"{directory}: missing scenes/ directory")
    scenes = []
    for name in sorted(os.listdir(scene_dir)):
        if name.endswith(".txt"):
            scenes.append(read_scene(os.path.join(scene_dir, name)))
    max_label = max((int(s.labels.max()) for s in scenes), default=-1)
    if max_label >= len(roster):
        raise SceneFormatError(
            f"{directory}: scene label {max_label} outside roster of "
            f"{len(roster)} classes"
        )
    return scenes, roster
