"""Class prototypes: fixed per-class vectors conditioning the feature generator.

The on-disk format is one class per line, ``name v1 v2 ... vD``, UTF-8, with
``#`` starting a comment. All vectors in a set share one dimension D.
"""

import numpy as np

from .validation import PrototypeFormatError, TrainingError, check_finite


class PrototypeSet:
    """Immutable-ish mapping from class name to a D-dimensional vector."""

    def __init__(self, vectors):
        vectors = dict(vectors)
        if not vectors:
            raise PrototypeFormatError("a prototype set needs at least one class")
        self._vectors = {}
        dim = None
        for name, vec in vectors.items():
            if not name or any(ch.isspace() for ch in name):
                raise PrototypeFormatError(
                    f"invalid class name {name!r} (empty or contains whitespace)"
                )
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise PrototypeFormatError(
                    f"prototype for {name!r} must be a nonempty vector"
                )
            if dim is None:
                dim = arr.size
            elif arr.size != dim:
                raise PrototypeFormatError(
                    f"prototype for {name!r} has dim {arr.size}, expected {dim}"
                )
            check_finite(arr, f"prototype for {name!r}")
            self._vectors[name] = arr.copy()
        self.dim = dim

    def __getitem__(self, name):
        return self._vectors[name]

    def __contains__(self, name):
        return name in self._vectors

    def __iter__(self):
        return iter(self._vectors)

    def __len__(self):
        return len(self._vectors)

    @property
    def classes(self):
        return tuple(self._vectors)

    def matrix(self, names):
        """Stack prototypes for the given class names, in that order."""
        missing = [n for n in names if n not in self._vectors]
        if missing:
            raise KeyError(f"no prototype for classes {missing}")
        return np.stack([self._vectors[n] for n in names])

    def subset(self, names):
        return PrototypeSet({n: self._vectors[n] for n in names})


def save_prototypes(path, protos):
    with open(path, "w", encoding="utf-8") as fh:
        for name in protos:
            values = " ".join(repr(float(v)) for v in protos[name])
            fh.write(f"{name} {values}\n")


def load_prototypes(path):
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise PrototypeFormatError(
                    f"{path}:{lineno}: expected 'name v1 ... vD'"
                )
            name = parts[0]
            if name in vectors:
                raise PrototypeFormatError(
                    f"{path}:{lineno}: duplicate class {name!r}"
                )
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise PrototypeFormatError(
                    f"{path}:{lineno}: non-numeric component"
                ) from None
            if not np.all(np.isfinite(vec)):
                raise PrototypeFormatError(
                    f"{path}:{lineno}: non-finite component"
                )
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise PrototypeFormatError(
                    f"{path}:{lineno}: {name!r} has {vec.size} components, "
                    f"expected {dim}"
                )
            vectors[name] = vec
    if not vectors:
        raise PrototypeFormatError(f"{path}: no prototypes found")
    return PrototypeSet(vectors)


def concat_prototypes(a, b, normalize=False):
    """Concatenate two sets over identical class rosters; D = Da + Db.

    With ``normalize`` each source vector is l2-normalised before the join,
    otherwise the raw subvectors are preserved exactly.
    """
    if set(a.classes) != set(b.classes):
        raise PrototypeFormatError(
            "prototype sets cover different classes: "
            f"{sorted(set(a.classes) ^ set(b.classes))}"
        )

    def prep(vec):
        if not normalize:
            return vec
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise PrototypeFormatError("cannot normalise a zero prototype")
        return vec / norm

    return PrototypeSet({
        name: np.concatenate([prep(a[name]), prep(b[name])])
        for name in a.classes
    })


def image_prototype(vectors):
    """Mean of image feature vectors, l2-normalised; zero mean is rejected."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a nonempty (k, D) array of image features")
    check_finite(arr, "image features")
    mean = arr.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ValueError("image features average to the zero vector")
    return mean / norm


def ideal_prototypes(backbone, scenes, roster, seen, unseen, task="segmentation"):
    """Oracle prototypes in backbone feature space.

    Seen class: mean feature over points the backbone's own classifier labels
    correctly. Unseen class: mean feature over all its points (predictions are
    never consulted for unseen classes). Downstream, these prototypes are used
    with the bias term switched off.
    """
    seen = tuple(seen)
    unseen = tuple(unseen)
    name_of = dict(enumerate(roster))
    sums = {c: None for c in seen + unseen}
    counts = {c: 0 for c in seen + unseen}

    def add(cls, feats):
        if feats.shape[0] == 0:
            return
        sums[cls] = feats.sum(axis=0) if sums[cls] is None else sums[cls] + feats.sum(axis=0)
        counts[cls] += feats.shape[0]

    for scene in scenes:
        if task == "classification":
            cls = name_of[scene.cloud_label()]
            if cls not in counts:
                continue
            feat = backbone.global_feature(scene.points)[None, :]
            if cls in seen:
                pred = backbone.classify_features(feat)[0]
                if name_of.get(int(pred)) != cls:
                    continue
            add(cls, feat)
        else:
            feats = None
            labels = scene.labels
            for cls in seen + unseen:
                mask = labels == roster.index(cls)
                if not mask.any():
                    continue
                if feats is None:
                    feats = backbone.point_features(scene.points)
                sub = feats[mask]
                if cls in seen:
                    preds = backbone.classify_features(sub)
                    sub = sub[np.asarray(preds) == roster.index(cls)]
                add(cls, sub)

    for cls in seen:
        if counts[cls] == 0:
            raise TrainingError(
                f"ideal prototype for seen class {cls!r}: no correctly "
                "classified points"
            )
    for cls in unseen:
        if counts[cls] == 0:
            raise TrainingError(
                f"ideal prototype for unseen class {cls!r}: no points found"
            )
    return PrototypeSet({c: sums[c] / counts[c] for c in seen + unseen})
