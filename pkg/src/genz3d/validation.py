"""Input validation helpers and the exception hierarchy shared by all modules."""

import numpy as np

from sklearn.exceptions import NotFittedError

__all__ = [
    "GenZ3DError",
    "ConfigError",
    "SceneFormatError",
    "PrototypeFormatError",
    "InductiveViolationError",
    "TrainingError",
    "EvaluationError",
    "NotFittedError",
    "as_matrix",
    "as_points",
    "as_labels",
    "check_finite",
    "check_fitted",
]


class GenZ3DError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(GenZ3DError):
    """Invalid experiment configuration."""


class SceneFormatError(GenZ3DError):
    """Malformed scene file or scene data."""


class PrototypeFormatError(GenZ3DError):
    """Malformed prototype file or prototype data."""


class InductiveViolationError(GenZ3DError):
    """Unseen-class labels reached a training stage that must not observe them."""


class TrainingError(GenZ3DError):
    """Training could not run or did not produce a usable model."""


class EvaluationError(GenZ3DError):
    """Evaluation could not be carried out on the given inputs."""


def as_matrix(x, name="X", allow_empty=False):
    """Coerce to a 2-D float64 array (rows are samples), validating finiteness."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not allow_empty and a.shape[0] == 0:
        raise ValueError(f"{name} must not be empty")
    check_finite(a, name)
    return a


def as_points(x, name="points"):
    """Coerce to an (N, 3) float64 coordinate array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {a.shape}")
    if a.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one point")
    check_finite(a, name)
    return a


def as_labels(y, n=None, name="labels"):
    """Coerce to a 1-D integer label array, optionally checking its length."""
    a = np.asarray(y)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.floor(a)):
            raise ValueError(f"{name} must be integers")
        a = a.astype(np.int64)
    else:
        a = a.astype(np.int64)
    if n is not None and a.shape[0] != n:
        raise ValueError(f"{name} has length {a.shape[0]}, expected {n}")
    return a


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or infinite entries")
    return a


def check_fitted(estimator, attribute):
    """Raise NotFittedError unless ``estimator`` carries the fitted ``attribute``."""
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )
