"""Input checks shared by the estimators."""

import numpy as np

from .autodiff import Tensor


class NotFittedError(ValueError, AttributeError):
    pass


def check_is_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call fit first.")


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def check_images(X, channels=3, resolution=None):
    """Return a finite float64 array of shape (N, channels, H, W)."""
    X = _array(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise ValueError(f"expected images of shape (N, {channels}, H, W), got {X.shape}")
    if resolution is not None and X.shape[2:] != (resolution, resolution):
        raise ValueError(f"expected {resolution}x{resolution} images, got {X.shape[2:]}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, n_classes, allow_unlabeled=False):
    """Return an int64 array (N, H, W); -1 marks ignored pixels when allowed."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected label maps of shape (N, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("label maps must hold integer class indices")
    y = y.astype(np.int64)
    low = -1 if allow_unlabeled else 0
    if y.size and (y.min() < low or y.max() >= n_classes):
        raise ValueError(f"class index outside [{low}, {n_classes})")
    return y


def check_activation_sets(phis, shapes=None):
    """Normalise activations to a list of stage arrays, each (N, C, r, r).

    Accepts either that layout or a list of per-sample activation sets.
    """
    phis = list(phis)
    if not phis:
        raise ValueError("empty activation set")
    first = _array(phis[0]) if not isinstance(phis[0], (list, tuple)) else None
    if first is None:
        # list of per-sample sets
        n_stages = len(phis[0])
        stages = [np.stack([_array(s[i]) for s in phis]) for i in range(n_stages)]
    else:
        stages = [_array(p) for p in phis]
        if stages[0].ndim == 3:
            stages = [s[None] for s in stages]
    n = stages[0].shape[0]
    for i, s in enumerate(stages):
        if s.ndim != 4 or s.shape[0] != n:
            raise ValueError(f"stage {i + 1} has shape {s.shape}; expected (N={n}, C, r, r)")
        if shapes is not None and tuple(s.shape[1:]) != tuple(shapes[i]):
            raise ValueError(f"stage {i + 1} has shape {s.shape[1:]}, expected {shapes[i]}")
    if shapes is not None and len(stages) != len(shapes):
        raise ValueError(f"expected {len(shapes)} stages, got {len(stages)}")
    return stages
