"""Shared test utilities: finite differences and tiny fixture datasets."""

import numpy as np

from ttp.codec import CodecConfig
from ttp.synthdata import LabeledVideo
from ttp.training import TrainConfig, prepare_dataset


def finite_difference(fn, arr, eps=1e-6):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``arr``.

    ``arr`` is perturbed in place entry by entry, so ``fn`` must read the
    live array on every call.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(*arr.shape):
        orig = arr[idx]
        arr[idx] = orig + eps
        up = fn()
        arr[idx] = orig - eps
        down = fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2.0 * eps)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-300)
    return np.linalg.norm((a - b).ravel()) / scale


def brightness_dataset(per_class=5, frames=12, size=16, n_classes=2):
    """Tiny prepared dataset whose classes differ by I-frame brightness."""
    rng = np.random.default_rng(7)
    bases = (60, 190, 120, 20)[:n_classes]
    videos = []
    for label, base in enumerate(bases):
        for k in range(per_class):
            v = base + rng.integers(-20, 21, size=(frames, size, size, 3))
            if k < per_class - 2:
                split = "train"
            elif k == per_class - 2:
                split = "val"
            else:
                split = "test"
            videos.append(
                LabeledVideo(
                    video=np.clip(v, 0, 255).astype(np.uint8), label=label, split=split
                )
            )
    return prepare_dataset(videos, CodecConfig())


def tiny_config(**overrides):
    base = dict(
        stage1_epochs=2,
        stage2_epochs=2,
        batch_size=4,
        fusion_dim=16,
        factor_rank=2,
        feat_channels=8,
        patch_size=8,
        eval_segments=4,
        seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)
