"""Patch-embedding feature extractor with hand-written gradients.

An input image is cut into non-overlapping p x p patches in row-major
order; each flattened patch (row-major, channel-last) passes through a
linear projection, ReLU, and a second linear layer, giving one c-vector
per patch. The output is a c x K feature map with K = (h/p) * (w/p).

All ops take a leading batch axis internally; the single-image entry
points wrap a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ExtractorParams:
    w1: np.ndarray  # (c, p*p*ch)
    b1: np.ndarray  # (c,)
    w2: np.ndarray  # (c, c)
    b2: np.ndarray  # (c,)
    patch_size: int

    @property
    def channels(self) -> int:
        return self.w1.shape[1] // (self.patch_size * self.patch_size)

    def tensors(self, prefix: str) -> dict:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.patch_size
        )


@dataclass
class ExtractorCache:
    patches: np.ndarray  # (B*K, p*p*ch)
    pre: np.ndarray  # (B*K, c) pre-ReLU activations
    act: np.ndarray  # (B*K, c)
    batch: int
    positions: int
    image_shape: tuple


def init_extractor(rng: np.random.Generator, channels: int, patch_size: int, feat_dim: int):
    """Uniform init in [-a, a] with a = 1/sqrt(fan_in) per layer."""
    in_dim = patch_size * patch_size * channels
    a1 = 1.0 / np.sqrt(in_dim)
    a2 = 1.0 / np.sqrt(feat_dim)
    return ExtractorParams(
        w1=rng.uniform(-a1, a1, size=(feat_dim, in_dim)),
        b1=rng.uniform(-a1, a1, size=feat_dim),
        w2=rng.uniform(-a2, a2, size=(feat_dim, feat_dim)),
        b2=rng.uniform(-a2, a2, size=feat_dim),
        patch_size=patch_size,
    )


def _to_patches(images: np.ndarray, p: int) -> np.ndarray:
    batch, h, w, ch = images.shape
    gh, gw = h // p, w // p
    patches = images.reshape(batch, gh, p, gw, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(patches).reshape(batch * gh * gw, p * p * ch)


def extract_features_batch(images: np.ndarray, params: ExtractorParams):
    """Feature maps (B, c, K) for a stack of images (B, h, w, ch)."""
    images = np.asarray(images, dtype=np.float64)
    p = params.patch_size
    batch, h, w, ch = images.shape
    if h % p or w % p:
        raise ValueError("image size must be a multiple of the patch size")
    if ch != params.channels:
        raise ValueError(f"expected {params.channels} input channels, got {ch}")
    positions = (h // p) * (w // p)

    patches = _to_patches(images, p)
    pre = patches @ params.w1.T + params.b1
    act = np.maximum(pre, 0.0)
    out = act @ params.w2.T + params.b2
    fmaps = out.reshape(batch, positions, -1).transpose(0, 2, 1)
    cache = ExtractorCache(patches, pre, act, batch, positions, images.shape)
    return fmaps, cache


def extract_features(image: np.ndarray, params: ExtractorParams):
    """Feature map (c, K) of a single (h, w, ch) image, plus backward cache."""
    fmaps, cache = extract_features_batch(np.asarray(image)[None], params)
    return fmaps[0], cache


def extract_features_backward(
    grad_out: np.ndarray,
    cache: ExtractorCache,
    params: ExtractorParams,
    with_input_grad: bool = False,
):
    """Analytic gradients of the forward map.

    ``grad_out`` is (c, K) or batched (B, c, K), matching the forward that
    produced ``cache``. Returns ({"w1", "b1", "w2", "b2"}, grad_images) with
    grad_images None unless requested.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 2:
        grad_out = grad_out[None]
    batch, c, positions = grad_out.shape
    if batch != cache.batch or positions != cache.positions or c != params.w2.shape[0]:
        raise ValueError("gradient shape does not match the cached forward pass")

    g_out = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(batch * positions, c)
    grads = {}
    grads["w2"] = g_out.T @ cache.act
    grads["b2"] = g_out.sum(axis=0)
    d_act = g_out @ params.w2
    d_pre = d_act * (cache.pre > 0)
    grads["w1"] = d_pre.T @ cache.patches
    grads["b1"] = d_pre.sum(axis=0)

    grad_images = None
    if with_input_grad:
        d_patches = d_pre @ params.w1
        _, h, w, ch = cache.image_shape
        p = params.patch_size
        gh, gw = h // p, w // p
        grad_images = (
            d_patches.reshape(batch, gh, gw, p, p, ch)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(batch, h, w, ch)
        )
    return grads, grad_images
