"""Factorized multimodal pooling: bilinear, trilinear and temporal fusion.

The factorized bilinear form fuses two c-vectors through low-rank
projections U, V of shape (c, d, D):

    mfb(x, y)_i = 1^T (U_i^T x * V_i^T y)        (Hadamard product, sum over d)

Trilinear pooling adds a third factor W for a third modality:

    tp(x, y, z)_i = 1^T (U_i^T x * V_i^T y * W_i^T z)

and extends from vectors to c x K feature maps by summing the per-position
outputs (sum pooling). The pooled vector is passed through a signed square
root, f <- sign(f) * sqrt(|f|), then l2-normalized.

Temporal fusion sums the pooled-and-normalized vector of a segment's own
I-frame features with that of a neighbor segment's I-frame, sharing the
same MV and residual features, and classifies with scores = P^T f.

Forward passes carry a cache; the matching backward functions return exact
analytic gradients for every projection tensor and every input feature map.
All internals run batched over a leading instance axis; the single-instance
entry points wrap a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FusionParams:
    u: np.ndarray  # (c, d, D)
    v: np.ndarray  # (c, d, D)
    w: np.ndarray  # (c, d, D)
    p: np.ndarray  # (D, C) classifier

    def tensors(self, prefix: str = "fusion") -> dict:
        return {
            f"{prefix}.U": self.u,
            f"{prefix}.V": self.v,
            f"{prefix}.W": self.w,
            f"{prefix}.P": self.p,
        }

    def copy(self) -> "FusionParams":
        return FusionParams(self.u.copy(), self.v.copy(), self.w.copy(), self.p.copy())


@dataclass
class PairParams:
    """Two-factor pooling parameters plus classifier, for bilinear fusion."""

    u: np.ndarray  # (c, d, D)
    v: np.ndarray  # (c, d, D)
    p: np.ndarray  # (D, C)

    def tensors(self, prefix: str) -> dict:
        return {f"{prefix}.U": self.u, f"{prefix}.V": self.v, f"{prefix}.P": self.p}


@dataclass
class FusedVector:
    """A pooled vector; ``normalized`` is False only for exact-zero input."""

    values: np.ndarray
    normalized: bool


def init_fusion(rng: np.random.Generator, c: int, d: int, out_dim: int, n_classes: int):
    a = 1.0 / np.sqrt(c)
    ap = 1.0 / np.sqrt(out_dim)
    return FusionParams(
        u=rng.uniform(-a, a, size=(c, d, out_dim)),
        v=rng.uniform(-a, a, size=(c, d, out_dim)),
        w=rng.uniform(-a, a, size=(c, d, out_dim)),
        p=rng.uniform(-ap, ap, size=(out_dim, n_classes)),
    )


def init_pair(rng: np.random.Generator, c: int, d: int, out_dim: int, n_classes: int):
    a = 1.0 / np.sqrt(c)
    ap = 1.0 / np.sqrt(out_dim)
    return PairParams(
        u=rng.uniform(-a, a, size=(c, d, out_dim)),
        v=rng.uniform(-a, a, size=(c, d, out_dim)),
        p=rng.uniform(-ap, ap, size=(out_dim, n_classes)),
    )


# ---------------------------------------------------------------------------
# Vector and map pooling (forward only; the cached forms are batched below)
# ---------------------------------------------------------------------------


def mfb(x, y, u, v) -> np.ndarray:
    """Factorized bilinear pooling of two c-vectors -> D-vector."""
    ux = np.tensordot(u, np.asarray(x, dtype=np.float64), axes=([0], [0]))  # (d, D)
    vy = np.tensordot(v, np.asarray(y, dtype=np.float64), axes=([0], [0]))
    return (ux * vy).sum(axis=0)


def trilinear_pool(x, y, z, u, v, w) -> np.ndarray:
    """Trilinear pooling of three c-vectors -> D-vector."""
    ux = np.tensordot(u, np.asarray(x, dtype=np.float64), axes=([0], [0]))
    vy = np.tensordot(v, np.asarray(y, dtype=np.float64), axes=([0], [0]))
    wz = np.tensordot(w, np.asarray(z, dtype=np.float64), axes=([0], [0]))
    return (ux * vy * wz).sum(axis=0)


def trilinear_pool_maps(x_map, y_map, z_map, u, v, w) -> np.ndarray:
    """Sum-pooled trilinear output over the K positions of c x K maps."""
    if not x_map.shape == y_map.shape == z_map.shape:
        raise ValueError("feature maps must share (c, K)")
    c, d, out_dim = u.shape
    a = u.reshape(c, d * out_dim).T @ x_map  # (d*D, K)
    b = v.reshape(c, d * out_dim).T @ y_map
    cc = w.reshape(c, d * out_dim).T @ z_map
    return (a * b * cc).reshape(d, out_dim, -1).sum(axis=(0, 2))


def signed_sqrt_l2(f) -> FusedVector:
    """Signed square root then l2 normalization; zero maps to zero."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite input to signed_sqrt_l2")
    g = np.sign(f) * np.sqrt(np.abs(f))
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return FusedVector(g, False)
    return FusedVector(g / norm, True)


# ---------------------------------------------------------------------------
# Batched internals
# ---------------------------------------------------------------------------


def _flatten_maps(fmaps: np.ndarray) -> np.ndarray:
    """(B, c, K) -> (c, B*K) with columns ordered (instance, position)."""
    batch, c, positions = fmaps.shape
    return np.ascontiguousarray(fmaps.transpose(1, 0, 2)).reshape(c, batch * positions)


def _unflatten_maps(flat: np.ndarray, batch: int) -> np.ndarray:
    c = flat.shape[0]
    return flat.reshape(c, batch, -1).transpose(1, 0, 2)


def _pool(prod_flat: np.ndarray, d: int, out_dim: int, batch: int) -> np.ndarray:
    """Sum a (d*D, B*K) product tensor over d and K -> (D, B)."""
    return prod_flat.reshape(d, out_dim, batch, -1).sum(axis=(0, 3))


def _ssl2_batch(f: np.ndarray):
    """Column-wise signed sqrt + l2 for (D, B); zero columns stay zero."""
    g = np.sign(f) * np.sqrt(np.abs(f))
    norms = np.sqrt((g * g).sum(axis=0))
    out = g / np.where(norms > 0, norms, 1.0)
    return out, norms


def _ssl2_backward_batch(d_out, out, norms, f):
    safe = np.where(norms > 0, norms, 1.0)
    dot = (out * d_out).sum(axis=0)
    dg = (d_out - out * dot) / safe
    dg[:, norms == 0] = 0.0
    deriv = np.zeros_like(f)
    nonzero = f != 0
    deriv[nonzero] = 0.5 / np.sqrt(np.abs(f[nonzero]))
    return dg * deriv


@dataclass
class TtpCache:
    params: FusionParams
    x_own: np.ndarray  # (c, B*K) flattened inputs
    x_nb: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a_own: np.ndarray  # (d*D, B*K) projections
    a_nb: np.ndarray
    b: np.ndarray
    c: np.ndarray
    bc: np.ndarray  # b * c, shared by both temporal branches
    f_own: np.ndarray  # (D, B) pooled, pre-normalization
    f_nb: np.ndarray
    n_own: np.ndarray  # (D, B) normalized branch outputs
    n_nb: np.ndarray
    norm_own: np.ndarray  # (B,)
    norm_nb: np.ndarray
    f_ttp: np.ndarray  # (D, B)
    batch: int


@dataclass
class TtpGrads:
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    feat_i: np.ndarray
    feat_mv: np.ndarray
    feat_res: np.ndarray
    feat_i_neighbor: np.ndarray


def ttp_forward_batch(feat_i, feat_mv, feat_res, feat_i_neighbor, params: FusionParams):
    """Temporal trilinear fusion of batched (B, c, K) feature maps.

    Returns (f_ttp (D, B), scores (C, B), cache).
    """
    c, d, out_dim = params.u.shape
    batch = feat_i.shape[0]
    x_own = _flatten_maps(feat_i)
    x_nb = _flatten_maps(feat_i_neighbor)
    y = _flatten_maps(feat_mv)
    z = _flatten_maps(feat_res)

    u2 = params.u.reshape(c, d * out_dim)
    v2 = params.v.reshape(c, d * out_dim)
    w2 = params.w.reshape(c, d * out_dim)
    a_own = u2.T @ x_own
    a_nb = u2.T @ x_nb
    b = v2.T @ y
    cc = w2.T @ z
    bc = b * cc
    f_own = _pool(a_own * bc, d, out_dim, batch)
    f_nb = _pool(a_nb * bc, d, out_dim, batch)
    n_own, norm_own = _ssl2_batch(f_own)
    n_nb, norm_nb = _ssl2_batch(f_nb)
    f_ttp = n_own + n_nb
    scores = params.p.T @ f_ttp
    cache = TtpCache(
        params, x_own, x_nb, y, z, a_own, a_nb, b, cc, bc,
        f_own, f_nb, n_own, n_nb, norm_own, norm_nb, f_ttp, batch,
    )
    return f_ttp, scores, cache


def ttp_backward_batch(grad_scores: np.ndarray, cache: TtpCache) -> TtpGrads:
    """Exact gradients of the batched temporal trilinear forward pass."""
    params = cache.params
    c, d, out_dim = params.u.shape
    batch = cache.batch
    if grad_scores.shape != (params.p.shape[1], batch):
        raise ValueError("grad_scores shape does not match the cached forward pass")

    d_p = cache.f_ttp @ grad_scores.T
    d_fttp = params.p @ grad_scores
    df_own = _ssl2_backward_batch(d_fttp, cache.n_own, cache.norm_own, cache.f_own)
    df_nb = _ssl2_backward_batch(d_fttp, cache.n_nb, cache.norm_nb, cache.f_nb)

    positions = cache.x_own.shape[1] // batch
    shape4 = (d, out_dim, batch, positions)
    dh_own = df_own[None, :, :, None]  # broadcast over d and K
    dh_nb = df_nb[None, :, :, None]
    da_own = (dh_own * cache.bc.reshape(shape4)).reshape(d * out_dim, -1)
    da_nb = (dh_nb * cache.bc.reshape(shape4)).reshape(d * out_dim, -1)
    m = dh_own * cache.a_own.reshape(shape4) + dh_nb * cache.a_nb.reshape(shape4)
    d_b = (m * cache.c.reshape(shape4)).reshape(d * out_dim, -1)
    d_c = (m * cache.b.reshape(shape4)).reshape(d * out_dim, -1)

    u2 = params.u.reshape(c, d * out_dim)
    v2 = params.v.reshape(c, d * out_dim)
    w2 = params.w.reshape(c, d * out_dim)
    d_u = (cache.x_own @ da_own.T + cache.x_nb @ da_nb.T).reshape(c, d, out_dim)
    d_v = (cache.y @ d_b.T).reshape(c, d, out_dim)
    d_w = (cache.z @ d_c.T).reshape(c, d, out_dim)
    return TtpGrads(
        u=d_u,
        v=d_v,
        w=d_w,
        p=d_p,
        feat_i=_unflatten_maps(u2 @ da_own, batch),
        feat_mv=_unflatten_maps(v2 @ d_b, batch),
        feat_res=_unflatten_maps(w2 @ d_c, batch),
        feat_i_neighbor=_unflatten_maps(u2 @ da_nb, batch),
    )


def ttp_forward(feat_i, feat_mv, feat_res, feat_i_neighbor, params: FusionParams):
    """Single-instance temporal trilinear fusion.

    Returns (f_ttp (D,), scores (C,), cache); the cache feeds ttp_backward.
    """
    f_ttp, scores, cache = ttp_forward_batch(
        feat_i[None], feat_mv[None], feat_res[None], feat_i_neighbor[None], params
    )
    return f_ttp[:, 0], scores[:, 0], cache


def ttp_backward(grad_scores, cache: TtpCache) -> TtpGrads:
    """Single-instance gradients; feature gradients come back as (c, K)."""
    grads = ttp_backward_batch(np.asarray(grad_scores, dtype=np.float64)[:, None], cache)
    return TtpGrads(
        u=grads.u,
        v=grads.v,
        w=grads.w,
        p=grads.p,
        feat_i=grads.feat_i[0],
        feat_mv=grads.feat_mv[0],
        feat_res=grads.feat_res[0],
        feat_i_neighbor=grads.feat_i_neighbor[0],
    )


# ---------------------------------------------------------------------------
# Single-branch trilinear head (no temporal term) and bilinear pair head
# ---------------------------------------------------------------------------


@dataclass
class TpCache:
    params: FusionParams
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    f: np.ndarray
    n: np.ndarray
    norm: np.ndarray
    batch: int


def tp_forward_batch(feat_i, feat_mv, feat_res, params: FusionParams):
    """Trilinear pooling head on batched maps: pooled, normalized, classified."""
    c, d, out_dim = params.u.shape
    batch = feat_i.shape[0]
    x = _flatten_maps(feat_i)
    y = _flatten_maps(feat_mv)
    z = _flatten_maps(feat_res)
    a = params.u.reshape(c, d * out_dim).T @ x
    b = params.v.reshape(c, d * out_dim).T @ y
    cc = params.w.reshape(c, d * out_dim).T @ z
    f = _pool(a * b * cc, d, out_dim, batch)
    n, norm = _ssl2_batch(f)
    scores = params.p.T @ n
    return n, scores, TpCache(params, x, y, z, a, b, cc, f, n, norm, batch)


def tp_backward_batch(grad_scores: np.ndarray, cache: TpCache):
    params = cache.params
    c, d, out_dim = params.u.shape
    batch = cache.batch
    d_p = cache.n @ grad_scores.T
    d_n = params.p @ grad_scores
    df = _ssl2_backward_batch(d_n, cache.n, cache.norm, cache.f)

    positions = cache.x.shape[1] // batch
    shape4 = (d, out_dim, batch, positions)
    dh = df[None, :, :, None]
    a4 = cache.a.reshape(shape4)
    b4 = cache.b.reshape(shape4)
    c4 = cache.c.reshape(shape4)
    da = (dh * (b4 * c4)).reshape(d * out_dim, -1)
    d_b = (dh * (a4 * c4)).reshape(d * out_dim, -1)
    d_c = (dh * (a4 * b4)).reshape(d * out_dim, -1)

    grads = {
        "U": (cache.x @ da.T).reshape(c, d, out_dim),
        "V": (cache.y @ d_b.T).reshape(c, d, out_dim),
        "W": (cache.z @ d_c.T).reshape(c, d, out_dim),
        "P": d_p,
    }
    feat_grads = (
        _unflatten_maps(params.u.reshape(c, d * out_dim) @ da, batch),
        _unflatten_maps(params.v.reshape(c, d * out_dim) @ d_b, batch),
        _unflatten_maps(params.w.reshape(c, d * out_dim) @ d_c, batch),
    )
    return grads, feat_grads


@dataclass
class PairCache:
    params: PairParams
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    f: np.ndarray
    n: np.ndarray
    norm: np.ndarray
    batch: int


def pair_forward_batch(feat_x, feat_y, params: PairParams):
    """Factorized bilinear head on batched maps (sum pooling + ssl2 + P)."""
    c, d, out_dim = params.u.shape
    batch = feat_x.shape[0]
    x = _flatten_maps(feat_x)
    y = _flatten_maps(feat_y)
    a = params.u.reshape(c, d * out_dim).T @ x
    b = params.v.reshape(c, d * out_dim).T @ y
    f = _pool(a * b, d, out_dim, batch)
    n, norm = _ssl2_batch(f)
    scores = params.p.T @ n
    return n, scores, PairCache(params, x, y, a, b, f, n, norm, batch)


def pair_backward_batch(grad_scores: np.ndarray, cache: PairCache):
    params = cache.params
    c, d, out_dim = params.u.shape
    batch = cache.batch
    d_p = cache.n @ grad_scores.T
    d_n = params.p @ grad_scores
    df = _ssl2_backward_batch(d_n, cache.n, cache.norm, cache.f)

    positions = cache.x.shape[1] // batch
    shape4 = (d, out_dim, batch, positions)
    dh = df[None, :, :, None]
    da = (dh * cache.b.reshape(shape4)).reshape(d * out_dim, -1)
    d_b = (dh * cache.a.reshape(shape4)).reshape(d * out_dim, -1)

    grads = {
        "U": (cache.x @ da.T).reshape(c, d, out_dim),
        "V": (cache.y @ d_b.T).reshape(c, d, out_dim),
        "P": d_p,
    }
    feat_grads = (
        _unflatten_maps(params.u.reshape(c, d * out_dim) @ da, batch),
        _unflatten_maps(params.v.reshape(c, d * out_dim) @ d_b, batch),
    )
    return grads, feat_grads
