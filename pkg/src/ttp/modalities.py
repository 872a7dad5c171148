"""Per-segment tensor triples (I, MV, R) extracted from a bitstream.

Each GOP of a compressed video becomes one segment holding the normalized
I-frame, one dense motion-vector map per P-frame and one residual map per
P-frame. Normalization puts all three modalities on comparable scales:
I channels in [0, 1] via /255, residual channels in [0, 1] via
(v + 255) / 510, and motion components in [-1, 1] via /search_range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import Bitstream


@dataclass
class SegmentModalities:
    """Normalized tensors of one segment (GOP)."""

    i_frame: np.ndarray  # (h, w, 3) float64 in [0, 1]
    mv_frames: list[np.ndarray]  # (h, w, 2) float64 in [-1, 1], one per P-frame
    residual_frames: list[np.ndarray]  # (h, w, 3) float64 in [0, 1]
    index: int


@dataclass
class TrainingInstance:
    """One sampled (I, MV, R, neighbor I) tuple fed to the network."""

    i_frame: np.ndarray
    mv: np.ndarray
    residual: np.ndarray
    i_neighbor: np.ndarray
    delta_t: int  # neighbor offset after boundary clamping (0 only when
    # the video has a single segment)
    label: int = -1


def extract_modalities(bs: Bitstream) -> list[SegmentModalities]:
    """One SegmentModalities per GOP, with MV grids expanded per pixel."""
    b = bs.block_size
    # A zero search range stores all-zero vectors; avoid dividing by zero.
    mv_scale = float(max(bs.search_range, 1))
    segments = []
    for t, gop in enumerate(bs.gops):
        i_frame = gop.i_frame.astype(np.float64) / 255.0
        mv_frames = []
        residual_frames = []
        for pf in gop.p_frames:
            dense = np.repeat(np.repeat(pf.mv.astype(np.float64), b, axis=0), b, axis=1)
            mv_frames.append(dense / mv_scale)
            residual_frames.append((pf.residual.astype(np.float64) + 255.0) / 510.0)
        segments.append(SegmentModalities(i_frame, mv_frames, residual_frames, t))
    return segments


def _neighbor(segments, t, delta):
    clamped = min(max(t + delta, 0), len(segments) - 1)
    return segments[clamped], clamped - t


def sample_training_instance(
    segments, t: int, rng: np.random.Generator, label: int = -1
) -> TrainingInstance:
    """Random P-frame pick plus a neighbor I-frame at offset +-1.

    The offset is drawn uniformly from {-1, +1} and clamped to +1 at the
    first segment and -1 at the last. A single-segment video degenerates to
    the segment's own I-frame (delta_t = 0).
    """
    if not segments:
        raise ValueError("no segments to sample from")
    seg = segments[t]
    if not seg.mv_frames:
        raise ValueError(f"segment {t} has no P-frames")
    j = int(rng.integers(len(seg.mv_frames)))
    if t == 0:
        delta = 1
    elif t == len(segments) - 1:
        delta = -1
    else:
        delta = int(rng.integers(2)) * 2 - 1
    neighbor, delta = _neighbor(segments, t, delta)
    return TrainingInstance(
        i_frame=seg.i_frame,
        mv=seg.mv_frames[j],
        residual=seg.residual_frames[j],
        i_neighbor=neighbor.i_frame,
        delta_t=delta,
        label=label,
    )


def sample_test_instances(
    segments, count: int, rng: np.random.Generator, label: int = -1
) -> list[TrainingInstance]:
    """Deterministic test-time instances over ``count`` sampled segments.

    Segments are drawn uniformly with replacement; when ``count`` is at
    least the number of usable segments, every one is taken exactly once.
    The P-frame is the middle one, and the neighbor offset is +1 for the
    first segment and -1 otherwise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    eligible = [seg for seg in segments if seg.mv_frames]
    if not eligible:
        raise ValueError("no segment has P-frames")
    if count >= len(eligible):
        chosen = list(eligible)
    else:
        picks = rng.integers(len(eligible), size=count)
        chosen = [eligible[int(i)] for i in picks]
    instances = []
    for seg in chosen:
        delta = 1 if seg.index == 0 else -1
        neighbor, delta = _neighbor(segments, seg.index, delta)
        j = len(seg.mv_frames) // 2
        instances.append(
            TrainingInstance(
                i_frame=seg.i_frame,
                mv=seg.mv_frames[j],
                residual=seg.residual_frames[j],
                i_neighbor=neighbor.i_frame,
                delta_t=delta,
                label=label,
            )
        )
    return instances


def flip_instance(inst: TrainingInstance) -> TrainingInstance:
    """Horizontal flip of all tensors; the MV x-component changes sign."""
    mv = np.flip(inst.mv, axis=1).copy()
    mv[..., 0] = -mv[..., 0]
    return TrainingInstance(
        i_frame=np.flip(inst.i_frame, axis=1).copy(),
        mv=mv,
        residual=np.flip(inst.residual, axis=1).copy(),
        i_neighbor=np.flip(inst.i_neighbor, axis=1).copy(),
        delta_t=inst.delta_t,
        label=inst.label,
    )


def dump_tensor(arr, path):
    """Debug dump: rank u8, dims u32 each, then f32 little-endian data."""
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    """Inverse of :func:`dump_tensor` (values come back as float32)."""
    with open(path, "rb") as fh:
        data = fh.read()
    rank = struct.unpack_from("<B", data)[0]
    dims = struct.unpack_from(f"<{rank}I", data, 1)
    arr = np.frombuffer(data, dtype="<f4", offset=1 + 4 * rank)
    return arr.reshape(dims).copy()
