"""Lossless block-motion-compensated video codec.

A video is split into GOPs (groups of pictures) of ``gop_len`` frames. The
first frame of each GOP is stored verbatim (the I-frame); every following
frame is a P-frame stored as a per-block motion-vector grid plus a signed
per-pixel residual, both relative to the GOP's I-frame:

    frame[y, x, z] = i_frame[y + mv_y, x + mv_x, z] + residual[y, x, z]

where (mv_x, mv_y) is the offset of the block containing pixel (y, x).
Residuals are kept at full precision (int16), so decoding reproduces the
encoded video bit-exactly for any input.

Frames are ndarrays indexed [row, col, channel]; mv_x moves along columns
(horizontal), mv_y along rows (vertical).

Wire format (little-endian, no inter-field padding):

    magic "TTPV" | version u16 = 1 | h u32 | w u32 | frame_count u32
    | gop_len u16 | block_size u16 | search_range u16
    then GOPs in order. I-frame: h*w*3 bytes row-major RGB. P-frame:
    (h/b)*(w/b) pairs of i8 (mv_x, mv_y) in row-major grid order, then
    the residual as h*w*3 values of i16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"TTPV"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIHHH")


class BitstreamError(ValueError):
    """Malformed or corrupt bitstream."""


class BadMagicError(BitstreamError):
    """Stream does not start with the expected magic bytes."""


class TruncatedStreamError(BitstreamError):
    """Stream ends before all declared payload was read."""


class MvRangeError(BitstreamError):
    """Stored motion vector component outside [-search_range, search_range]."""


@dataclass(frozen=True)
class CodecConfig:
    """Encoder settings: GOP length, block size and search range in pixels."""

    gop_len: int = 12
    block_size: int = 8
    search_range: int = 8

    def __post_init__(self):
        if self.gop_len < 2:
            raise ValueError("gop_len must be >= 2")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not 0 <= self.search_range <= self.block_size:
            raise ValueError("search_range must lie in [0, block_size]")
        if self.search_range > 127:
            raise ValueError("search_range must fit in int8 storage")


@dataclass
class PFrame:
    mv: np.ndarray  # (h/b, w/b, 2) int8, [..., 0] = mv_x, [..., 1] = mv_y
    residual: np.ndarray  # (h, w, 3) int16 in [-255, 255]


@dataclass
class Gop:
    i_frame: np.ndarray  # (h, w, 3) uint8
    p_frames: list[PFrame] = field(default_factory=list)

    def __len__(self):
        return 1 + len(self.p_frames)


@dataclass
class Bitstream:
    """Parsed compressed video: header fields plus the GOP payloads."""

    height: int
    width: int
    frame_count: int
    gop_len: int
    block_size: int
    search_range: int
    gops: list[Gop] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(
                MAGIC,
                VERSION,
                self.height,
                self.width,
                self.frame_count,
                self.gop_len,
                self.block_size,
                self.search_range,
            )
        ]
        for gop in self.gops:
            parts.append(np.ascontiguousarray(gop.i_frame, dtype=np.uint8).tobytes())
            for pf in gop.p_frames:
                parts.append(np.ascontiguousarray(pf.mv, dtype=np.int8).tobytes())
                parts.append(pf.residual.astype("<i2").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < 4:
            raise TruncatedStreamError("stream shorter than magic")
        if data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {data[:4]!r}")
        if len(data) < _HEADER.size:
            raise TruncatedStreamError("truncated header")
        _, version, h, w, frame_count, n, b, s = _HEADER.unpack_from(data)
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        if frame_count < 1:
            raise BitstreamError("stream declares zero frames")
        if n < 1 or b < 1:
            raise BitstreamError("invalid gop_len or block_size")
        if h % b or w % b:
            raise BitstreamError("frame size not a multiple of block_size")

        gh, gw = h // b, w // b
        i_size = h * w * 3
        mv_size = gh * gw * 2
        res_size = h * w * 3 * 2
        offset = _HEADER.size

        def take(count):
            nonlocal offset
            if offset + count > len(data):
                raise TruncatedStreamError("stream ends inside a frame payload")
            chunk = data[offset : offset + count]
            offset += count
            return chunk

        gops = []
        remaining = frame_count
        while remaining > 0:
            gop_frames = min(n, remaining)
            i_frame = np.frombuffer(take(i_size), dtype=np.uint8).reshape(h, w, 3).copy()
            p_frames = []
            for _ in range(gop_frames - 1):
                mv = np.frombuffer(take(mv_size), dtype=np.int8).reshape(gh, gw, 2).copy()
                if np.abs(mv.astype(np.int16)).max(initial=0) > s:
                    raise MvRangeError("motion vector outside declared search range")
                residual = (
                    np.frombuffer(take(res_size), dtype="<i2").reshape(h, w, 3).astype(np.int16)
                )
                if np.abs(residual.astype(np.int32)).max(initial=0) > 255:
                    raise BitstreamError("residual sample outside [-255, 255]")
                p_frames.append(PFrame(mv=mv, residual=residual))
            gops.append(Gop(i_frame=i_frame, p_frames=p_frames))
            remaining -= gop_frames
        if offset != len(data):
            raise BitstreamError("trailing bytes after final GOP")
        return cls(h, w, frame_count, n, b, s, gops)


def _as_video(video) -> np.ndarray:
    arr = np.asarray(video)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError("video must have shape (frames, h, w, 3)")
    if arr.dtype != np.uint8:
        if arr.dtype.kind not in "iu" or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ValueError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def block_match(ref, target, block_origin, config: CodecConfig):
    """Best (mv_x, mv_y) for one block by exhaustive SAD search.

    ``block_origin`` is the (row, col) of the block's top-left pixel.
    Candidates that would read outside ``ref`` are skipped. Ties are broken
    by smallest |mv_x| + |mv_y|, then by scan order (mv_y outer, mv_x inner).
    """
    b = config.block_size
    s = config.search_range
    h, w = ref.shape[:2]
    top, left = block_origin
    tgt = target[top : top + b, left : left + b].astype(np.int32)
    best = None  # (sad, l1, mv_x, mv_y)
    for dy in range(-s, s + 1):
        if top + dy < 0 or top + dy + b > h:
            continue
        for dx in range(-s, s + 1):
            if left + dx < 0 or left + dx + b > w:
                continue
            cand = ref[top + dy : top + dy + b, left + dx : left + dx + b].astype(np.int32)
            sad = int(np.abs(cand - tgt).sum())
            l1 = abs(dx) + abs(dy)
            if best is None or sad < best[0] or (sad == best[0] and l1 < best[1]):
                best = (sad, l1, dx, dy)
    return best[2], best[3]


class _BlockMatcher:
    """Exhaustive matcher reusable across every P-frame of one GOP.

    Precomputes, for each block of the reference frame, all candidate
    windows in the search range (int16, channel-first, flattened) and a
    validity mask for candidates that stay inside the frame. Matching a
    target is then one vectorized abs-diff-sum plus tie-break selection.
    """

    def __init__(self, ref, config: CodecConfig):
        b = config.block_size
        s = config.search_range
        h, w = ref.shape[:2]
        self.block_size = b
        self.span = span = 2 * s + 1
        self.search_range = s
        self.grid = (h // b, w // b)
        gh, gw = self.grid

        ref_pad = np.pad(ref.astype(np.int16), ((s, s), (s, s), (0, 0)))
        # Windows at every padded pixel: (h+2s-b+1, w+2s-b+1, 3, b, b).
        windows = sliding_window_view(ref_pad, (b, b), axis=(0, 1))
        oy = np.arange(gh)[:, None] * b + np.arange(-s, s + 1)[None, :] + s
        ox = np.arange(gw)[:, None] * b + np.arange(-s, s + 1)[None, :] + s
        gathered = windows[oy[:, None, :, None], ox[None, :, None, :]]
        self.candidates = gathered.reshape(gh, gw, span * span, 3 * b * b)
        self._diff = np.empty_like(self.candidates)

        dy, dx = np.divmod(np.arange(span * span), span)
        self.l1 = np.abs(dy - s) + np.abs(dx - s)
        block_y = np.arange(gh)[:, None] * b
        block_x = np.arange(gw)[:, None] * b
        valid_y = (block_y + (dy - s) >= 0) & (block_y + b + (dy - s) <= h)  # (gh, span*span)
        valid_x = (block_x + (dx - s) >= 0) & (block_x + b + (dx - s) <= w)  # (gw, span*span)
        self._invalid = ~(valid_y[:, None, :] & valid_x[None, :, :])

    def match(self, target) -> np.ndarray:
        b = self.block_size
        gh, gw = self.grid
        tgt = np.ascontiguousarray(
            target.astype(np.int16).reshape(gh, b, gw, b, 3).transpose(0, 2, 4, 1, 3)
        ).reshape(gh, gw, 1, 3 * b * b)
        np.subtract(self.candidates, tgt, out=self._diff)
        np.abs(self._diff, out=self._diff)
        sad = self._diff.sum(axis=3, dtype=np.int32)
        sad[self._invalid] = np.iinfo(np.int32).max

        min_sad = sad.min(axis=2, keepdims=True)
        on_min = sad == min_sad
        l1_masked = np.where(on_min, self.l1, np.iinfo(np.int64).max)
        best_l1 = l1_masked.min(axis=2, keepdims=True)
        # argmax picks the first candidate in scan order among the survivors,
        # matching block_match's row-major (mv_y outer, mv_x inner) order.
        chosen = (on_min & (l1_masked == best_l1)).argmax(axis=2)

        mv = np.empty((gh, gw, 2), dtype=np.int8)
        mv[..., 0] = chosen % self.span - self.search_range
        mv[..., 1] = chosen // self.span - self.search_range
        return mv


def match_all_blocks(ref, target, config: CodecConfig) -> np.ndarray:
    """Motion-vector grid for every block of ``target`` against ``ref``.

    Vectorized equivalent of calling :func:`block_match` per block, with
    the same SAD minimization and deterministic tie-breaking.
    """
    return _BlockMatcher(ref, config).match(target)


def _infer_block_size(frame_shape, mv_shape):
    h, w = frame_shape[:2]
    gh, gw = mv_shape[:2]
    if gh < 1 or gw < 1 or h % gh or w % gw or h // gh != w // gw:
        raise ValueError("mv grid incompatible with frame shape")
    return h // gh


def motion_compensate(ref, mv) -> np.ndarray:
    """Predicted frame built by fetching each block's offset from ``ref``."""
    b = _infer_block_size(ref.shape, mv.shape)
    h, w = ref.shape[:2]
    mv_x = np.repeat(np.repeat(mv[..., 0].astype(np.int32), b, axis=0), b, axis=1)
    mv_y = np.repeat(np.repeat(mv[..., 1].astype(np.int32), b, axis=0), b, axis=1)
    rows = np.arange(h)[:, None] + mv_y
    cols = np.arange(w)[None, :] + mv_x
    if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
        raise BitstreamError("motion vector references pixels outside the frame")
    return ref[rows, cols]


def compute_residual(ref, target, mv) -> np.ndarray:
    """Per-pixel correction target - prediction, as int16."""
    pred = motion_compensate(ref, mv)
    return target.astype(np.int16) - pred.astype(np.int16)


def reconstruct_frame(i_frame, mv, residual) -> np.ndarray:
    """Exact P-frame reconstruction: prediction from ``i_frame`` plus residual."""
    pred = motion_compensate(i_frame, mv)
    out = pred.astype(np.int16) + residual
    if out.min() < 0 or out.max() > 255:
        raise BitstreamError("reconstructed sample outside [0, 255]")
    return out.astype(np.uint8)


def encode_video(video, config: CodecConfig = CodecConfig()) -> Bitstream:
    """Encode a (frames, h, w, 3) uint8 video into a Bitstream."""
    frames = _as_video(video)
    n_frames, h, w = frames.shape[:3]
    if n_frames < 1:
        raise ValueError("video must contain at least one frame")
    if h % config.block_size or w % config.block_size:
        raise ValueError("frame size must be a multiple of block_size")

    gops = []
    for start in range(0, n_frames, config.gop_len):
        chunk = frames[start : start + config.gop_len]
        i_frame = chunk[0].copy()
        matcher = _BlockMatcher(i_frame, config) if len(chunk) > 1 else None
        p_frames = []
        for f in chunk[1:]:
            mv = matcher.match(f)
            p_frames.append(PFrame(mv=mv, residual=compute_residual(i_frame, f, mv)))
        gops.append(Gop(i_frame=i_frame, p_frames=p_frames))
    return Bitstream(
        height=h,
        width=w,
        frame_count=n_frames,
        gop_len=config.gop_len,
        block_size=config.block_size,
        search_range=config.search_range,
        gops=gops,
    )


def decode_video(bs: Bitstream) -> np.ndarray:
    """Reconstruct the full (frames, h, w, 3) uint8 video from a Bitstream."""
    frames = np.empty((bs.frame_count, bs.height, bs.width, 3), dtype=np.uint8)
    i = 0
    for gop in bs.gops:
        frames[i] = gop.i_frame
        i += 1
        for pf in gop.p_frames:
            frames[i] = reconstruct_frame(gop.i_frame, pf.mv, pf.residual)
            i += 1
    if i != bs.frame_count:
        raise BitstreamError("GOP payload does not match declared frame count")
    return frames


def write_bitstream(bs: Bitstream, path):
    with open(path, "wb") as fh:
        fh.write(bs.to_bytes())


def read_bitstream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return Bitstream.from_bytes(fh.read())
