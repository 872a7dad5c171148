"""Synthetic labeled action videos for the desk-scale benchmark.

Four motion classes over procedurally textured scenes:

    translate_right      whole scene pans right (toroidal roll)
    translate_down       whole scene pans down
    circle               a shape's position orbits the frame center clockwise
    oscillate_horizontal a shape ping-pongs left/right

Appearance identifies the motion family (translating scenes carry a bright
square, orbiting/oscillating ones a bright disk), so still frames alone
can only separate class pairs; the motion pattern disambiguates within a
pair. Per-pixel uniform noise is added to every frame.

Generation is deterministic: video ``i`` of the dataset uses its own
generator seeded with ``seed + i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MOTION_CLASSES = (
    "translate_right",
    "translate_down",
    "circle",
    "oscillate_horizontal",
)

# (shape kind, RGB color) per motion class; pairs share appearance on purpose.
_APPEARANCE = {
    "translate_right": ("square", (230, 70, 60)),
    "translate_down": ("square", (230, 70, 60)),
    "circle": ("disk", (60, 200, 230)),
    "oscillate_horizontal": ("disk", (60, 200, 230)),
}


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple = MOTION_CLASSES
    videos_per_class: int = 50
    frames: int = 36
    height: int = 64
    width: int = 64
    shape_size: int = 16
    noise_amplitude: float = 8.0
    velocity: int = 2
    seed: int = 42

    def __post_init__(self):
        for name in self.classes:
            if name not in MOTION_CLASSES:
                raise ValueError(f"unknown motion class {name!r}")
        if self.shape_size > min(self.height, self.width) // 2:
            raise ValueError("shape larger than the frame allows")
        if self.frames < 1 or self.videos_per_class < 1:
            raise ValueError("frames and videos_per_class must be >= 1")
        if self.velocity < 1:
            raise ValueError("velocity must be >= 1")


@dataclass
class LabeledVideo:
    video: np.ndarray  # (frames, h, w, 3) uint8
    label: int
    split: str  # "train" | "val" | "test"
    class_name: str = field(default="")


def _texture(rng, h, w):
    """Blocky random texture: 8 px cells of muted random color."""
    cell = 8
    base = rng.integers(60, 180, size=(max(h // cell, 1), max(w // cell, 1), 3))
    tex = np.repeat(np.repeat(base, cell, axis=0), cell, axis=1)
    return tex[:h, :w].astype(np.float64)


def _draw_shape(canvas, kind, color, cx, cy, size):
    h, w = canvas.shape[:2]
    half = size // 2
    if kind == "square":
        y0, y1 = max(cy - half, 0), min(cy + half, h)
        x0, x1 = max(cx - half, 0), min(cx + half, w)
        canvas[y0:y1, x0:x1] = color
    else:  # disk
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
        canvas[mask] = color


def _shape_positions(kind, cfg: SynthConfig, rng):
    """Integer (cx, cy) per frame for the shape-motion classes."""
    h, w, n = cfg.height, cfg.width, cfg.frames
    half = cfg.shape_size // 2
    if kind == "circle":
        radius = min(h, w) // 4
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        dtheta = cfg.velocity / radius
        cx0, cy0 = w // 2, h // 2
        return [
            (
                int(round(cx0 + radius * np.cos(theta0 + t * dtheta))),
                int(round(cy0 + radius * np.sin(theta0 + t * dtheta))),
            )
            for t in range(n)
        ]
    if kind == "oscillate_horizontal":
        amp = 4 * cfg.velocity  # ping-pong range in pixels
        cy = int(rng.integers(half + 1, h - half - 1))
        cx0 = int(rng.integers(half + 1, w - half - amp - 1))
        phase = int(rng.integers(2 * amp))
        positions = []
        for t in range(n):
            k = (phase + t * cfg.velocity) % (2 * amp)
            offset = k if k <= amp else 2 * amp - k
            positions.append((cx0 + offset, cy))
        return positions
    raise ValueError(f"no positional motion for {kind!r}")


def _render_video(kind, cfg: SynthConfig, rng) -> np.ndarray:
    h, w, n = cfg.height, cfg.width, cfg.frames
    tex = _texture(rng, h, w)
    shape_kind, color = _APPEARANCE[kind]
    color = np.asarray(color, dtype=np.float64)
    half = cfg.shape_size // 2

    frames = np.empty((n, h, w, 3), dtype=np.float64)
    if kind in ("translate_right", "translate_down"):
        scene = tex.copy()
        cx = int(rng.integers(half, w - half))
        cy = int(rng.integers(half, h - half))
        _draw_shape(scene, shape_kind, color, cx, cy, cfg.shape_size)
        axis = 1 if kind == "translate_right" else 0
        for t in range(n):
            frames[t] = np.roll(scene, t * cfg.velocity, axis=axis)
    else:
        positions = _shape_positions(kind, cfg, rng)
        for t, (cx, cy) in enumerate(positions):
            canvas = tex.copy()
            _draw_shape(canvas, shape_kind, color, cx, cy, cfg.shape_size)
            frames[t] = canvas

    noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=frames.shape)
    return np.clip(np.rint(frames + noise), 0, 255).astype(np.uint8)


def _split_for(index, per_class):
    if index < int(per_class * 0.6):
        return "train"
    if index < int(per_class * 0.8):
        return "val"
    return "test"


def generate_dataset(cfg: SynthConfig = SynthConfig()) -> list[LabeledVideo]:
    """All videos of all classes, split 60/20/20 per class, label = class index."""
    videos = []
    global_index = 0
    for label, kind in enumerate(cfg.classes):
        for k in range(cfg.videos_per_class):
            rng = np.random.default_rng(cfg.seed + global_index)
            videos.append(
                LabeledVideo(
                    video=_render_video(kind, cfg, rng),
                    label=label,
                    split=_split_for(k, cfg.videos_per_class),
                    class_name=kind,
                )
            )
            global_index += 1
    return videos
