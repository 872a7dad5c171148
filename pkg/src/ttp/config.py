"""Run configuration shared by all CLI commands.

One flat config file of ``key = value`` lines ('#' starts a comment)
governs every command; command-line ``--key value`` flags override file
values. Unknown keys are rejected.
"""

from dataclasses import dataclass, fields

from .codec import CodecConfig
from .synthdata import SynthConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # codec
    gop_len: int = 12
    block_size: int = 8
    search_range: int = 8
    # synthetic dataset
    classes: str = "translate_right,translate_down,circle,oscillate_horizontal"
    videos_per_class: int = 50
    frames: int = 36
    height: int = 64
    width: int = 64
    shape_size: int = 16
    noise_amplitude: float = 8.0
    velocity: int = 2
    # training
    stage1_lr: float = 0.01
    stage2_lr: float = 0.005
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    max_plateau_decays: int = 2
    batch_size: int = 16
    stage1_epochs: int = 15
    stage2_epochs: int = 30
    seed: int = 42
    fusion_dim: int = 512
    factor_rank: int = 4
    feat_channels: int = 64
    patch_size: int = 8
    eval_segments: int = 25
    flip_augment: bool = True
    skip_stage1: bool = False
    # bench
    bench_warmup: int = 2
    bench_iters: int = 5
    # paths
    dataset_dir: str = "data"
    checkpoint_path: str = "model.ttpw"
    log_path: str = "train.log"
    report_path: str = "ablation"
    bench_path: str = "bench.txt"

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            gop_len=self.gop_len,
            block_size=self.block_size,
            search_range=self.search_range,
        )

    def synth_config(self) -> SynthConfig:
        names = tuple(n.strip() for n in self.classes.split(",") if n.strip())
        return SynthConfig(
            classes=names,
            videos_per_class=self.videos_per_class,
            frames=self.frames,
            height=self.height,
            width=self.width,
            shape_size=self.shape_size,
            noise_amplitude=self.noise_amplitude,
            velocity=self.velocity,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_lr=self.stage1_lr,
            stage2_lr=self.stage2_lr,
            plateau_factor=self.plateau_factor,
            plateau_patience=self.plateau_patience,
            max_plateau_decays=self.max_plateau_decays,
            batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            seed=self.seed,
            fusion_dim=self.fusion_dim,
            factor_rank=self.factor_rank,
            feat_channels=self.feat_channels,
            patch_size=self.patch_size,
            eval_segments=self.eval_segments,
            flip_augment=self.flip_augment,
        )


def _coerce(raw: str, typ):
    if typ is bool:
        value = raw.strip().lower()
        if value in ("true", "1", "yes", "on"):
            return True
        if value in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"invalid boolean {raw!r}")
    return typ(raw)


def parse_config_file(path) -> dict:
    """Read a key=value config file into a raw string mapping."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_run_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overlaid with config-file values, overlaid with CLI flags."""
    known = {f.name: f.type for f in fields(RunConfig)}
    kwargs = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, known[key]) if isinstance(raw, str) else raw
    return RunConfig(**kwargs)
