"""Command-line entry point.

    ttp encode INPUT OUTPUT [--config FILE] [--key value ...]
    ttp decode INPUT OUTPUT [--config FILE] [--key value ...]
    ttp gen-data | train | eval | ablate | bench [--config FILE] [--key value ...]

Exit codes: 0 success, 1 unexpected error, 2 missing input or prerequisite,
3 bad magic, 4 parse or validation error, 5 training diverged.

Raw video interchange format (little-endian): magic "TTPR", h u32, w u32,
frame_count u32, then frames as row-major RGB bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import (
    BadMagicError,
    BitstreamError,
    decode_video,
    encode_video,
    read_bitstream,
    write_bitstream,
)
from .config import RunConfig, build_run_config, parse_config_file
from .features import init_extractor
from .fusion import init_fusion
from .modalities import extract_modalities
from .synthdata import generate_dataset
from .training import (
    MODALITIES,
    MODALITY_CHANNELS,
    DivergenceError,
    PreparedVideo,
    TtpModel,
    bench,
    evaluate,
    format_bench_table,
    format_report_kv,
    format_report_table,
    run_ablation,
    train_stage1,
    train_stage2,
    ttp_model_from_tensors,
)

RAW_MAGIC = b"TTPR"
_RAW_HEADER = struct.Struct("<4sIII")


def write_raw_video(frames: np.ndarray, path):
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    n, h, w = frames.shape[:3]
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, h, w, n))
        fh.write(frames.tobytes())


def read_raw_video(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise BadMagicError(f"raw video file has bad magic {data[:4]!r}")
    if len(data) < _RAW_HEADER.size:
        raise BitstreamError("truncated raw video header")
    _, h, w, n = _RAW_HEADER.unpack_from(data)
    expected = _RAW_HEADER.size + n * h * w * 3
    if len(data) != expected:
        raise BitstreamError(
            f"raw video payload is {len(data)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=_RAW_HEADER.size)
    return pixels.reshape(n, h, w, 3).copy()


def load_dataset(cfg: RunConfig) -> list:
    """Read the manifest and extract modalities for every listed bitstream."""
    root = Path(cfg.dataset_dir)
    text = (root / "manifest.txt").read_text()
    items = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rel, label, split = line.split("\t")
        items.append(
            PreparedVideo(
                segments=extract_modalities(read_bitstream(root / rel)),
                label=int(label),
                split=split,
            )
        )
    if not items:
        raise ValueError("dataset manifest is empty")
    return items


def cmd_encode(args, cfg: RunConfig) -> int:
    frames = read_raw_video(args.input)
    write_bitstream(encode_video(frames, cfg.codec_config()), args.output)
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    frames = decode_video(read_bitstream(args.input))
    write_raw_video(frames, args.output)
    return 0


def cmd_gen_data(args, cfg: RunConfig) -> int:
    videos = generate_dataset(cfg.synth_config())
    codec_cfg = cfg.codec_config()
    root = Path(cfg.dataset_dir)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    counters: dict = {}
    lines = []
    for video in videos:
        k = counters.get(video.class_name, 0)
        counters[video.class_name] = k + 1
        rel = f"videos/{video.class_name}_{k:03d}.ttpv"
        write_bitstream(encode_video(video.video, codec_cfg), root / rel)
        lines.append(f"{rel}\t{video.label}\t{video.split}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(videos)} encoded videos and manifest.txt to {root}")
    return 0


def _write_log(path, history):
    lines = ["# stage\tepoch\tloss\tval_acc\tlr"]
    lines += [
        f"{tag}\t{epoch}\t{loss:.6f}\t{val:.4f}\t{lr:.6g}"
        for tag, epoch, loss, val, lr in history
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args, cfg: RunConfig) -> int:
    items = load_dataset(cfg)
    tc = cfg.train_config()
    if cfg.skip_stage1:
        stage1_models, history = None, []
    else:
        stage1_models, _, history = train_stage1(items, tc)
    model, hist2 = train_stage2(items, stage1_models, tc, "ttp")
    history.extend(hist2)
    save_checkpoint(cfg.checkpoint_path, model.param_tensors())
    _write_log(cfg.log_path, history)
    print(f"checkpoint written to {cfg.checkpoint_path}, log to {cfg.log_path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = Path(cfg.checkpoint_path)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; run `ttp train` first")
    model = ttp_model_from_tensors(load_checkpoint(ckpt), cfg.patch_size)
    items = load_dataset(cfg)
    tc = cfg.train_config()
    test_items = [it for it in items if it.split == "test"]
    acc = evaluate(model, test_items, tc, np.random.default_rng(tc.seed))
    print(f"top1 {acc:.4f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    items = load_dataset(cfg)
    report, history = run_ablation(items, cfg.train_config())
    table = format_report_table(report)
    Path(f"{cfg.report_path}.txt").write_text(table)
    Path(f"{cfg.report_path}.kv").write_text(format_report_kv(report))
    _write_log(f"{cfg.report_path}.log", history)
    sys.stdout.write(table)
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    tc = cfg.train_config()
    ckpt = Path(cfg.checkpoint_path)
    if ckpt.exists():
        model = ttp_model_from_tensors(load_checkpoint(ckpt), cfg.patch_size)
    else:
        rng = np.random.default_rng(tc.seed)
        extractors = {
            mod: init_extractor(rng, MODALITY_CHANNELS[mod], tc.patch_size, tc.feat_channels)
            for mod in MODALITIES
        }
        n_classes = len(cfg.synth_config().classes)
        fusion = init_fusion(rng, tc.feat_channels, tc.factor_rank, tc.fusion_dim, n_classes)
        model = TtpModel(extractors, fusion)

    manifest = Path(cfg.dataset_dir) / "manifest.txt"
    if manifest.exists():
        rel = manifest.read_text().splitlines()[0].split("\t")[0]
        bs = read_bitstream(Path(cfg.dataset_dir) / rel)
    else:
        synth = replace(cfg.synth_config(), videos_per_class=1)
        bs = encode_video(generate_dataset(synth)[0].video, cfg.codec_config())

    timings = bench(model, bs, cfg.bench_warmup, cfg.bench_iters)
    table = format_bench_table(timings)
    Path(cfg.bench_path).write_text(table)
    sys.stdout.write(table)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="key=value config file")
    for f in dataclasses.fields(RunConfig):
        shared.add_argument(f"--{f.name}", default=None, metavar="V")

    parser = argparse.ArgumentParser(prog="ttp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_enc = sub.add_parser("encode", parents=[shared], help="raw video -> bitstream")
    p_enc.add_argument("input")
    p_enc.add_argument("output")
    p_enc.set_defaults(func=cmd_encode)

    p_dec = sub.add_parser("decode", parents=[shared], help="bitstream -> raw video")
    p_dec.add_argument("input")
    p_dec.add_argument("output")
    p_dec.set_defaults(func=cmd_decode)

    for name, func, help_text in (
        ("gen-data", cmd_gen_data, "generate the synthetic dataset"),
        ("train", cmd_train, "two-stage training, writes a checkpoint"),
        ("eval", cmd_eval, "top-1 accuracy of a checkpoint on the test split"),
        ("ablate", cmd_ablate, "train and evaluate all seven variants"),
        ("bench", cmd_bench, "per-frame timing of preprocess and forward"),
    ):
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides = {
            f.name: getattr(args, f.name)
            for f in dataclasses.fields(RunConfig)
            if getattr(args, f.name) is not None
        }
        cfg = build_run_config(file_values, overrides)
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 2
    except BadMagicError as exc:
        print(f"error: bad magic: {exc}", file=sys.stderr)
        return 3
    except (BitstreamError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
