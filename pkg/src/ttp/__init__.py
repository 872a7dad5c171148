"""Compressed-domain action recognition with temporal trilinear pooling.

A lossless block-motion-compensated codec supplies three modalities per
video segment (I-frame, motion vectors, residuals); patch-embedding
extractors turn them into feature maps; a factorized trilinear pooling
head fuses them, optionally with a neighbor segment's I-frame for temporal
context; training, evaluation, ablation and timing run from one CLI.
"""

from .codec import (
    BadMagicError,
    Bitstream,
    BitstreamError,
    CodecConfig,
    MvRangeError,
    TruncatedStreamError,
    block_match,
    compute_residual,
    decode_video,
    encode_video,
    reconstruct_frame,
)
from .features import ExtractorParams, extract_features, extract_features_backward
from .fusion import (
    FusedVector,
    FusionParams,
    mfb,
    signed_sqrt_l2,
    trilinear_pool,
    trilinear_pool_maps,
    ttp_backward,
    ttp_forward,
)
from .modalities import (
    SegmentModalities,
    TrainingInstance,
    extract_modalities,
    sample_test_instances,
    sample_training_instance,
)
from .synthdata import SynthConfig, generate_dataset
from .training import (
    AblationReport,
    DivergenceError,
    TrainConfig,
    TrainState,
    adam_step,
    bench,
    cross_entropy,
    evaluate,
    run_ablation,
    train_stage1,
    train_stage2,
)

__all__ = [name for name in dir() if not name.startswith("_")]
