"""Training and evaluation: loss, optimizer, two-stage schedule, ablation.

Stage 1 trains one patch-embedding extractor per modality with a temporary
linear head (global average over positions, then c -> C). Stage 2 jointly
fine-tunes the extractors together with a fusion head: the full temporal
trilinear model, the single-branch trilinear model, or the summed pairwise
bilinear model, depending on the requested variant.

Each epoch samples 3 instances per training video; batches are averaged in
a fixed order and stepped with Adam. The learning rate is multiplied by
``plateau_factor`` whenever validation accuracy fails to improve for
``plateau_patience`` epochs (at most ``max_plateau_decays`` times).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .codec import Bitstream, CodecConfig, encode_video
from .features import (
    ExtractorParams,
    extract_features_backward,
    extract_features_batch,
    init_extractor,
)
from .fusion import (
    FusionParams,
    PairParams,
    init_fusion,
    init_pair,
    pair_backward_batch,
    pair_forward_batch,
    tp_backward_batch,
    tp_forward_batch,
    ttp_backward_batch,
    ttp_forward_batch,
)
from .modalities import (
    extract_modalities,
    flip_instance,
    sample_test_instances,
    sample_training_instance,
)

MODALITIES = ("i", "mv", "r")
MODALITY_CHANNELS = {"i": 3, "mv": 2, "r": 3}
MODALITY_ATTR = {"i": "i_frame", "mv": "mv", "r": "residual"}
PAIRS = (("i", "mv"), ("i", "r"), ("mv", "r"))
VARIANT_ORDER = ("I", "MV", "R", "I+MV+R", "BP", "TP", "TTP")
INSTANCES_PER_VIDEO = 3
_VARIANT_STREAM = {"bp": 1, "tp": 2, "ttp": 3}


class DivergenceError(RuntimeError):
    """Raised when an optimizer step sees non-finite gradients."""


@dataclass(frozen=True)
class TrainConfig:
    stage1_lr: float = 0.01
    stage2_lr: float = 0.005
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    max_plateau_decays: int = 2
    batch_size: int = 16
    stage1_epochs: int = 15
    stage2_epochs: int = 30
    seed: int = 42
    fusion_dim: int = 512  # D
    factor_rank: int = 4  # d
    feat_channels: int = 64  # c
    patch_size: int = 8  # p
    eval_segments: int = 25
    flip_augment: bool = True

    def __post_init__(self):
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.fusion_dim, self.factor_rank, self.feat_channels, self.patch_size) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class TrainState:
    """Parameters plus Adam moments and plateau bookkeeping."""

    params: dict
    m: dict
    v: dict
    step: int = 0
    best_val: float = float("-inf")
    stale_epochs: int = 0
    lr_decays: int = 0


def make_train_state(params: dict) -> TrainState:
    return TrainState(
        params=params,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(state: TrainState, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """One bias-corrected Adam update, applied to the parameters in place."""
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        state.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(scores, label: int) -> float:
    """Negative log softmax probability of the true class (max-stabilized)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    if not 0 <= label < scores.shape[0]:
        raise ValueError(f"label {label} outside [0, {scores.shape[0]})")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _ce_batch(scores: np.ndarray, labels):
    """Mean loss over a (B, C) batch plus the batch-averaged score gradient."""
    labels = np.asarray(labels)
    batch = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = float(-log_probs[np.arange(batch), labels].mean())
    d_scores = np.exp(log_probs)
    d_scores[np.arange(batch), labels] -= 1.0
    return loss, d_scores / batch


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


@dataclass
class PreparedVideo:
    segments: list
    label: int
    split: str


def prepare_dataset(videos, codec_cfg: CodecConfig = CodecConfig()) -> list:
    """Encode each labeled video and extract its modality segments."""
    return [
        PreparedVideo(
            segments=extract_modalities(encode_video(v.video, codec_cfg)),
            label=v.label,
            split=v.split,
        )
        for v in videos
    ]


def _split(items, name):
    return [it for it in items if it.split == name]


def _n_classes(items) -> int:
    return max(it.label for it in items) + 1


def _stack(instances, attr):
    return np.stack([getattr(inst, attr) for inst in instances])


# ---------------------------------------------------------------------------
# Models (forward scoring plus loss/gradients for the trainable ones)
# ---------------------------------------------------------------------------


class ModalityModel:
    """Single-modality extractor with a mean-pooled linear head."""

    def __init__(self, modality: str, extractor: ExtractorParams, head_w, head_b):
        self.modality = modality
        self.extractor = extractor
        self.head_w = head_w  # (C, c)
        self.head_b = head_b  # (C,)

    def param_tensors(self) -> dict:
        tensors = self.extractor.tensors(self.modality)
        tensors[f"{self.modality}.head_w"] = self.head_w
        tensors[f"{self.modality}.head_b"] = self.head_b
        return tensors

    def score_batch(self, instances) -> np.ndarray:
        x = _stack(instances, MODALITY_ATTR[self.modality])
        fmaps, _ = extract_features_batch(x, self.extractor)
        pooled = fmaps.mean(axis=2)
        return pooled @ self.head_w.T + self.head_b

    def loss_and_grads(self, instances, labels):
        x = _stack(instances, MODALITY_ATTR[self.modality])
        fmaps, cache = extract_features_batch(x, self.extractor)
        pooled = fmaps.mean(axis=2)
        scores = pooled @ self.head_w.T + self.head_b
        loss, d_scores = _ce_batch(scores, labels)
        d_pooled = d_scores @ self.head_w
        d_fmaps = np.broadcast_to(
            d_pooled[:, :, None] / fmaps.shape[2], fmaps.shape
        )
        ext_grads, _ = extract_features_backward(d_fmaps, cache, self.extractor)
        grads = {f"{self.modality}.{k}": g for k, g in ext_grads.items()}
        grads[f"{self.modality}.head_w"] = d_scores.T @ pooled
        grads[f"{self.modality}.head_b"] = d_scores.sum(axis=0)
        return loss, grads


class LateFusionModel:
    """Sum of the three single-modality heads' scores (no joint training)."""

    def __init__(self, models):
        self.models = list(models)

    def score_batch(self, instances) -> np.ndarray:
        return sum(m.score_batch(instances) for m in self.models)


class TtpModel:
    """Three extractors plus the temporal trilinear fusion head."""

    def __init__(self, extractors: dict, fusion: FusionParams):
        self.extractors = extractors
        self.fusion = fusion

    def param_tensors(self) -> dict:
        tensors = {}
        for mod in MODALITIES:
            tensors.update(self.extractors[mod].tensors(mod))
        tensors.update(self.fusion.tensors("fusion"))
        return tensors

    def _features(self, instances):
        feats, caches = [], []
        for attr, mod in (
            ("i_frame", "i"),
            ("mv", "mv"),
            ("residual", "r"),
            ("i_neighbor", "i"),
        ):
            fmaps, cache = extract_features_batch(
                _stack(instances, attr), self.extractors[mod]
            )
            feats.append(fmaps)
            caches.append(cache)
        return feats, caches

    def score_batch(self, instances) -> np.ndarray:
        feats, _ = self._features(instances)
        _, scores, _ = ttp_forward_batch(*feats, self.fusion)
        return scores.T

    def loss_and_grads(self, instances, labels):
        feats, caches = self._features(instances)
        _, scores, fcache = ttp_forward_batch(*feats, self.fusion)
        loss, d_scores = _ce_batch(scores.T, labels)
        g = ttp_backward_batch(np.ascontiguousarray(d_scores.T), fcache)
        grads = {"fusion.U": g.u, "fusion.V": g.v, "fusion.W": g.w, "fusion.P": g.p}
        gi, _ = extract_features_backward(g.feat_i, caches[0], self.extractors["i"])
        gmv, _ = extract_features_backward(g.feat_mv, caches[1], self.extractors["mv"])
        gr, _ = extract_features_backward(g.feat_res, caches[2], self.extractors["r"])
        gnb, _ = extract_features_backward(g.feat_i_neighbor, caches[3], self.extractors["i"])
        for key in gi:  # the I extractor serves both temporal branches
            gi[key] = gi[key] + gnb[key]
        for mod, gset in (("i", gi), ("mv", gmv), ("r", gr)):
            grads.update({f"{mod}.{k}": v for k, v in gset.items()})
        return loss, grads


class TpModel:
    """Three extractors plus the single-branch trilinear head."""

    def __init__(self, extractors: dict, fusion: FusionParams):
        self.extractors = extractors
        self.fusion = fusion

    def param_tensors(self) -> dict:
        tensors = {}
        for mod in MODALITIES:
            tensors.update(self.extractors[mod].tensors(mod))
        tensors.update(self.fusion.tensors("fusion"))
        return tensors

    def _features(self, instances):
        feats, caches = [], []
        for attr, mod in (("i_frame", "i"), ("mv", "mv"), ("residual", "r")):
            fmaps, cache = extract_features_batch(
                _stack(instances, attr), self.extractors[mod]
            )
            feats.append(fmaps)
            caches.append(cache)
        return feats, caches

    def score_batch(self, instances) -> np.ndarray:
        feats, _ = self._features(instances)
        _, scores, _ = tp_forward_batch(*feats, self.fusion)
        return scores.T

    def loss_and_grads(self, instances, labels):
        feats, caches = self._features(instances)
        _, scores, fcache = tp_forward_batch(*feats, self.fusion)
        loss, d_scores = _ce_batch(scores.T, labels)
        fusion_grads, feat_grads = tp_backward_batch(
            np.ascontiguousarray(d_scores.T), fcache
        )
        grads = {f"fusion.{k}": v for k, v in fusion_grads.items()}
        for (attr, mod), d_fmap, cache in zip(
            (("i_frame", "i"), ("mv", "mv"), ("residual", "r")), feat_grads, caches
        ):
            gset, _ = extract_features_backward(d_fmap, cache, self.extractors[mod])
            grads.update({f"{mod}.{k}": v for k, v in gset.items()})
        return loss, grads


class PairSumModel:
    """Pairwise factorized bilinear pooling over the three modality pairs.

    Each pair owns its projections and linear head; the three heads' scores
    are summed before the softmax.
    """

    def __init__(self, extractors: dict, pairs: dict):
        self.extractors = extractors
        self.pairs = pairs  # {(mod_a, mod_b): PairParams}

    def param_tensors(self) -> dict:
        tensors = {}
        for mod in MODALITIES:
            tensors.update(self.extractors[mod].tensors(mod))
        for (a, b), params in self.pairs.items():
            tensors.update(params.tensors(f"bp.{a}_{b}"))
        return tensors

    def _features(self, instances):
        feats, caches = {}, {}
        for mod in MODALITIES:
            fmaps, cache = extract_features_batch(
                _stack(instances, MODALITY_ATTR[mod]), self.extractors[mod]
            )
            feats[mod] = fmaps
            caches[mod] = cache
        return feats, caches

    def score_batch(self, instances) -> np.ndarray:
        feats, _ = self._features(instances)
        total = None
        for (a, b), params in self.pairs.items():
            _, scores, _ = pair_forward_batch(feats[a], feats[b], params)
            total = scores if total is None else total + scores
        return total.T

    def loss_and_grads(self, instances, labels):
        feats, caches = self._features(instances)
        pair_caches = {}
        total = None
        for (a, b), params in self.pairs.items():
            _, scores, cache = pair_forward_batch(feats[a], feats[b], params)
            pair_caches[(a, b)] = cache
            total = scores if total is None else total + scores
        loss, d_scores = _ce_batch(total.T, labels)
        d_scores_t = np.ascontiguousarray(d_scores.T)

        grads = {}
        d_feats = {mod: np.zeros_like(feats[mod]) for mod in MODALITIES}
        for (a, b), params in self.pairs.items():
            pair_grads, (d_fa, d_fb) = pair_backward_batch(d_scores_t, pair_caches[(a, b)])
            grads.update({f"bp.{a}_{b}.{k}": v for k, v in pair_grads.items()})
            d_feats[a] += d_fa
            d_feats[b] += d_fb
        for mod in MODALITIES:
            gset, _ = extract_features_backward(d_feats[mod], caches[mod], self.extractors[mod])
            grads.update({f"{mod}.{k}": v for k, v in gset.items()})
        return loss, grads


def ttp_model_from_tensors(tensors: dict, patch_size: int) -> TtpModel:
    """Rebuild a TtpModel from a checkpoint's named tensors."""
    extractors = {
        mod: ExtractorParams(
            tensors[f"{mod}.w1"],
            tensors[f"{mod}.b1"],
            tensors[f"{mod}.w2"],
            tensors[f"{mod}.b2"],
            patch_size,
        )
        for mod in MODALITIES
    }
    fusion = FusionParams(
        tensors["fusion.U"], tensors["fusion.V"], tensors["fusion.W"], tensors["fusion.P"]
    )
    return TtpModel(extractors, fusion)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(model, items, config: TrainConfig, rng: np.random.Generator) -> float:
    """Video-level top-1 accuracy with score averaging over instances.

    Scores are averaged across the sampled test instances (and across their
    horizontal flips when flip averaging is enabled); argmax ties resolve to
    the lowest class id.
    """
    if not items:
        raise ValueError("empty evaluation set")
    correct = 0
    for item in items:
        instances = sample_test_instances(
            item.segments, config.eval_segments, rng, label=item.label
        )
        if config.flip_augment:
            instances = instances + [flip_instance(inst) for inst in instances]
        scores = model.score_batch(instances)
        if int(np.argmax(scores.mean(axis=0))) == item.label:
            correct += 1
    return correct / len(items)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _fit(model, train_items, val_items, config: TrainConfig, lr: float,
         epochs: int, rng: np.random.Generator, tag: str, history: list) -> TrainState:
    """Generic epoch/batch/plateau loop over a trainable model."""
    state = make_train_state(model.param_tensors())
    eval_seed = int(rng.integers(2**31))
    for epoch in range(epochs):
        order = rng.permutation(len(train_items))
        batch, labels = [], []
        loss_sum = 0.0
        n_insts = 0

        def flush():
            nonlocal loss_sum, n_insts
            loss, grads = model.loss_and_grads(batch, labels)
            adam_step(state, grads, lr)
            loss_sum += loss * len(batch)
            n_insts += len(batch)
            batch.clear()
            labels.clear()

        for idx in order:
            item = train_items[idx]
            eligible = [seg.index for seg in item.segments if seg.mv_frames]
            for _ in range(INSTANCES_PER_VIDEO):
                t = eligible[int(rng.integers(len(eligible)))]
                inst = sample_training_instance(item.segments, t, rng, label=item.label)
                if config.flip_augment and rng.integers(2):
                    inst = flip_instance(inst)
                batch.append(inst)
                labels.append(item.label)
                if len(batch) == config.batch_size:
                    flush()
        if batch:
            flush()

        val_acc = evaluate(model, val_items, config, np.random.default_rng(eval_seed))
        history.append((tag, epoch, loss_sum / max(n_insts, 1), val_acc, lr))
        if val_acc > state.best_val:
            state.best_val = val_acc
            state.stale_epochs = 0
        else:
            state.stale_epochs += 1
            if (
                state.stale_epochs >= config.plateau_patience
                and state.lr_decays < config.max_plateau_decays
            ):
                lr *= config.plateau_factor
                state.lr_decays += 1
                state.stale_epochs = 0
    return state


def train_stage1(items, config: TrainConfig):
    """Independently train the three modality extractors with linear heads.

    Returns ({modality: ModalityModel}, {modality: test accuracy}, history).
    """
    train_items = _split(items, "train")
    val_items = _split(items, "val")
    test_items = _split(items, "test")
    if not train_items or not val_items or not test_items:
        raise ValueError("dataset must contain train, val and test splits")
    n_classes = _n_classes(items)
    present = {it.label for it in train_items}
    if present != set(range(n_classes)):
        raise ValueError("every class needs at least one training video")

    seeds = np.random.SeedSequence(config.seed).spawn(len(MODALITIES))
    models, accuracies, history = {}, {}, []
    for modality, child in zip(MODALITIES, seeds):
        rng = np.random.default_rng(child)
        extractor = init_extractor(
            rng, MODALITY_CHANNELS[modality], config.patch_size, config.feat_channels
        )
        bound = 1.0 / np.sqrt(config.feat_channels)
        model = ModalityModel(
            modality,
            extractor,
            head_w=rng.uniform(-bound, bound, size=(n_classes, config.feat_channels)),
            head_b=rng.uniform(-bound, bound, size=n_classes),
        )
        _fit(model, train_items, val_items, config, config.stage1_lr,
             config.stage1_epochs, rng, f"stage1-{modality}", history)
        models[modality] = model
        accuracies[modality] = evaluate(
            model, test_items, config, np.random.default_rng(config.seed)
        )
    return models, accuracies, history


def train_stage2(items, stage1_models, config: TrainConfig, variant: str = "ttp"):
    """Jointly fine-tune extractors plus a fusion head from stage-1 weights.

    ``variant`` selects the head: "ttp", "tp" or "bp". Passing
    ``stage1_models=None`` starts from randomly initialized extractors.
    Returns (model, history).
    """
    if variant not in _VARIANT_STREAM:
        raise ValueError(f"unknown variant {variant!r}")
    train_items = _split(items, "train")
    val_items = _split(items, "val")
    if not train_items or not val_items:
        raise ValueError("dataset must contain train and val splits")
    n_classes = _n_classes(items)

    rng = np.random.default_rng(
        np.random.SeedSequence((config.seed, _VARIANT_STREAM[variant]))
    )
    if stage1_models is None:
        extractors = {
            mod: init_extractor(
                rng, MODALITY_CHANNELS[mod], config.patch_size, config.feat_channels
            )
            for mod in MODALITIES
        }
    else:
        extractors = {mod: stage1_models[mod].extractor.copy() for mod in MODALITIES}

    c, d, out_dim = config.feat_channels, config.factor_rank, config.fusion_dim
    if variant == "bp":
        pairs = {pair: init_pair(rng, c, d, out_dim, n_classes) for pair in PAIRS}
        model = PairSumModel(extractors, pairs)
    else:
        fusion = init_fusion(rng, c, d, out_dim, n_classes)
        model = TtpModel(extractors, fusion) if variant == "ttp" else TpModel(extractors, fusion)

    history = []
    _fit(model, train_items, val_items, config, config.stage2_lr,
         config.stage2_epochs, rng, variant, history)
    return model, history


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    """Top-1 test accuracy per variant, in VARIANT_ORDER."""

    accuracies: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(VARIANT_ORDER) - set(self.accuracies)
        if missing:
            raise ValueError(f"missing variants: {sorted(missing)}")
        for name, acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy for {name} outside [0, 1]")


def run_ablation(items, config: TrainConfig):
    """Train and evaluate all seven variants with a shared seed.

    Stage-1 extractors are trained once and shared; BP, TP and TTP each
    jointly fine-tune their own copy. Returns (AblationReport, history).
    """
    test_items = _split(items, "test")
    stage1_models, stage1_accs, history = train_stage1(items, config)
    report = {
        "I": stage1_accs["i"],
        "MV": stage1_accs["mv"],
        "R": stage1_accs["r"],
    }
    late = LateFusionModel([stage1_models[mod] for mod in MODALITIES])
    report["I+MV+R"] = evaluate(late, test_items, config, np.random.default_rng(config.seed))
    for variant, name in (("bp", "BP"), ("tp", "TP"), ("ttp", "TTP")):
        model, hist = train_stage2(items, stage1_models, config, variant)
        history.extend(hist)
        report[name] = evaluate(model, test_items, config, np.random.default_rng(config.seed))
    return AblationReport(report), history


def format_report_table(report: AblationReport) -> str:
    lines = [
        "# Ablation: top-1 test accuracy per variant.",
        "# BP = pairwise low-rank factorized bilinear pooling over the three",
        "# modality pairs, scores summed before the softmax.",
        f"{'variant':<10} accuracy",
    ]
    for name in VARIANT_ORDER:
        lines.append(f"{name:<10} {report.accuracies[name]:.6f}")
    return "\n".join(lines) + "\n"


def format_report_kv(report: AblationReport) -> str:
    return "".join(f"{name}={report.accuracies[name]:.6f}\n" for name in VARIANT_ORDER)


# ---------------------------------------------------------------------------
# Bench
# ---------------------------------------------------------------------------


def bench(model, bs: Bitstream, warmup: int = 2, iters: int = 5) -> dict:
    """Median per-frame wall-clock milliseconds for the two pipeline phases.

    "preprocess" covers modality extraction from the parsed bitstream;
    "cnn" covers the network forward pass (features plus fusion) over one
    deterministic instance per segment.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")

    def time_call(fn):
        t0 = time.perf_counter()
        result = fn()
        return time.perf_counter() - t0, result

    segments = None
    pre_times = []
    for k in range(warmup + iters):
        dt, segments = time_call(lambda: extract_modalities(bs))
        if k >= warmup:
            pre_times.append(dt)

    rng = np.random.default_rng(0)
    usable = sum(1 for seg in segments if seg.mv_frames)
    instances = sample_test_instances(segments, usable, rng)
    fwd_times = []
    for k in range(warmup + iters):
        dt, _ = time_call(lambda: model.score_batch(instances))
        if k >= warmup:
            fwd_times.append(dt)

    to_ms = 1000.0 / bs.frame_count
    return {
        "preprocess": float(np.median(pre_times)) * to_ms,
        "cnn": float(np.median(fwd_times)) * to_ms,
    }


def format_bench_table(timings: dict) -> str:
    lines = ["# Per-frame inference timing.", f"{'phase':<12} ms_per_frame"]
    for phase in ("preprocess", "cnn"):
        lines.append(f"{phase:<12} {timings[phase]:.4f}")
    return "\n".join(lines) + "\n"
