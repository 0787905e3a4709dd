"""Optimiser, schedules, supervised losses and the staged training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ClipSpec, DatasetManifest, SamplerConfig, clip_for_record, iterate_epoch, sample_clip, stride_for_source
from .errors import ConfigError, ContractError, TrainingError
from .masking import DualMaskConfig
from .model import (
    AutoencoderState,
    ClassifierState,
    ModelConfig,
    encoder_params,
    forward_classify,
    forward_pretrain,
    init_autoencoder,
    init_classifier,
    layer_id,
    sample_masks,
)
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrain", "posttrain", "finetune", "distill")


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float
    batch_size: int
    warmup_epochs: float
    total_epochs: float
    steps_per_epoch: int
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    layer_decay: float = 1.0
    clip_grad: float | None = None

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup_epochs exceeds total_epochs")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in (0, 1): {self.betas}")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError(f"layer_decay must lie in (0, 1]: {self.layer_decay}")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size and steps_per_epoch must be positive")

    @property
    def total_steps(self) -> int:
        return max(1, int(round(self.total_epochs * self.steps_per_epoch)))

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def peak_lr(self) -> float:
        return scaled_lr(self.base_lr, self.batch_size)


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def lr_at(step: float, sched: TrainSchedule) -> float:
    """Linear warmup from 0 to the peak, then half-cosine down to ``min_lr`` at the last step."""
    peak = sched.peak_lr
    w = sched.warmup_steps
    if step < w:
        return peak * step / w
    span = sched.total_steps - 1 - w
    if span <= 0:
        return peak
    progress = min(1.0, (step - w) / span)
    return sched.min_lr + 0.5 * (peak - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def layer_lr_scale(layer_index: int, num_layers: int, decay: float) -> float:
    return decay ** (num_layers - layer_index)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the clipped grads and the original norm."""
    norm = global_norm(list(grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float, sched: TrainSchedule,
               lr_scales: dict[str, float] | None = None, eps: float = 1e-8) -> float:
    """One bias-corrected AdamW update in place, using each parameter's ``.grad``.

    Decay is decoupled and skipped for 1-D parameters (biases, norm gains,
    mask token). Returns the pre-clipping gradient norm.
    """
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {k} at step {state.step}")
    if sched.clip_grad is not None:
        grads, norm = clip_grad_norm(grads, sched.clip_grad)
    else:
        norm = global_norm(list(grads.values()))
    b1, b2 = sched.betas
    state.step += 1
    t = state.step
    c1, c2 = 1 - b1**t, 1 - b2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step_lr = lr * (lr_scales.get(k, 1.0) if lr_scales else 1.0)
        if p.data.ndim >= 2 and sched.weight_decay:
            p.data -= step_lr * sched.weight_decay * p.data
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


# -- supervised losses ---------------------------------------------------------------


def smoothed_ce(logits: Tensor, target: int, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy against ``1 - s`` on the target and ``s / (K - 1)`` elsewhere."""
    if not 0 <= smoothing < 1:
        raise ContractError("smoothing must lie in [0, 1)")
    k = logits.shape[-1]
    q = np.full(k, smoothing / (k - 1))
    q[target] = 1.0 - smoothing
    return nx.scale(nx.tsum(nx.mul(nx.log_softmax(logits), Tensor(q))), -1.0)


@dataclass(frozen=True)
class MixedBatch:
    clips: np.ndarray
    labels: np.ndarray
    partner_labels: np.ndarray
    lam: float


def mixup_batch(batch: np.ndarray, labels: Sequence[int], alpha: float, rng: Rng,
                lam: float | None = None) -> MixedBatch:
    """``x' = lam x + (1 - lam) x[perm]`` with ``lam ~ Beta(alpha, alpha)`` unless given."""
    if alpha <= 0:
        raise ContractError("mixup alpha must be positive")
    labels = np.asarray(labels)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(batch))
    mixed = lam * batch + (1.0 - lam) * batch[perm]
    return MixedBatch(mixed, labels, labels[perm], lam)


def mixed_ce(logits: Tensor, label: int, partner: int, lam: float, smoothing: float) -> Tensor:
    a = smoothed_ce(logits, label, smoothing)
    if lam >= 1.0 or label == partner:
        return a
    b = smoothed_ce(logits, partner, smoothing)
    return nx.add(nx.scale(a, lam), nx.scale(b, 1.0 - lam))


def distill_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """``T^2 KL(softmax(teacher / T) || softmax(student / T))``; the teacher is a constant."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise ContractError(f"class counts differ: {student_logits.shape} vs {t.shape}")
    z = t / temperature
    log_pt = z - z.max(axis=-1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = nx.log_softmax(nx.scale(student_logits, 1.0 / temperature))
    kl = nx.sub(Tensor(float((pt * log_pt).sum())), nx.tsum(nx.mul(log_ps, Tensor(pt))))
    return nx.scale(kl, temperature**2)


# -- stage orchestration ---------------------------------------------------------------


@dataclass(frozen=True)
class StageOptions:
    seed: int = 0
    out_dir: Path | None = None
    init_checkpoint: Path | None = None
    teacher_checkpoint: Path | None = None
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    temperature: float = 3.0
    repeated_augmentation: int = 1
    stride: int | None = None
    flip: bool = False
    scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)
    denominator: str = "kept"
    fixed_masks: bool = False
    target_loss: float | None = None


@dataclass
class StageResult:
    state: AutoencoderState | ClassifierState
    metrics: list[dict]
    checkpoint: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [m["loss"] for m in self.metrics]


def steps_per_epoch(manifest: DatasetManifest, batch_size: int, repeats: int = 1) -> int:
    return max(1, math.ceil(len(manifest.train()) * repeats / batch_size))


def _clip_spec(cfg: ModelConfig) -> ClipSpec:
    return ClipSpec(cfg.channels, cfg.frames, cfg.height, cfg.width)


class _BatchStream:
    """Deterministic stream of (clip, label) pairs with repeated augmentation."""

    def __init__(self, manifest: DatasetManifest, cfg: ModelConfig, opts: StageOptions, rng: Rng):
        self.manifest = manifest
        self.records = manifest.train()
        if not self.records:
            raise ContractError("manifest has no train records")
        self.cfg, self.opts, self.rng = cfg, opts, rng
        self.spec = _clip_spec(cfg)
        self.epoch = 0
        self._it = iter(())
        self._cache: dict[str, np.ndarray] = {}

    def _raw(self, rec) -> np.ndarray:
        if rec.video_id not in self._cache:
            self._cache[rec.video_id] = clip_for_record(rec, self.spec, self.manifest)
        return self._cache[rec.video_id]

    def next_item(self, step: int, slot: int):
        try:
            rec, rep = next(self._it)
        except StopIteration:
            self._it = iterate_epoch(self.records, self.opts.repeated_augmentation, self.rng.split("epoch", self.epoch))
            self.epoch += 1
            rec, rep = next(self._it)
        stride = self.opts.stride or stride_for_source(rec.source)
        sampler = SamplerConfig(self.cfg.frames, stride, self.cfg.height, self.opts.flip, self.opts.scales)
        raw = self._raw(rec)
        if raw.shape[1] < self.cfg.frames * stride:
            raise ContractError(f"{rec.video_id}: {raw.shape[1]} frames cannot hold {self.cfg.frames} at stride {stride}")
        clip = sample_clip(raw, sampler, self.rng.split("sample", step, slot))
        label = self.manifest.label_id(rec.label) if rec.label is not None else -1
        return rec, clip, label


def _lr_scales(params: dict[str, Tensor], cfg: ModelConfig, decay: float) -> dict[str, float] | None:
    if decay >= 1.0:
        return None
    n = cfg.enc_depth + 1
    return {k: layer_lr_scale(layer_id(k, cfg.enc_depth), n, decay) for k in params}


def _load_encoder_into(state: ClassifierState, path: Path, cfg: ModelConfig, copy_head: bool) -> None:
    src = load_checkpoint(path, expect=cfg)
    for k, t in encoder_params(src.params).items():
        state.params[k] = Tensor(t.data.copy(), requires_grad=True)
    if copy_head and isinstance(src, ClassifierState) and src.num_classes == state.num_classes:
        for k in ("head.w", "head.b"):
            state.params[k] = Tensor(src.params[k].data.copy(), requires_grad=True)


def _init_state(stage: str, manifest: DatasetManifest, cfg: ModelConfig, opts: StageOptions, rng: Rng):
    if stage == "pretrain":
        if opts.init_checkpoint:
            state = load_checkpoint(opts.init_checkpoint, expect=cfg)
            if not isinstance(state, AutoencoderState):
                raise ContractError("pretrain can only resume from an autoencoder checkpoint")
            return state
        return init_autoencoder(cfg, rng.split("init"))
    if not manifest.labeled:
        raise ContractError(f"{stage} needs labelled train records and at least 2 classes in the manifest")
    state = init_classifier(cfg, len(manifest.label_space), rng.split("init"))
    if opts.init_checkpoint:
        _load_encoder_into(state, Path(opts.init_checkpoint), cfg, copy_head=stage != "posttrain")
    elif stage == "distill":
        raise ContractError("distill needs the student's post-trained checkpoint (init_checkpoint)")
    return state


def _teacher(opts: StageOptions, num_classes: int) -> ClassifierState:
    if not opts.teacher_checkpoint:
        raise ContractError("distill needs a teacher checkpoint")
    teacher = load_checkpoint(opts.teacher_checkpoint)
    if not isinstance(teacher, ClassifierState):
        raise ContractError("teacher checkpoint must hold a classifier")
    if teacher.num_classes != num_classes:
        raise ContractError(f"teacher has {teacher.num_classes} classes, student {num_classes}")
    return teacher


def run_stage(stage: str, manifest: DatasetManifest, cfg: ModelConfig, dual: DualMaskConfig,
              sched: TrainSchedule, opts: StageOptions = StageOptions()) -> StageResult:
    """Run one training stage for ``sched.total_steps`` optimiser steps.

    Writes ``metrics.jsonl`` and ``checkpoints/<stage>.ckpt`` under
    ``opts.out_dir`` when given. With ``opts.target_loss`` the loop stops at
    the first step whose loss is at or below it.
    """
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    rng = Rng(opts.seed).split(stage)
    state = _init_state(stage, manifest, cfg, opts, rng)
    teacher = _teacher(opts, state.num_classes) if stage == "distill" else None
    params = state.params
    scales = _lr_scales(params, cfg, sched.layer_decay) if stage != "pretrain" else None
    stream = _BatchStream(manifest, cfg, opts, rng.split("data"))
    optim = OptimState()
    mask_cache: dict[str, tuple] = {}
    metrics: list[dict] = []

    out_dir = Path(opts.out_dir) if opts.out_dir else None
    sink = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    try:
        # overflow surfaces as NonFiniteError from the op checks, so numpy's own warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(sched.total_steps):
                items = [stream.next_item(step, j) for j in range(sched.batch_size)]
                extra: dict = {}
                for p in params.values():
                    p.grad = None
                if stage == "pretrain":
                    total = None
                    for j, (rec, clip, _) in enumerate(items):
                        masks = None
                        if opts.fixed_masks:
                            if rec.video_id not in mask_cache:
                                mask_cache[rec.video_id] = sample_masks(cfg, dual, rng.split("masks", rec.video_id))
                            masks = mask_cache[rec.video_id]
                        loss_j, diag = forward_pretrain(clip, cfg, dual, state, rng.split("mask", step, j),
                                                        opts.denominator, masks=masks)
                        total = loss_j if total is None else nx.add(total, loss_j)
                    extra["dec_len"] = diag.dec_len
                    extra["loss_set"] = diag.loss_set
                else:
                    clips = np.stack([c for _, c, _ in items])
                    labels = np.array([y for _, _, y in items])
                    if opts.mixup_alpha > 0:
                        mixed = mixup_batch(clips, labels, opts.mixup_alpha, rng.split("mixup", step))
                    else:
                        mixed = MixedBatch(clips, labels, labels, 1.0)
                    total, correct = None, 0
                    for j in range(len(items)):
                        logits = forward_classify(mixed.clips[j], cfg, state)
                        correct += int(np.argmax(logits.data) == labels[j])
                        if stage == "distill":
                            with nx.no_grad():
                                t_logits = forward_classify(mixed.clips[j], teacher.cfg, teacher)
                            loss_j = distill_loss(logits, t_logits, opts.temperature)
                        else:
                            loss_j = mixed_ce(logits, int(mixed.labels[j]), int(mixed.partner_labels[j]),
                                              mixed.lam, opts.label_smoothing)
                        total = loss_j if total is None else nx.add(total, loss_j)
                    extra["acc"] = correct / len(items)
                loss = nx.scale(total, 1.0 / len(items))
                loss_value = loss.item()
                loss.backward()
                lr = lr_at(step, sched)
                extra["grad_norm"] = adamw_step(params, optim, lr, sched, scales)
                record = {"stage": stage, "step": step, "lr": lr, "loss": loss_value, "extra": extra}
                metrics.append(record)
                if sink:
                    sink.write(json.dumps(record, sort_keys=True) + "\n")
                if opts.target_loss is not None and loss_value <= opts.target_loss:
                    break
    except FloatingPointError as e:
        raise TrainingError(f"{stage} diverged at step {len(metrics)}: {e}") from e
    finally:
        if sink:
            sink.close()
    for p in params.values():
        p.grad = None
    ckpt = None
    if out_dir:
        ckpt = out_dir / "checkpoints" / f"{stage}.ckpt"
        save_checkpoint(ckpt, state)
    return StageResult(state, metrics, ckpt)


def accuracy(state: ClassifierState, clips: Sequence[np.ndarray], labels: Sequence[int]) -> float:
    with nx.no_grad():
        hits = sum(int(np.argmax(forward_classify(c, state.cfg, state).data) == y) for c, y in zip(clips, labels))
    return hits / len(labels)


# -- stage defaults ---------------------------------------------------------------------

# Full-scale training settings (ViT-g columns where the tables split by model).
FULL_STAGE_DEFAULTS: dict[str, dict] = {
    "pretrain": dict(base_lr=1.5e-4, batch_size=8192, warmup_epochs=120, total_epochs=1200, weight_decay=0.05,
                     betas=(0.9, 0.95), layer_decay=1.0, clip_grad=0.02, repeated_augmentation=4, flip=False,
                     mask_ratio=0.9, decoder_mask_ratio=0.5),
    "posttrain": dict(base_lr=1e-3, batch_size=128, warmup_epochs=5, total_epochs=35, weight_decay=0.1,
                      betas=(0.9, 0.999), layer_decay=0.9, clip_grad=5.0, repeated_augmentation=2, flip=True,
                      label_smoothing=0.1, mixup=0.8),
    "finetune": dict(base_lr=1e-5, batch_size=32, warmup_epochs=0, total_epochs=3, weight_decay=0.05,
                     betas=(0.9, 0.999), layer_decay=0.9, clip_grad=None, repeated_augmentation=2, flip=True,
                     label_smoothing=0.1, mixup=0.8),
    "distill": dict(base_lr=1e-3, batch_size=1024, warmup_epochs=5, total_epochs=100, weight_decay=0.05,
                    betas=(0.9, 0.999), layer_decay=0.75, clip_grad=1.0, repeated_augmentation=1, flip=True,
                    temperature=3.0, mixup=0.8),
}

# Desk-scale base learning rates (before the batch/256 scaling) for toy runs.
TOY_BASE_LR = {"pretrain": 1.0, "posttrain": 0.25, "finetune": 0.25, "distill": 0.25}


def toy_schedule(stage: str, steps: int, batch_size: int, base_lr: float | None = None, **overrides) -> TrainSchedule:
    """Shrink a stage's transcribed settings to ``steps`` optimiser steps (one step per epoch),
    keeping the warmup proportion, betas, weight decay, layer decay and clipping."""
    d = FULL_STAGE_DEFAULTS[stage]
    warm = steps * d["warmup_epochs"] / d["total_epochs"]
    kw = dict(base_lr=TOY_BASE_LR[stage] if base_lr is None else base_lr, batch_size=batch_size,
              warmup_epochs=warm, total_epochs=steps, steps_per_epoch=1, weight_decay=d["weight_decay"],
              betas=d["betas"], layer_decay=d["layer_decay"], clip_grad=d["clip_grad"])
    kw.update(overrides)
    return TrainSchedule(**kw)
