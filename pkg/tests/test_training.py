from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmae import numerics as nx
from dualmae.checkpoint import save_checkpoint
from dualmae.data import ClipSpec, SamplerConfig, clip_for_record, sample_clip, synthetic_manifest
from dualmae.errors import ConfigError, ContractError, TrainingError
from dualmae.masking import DualMaskConfig
from dualmae.model import ModelConfig, init_classifier
from dualmae.numerics import Rng, Tensor
from dualmae.training import (
    OptimState,
    StageOptions,
    TrainSchedule,
    accuracy,
    adamw_step,
    clip_grad_norm,
    distill_loss,
    global_norm,
    layer_lr_scale,
    lr_at,
    mixup_batch,
    run_stage,
    scaled_lr,
    smoothed_ce,
    toy_schedule,
)


def sched(**kw):
    base = dict(base_lr=1e-3, batch_size=256, warmup_epochs=2, total_epochs=10, steps_per_epoch=10,
                min_lr=1e-5, weight_decay=0.0, betas=(0.9, 0.999))
    base.update(kw)
    return TrainSchedule(**base)


def test_scaled_lr():
    assert scaled_lr(1.5e-4, 256) == 1.5e-4
    assert scaled_lr(1.5e-4, 8192) == pytest.approx(4.8e-3, rel=1e-12)
    assert scaled_lr(0.3, 512) == 0.6
    with pytest.raises(ConfigError):
        scaled_lr(1.0, 0)


def test_lr_schedule_shape():
    s = sched()
    assert lr_at(0, s) == 0.0
    assert lr_at(s.warmup_steps, s) == s.peak_lr
    assert abs(lr_at(s.total_steps - 1, s) - s.min_lr) < 1e-12
    mid = s.warmup_steps + (s.total_steps - 1 - s.warmup_steps) / 2
    assert abs(lr_at(mid, s) - (s.peak_lr + s.min_lr) / 2) < 1e-9
    w = s.warmup_steps
    assert abs(lr_at(w - 1e-9, s) - lr_at(w, s)) < 1e-12
    values = [lr_at(i, s) for i in range(s.total_steps)]
    assert values[:w + 1] == sorted(values[:w + 1])
    assert values[w:] == sorted(values[w:], reverse=True)


def test_schedule_invariants():
    with pytest.raises(ConfigError):
        sched(warmup_epochs=11)
    with pytest.raises(ConfigError):
        sched(betas=(0.9, 1.0))
    with pytest.raises(ConfigError):
        sched(layer_decay=0.0)


def test_layer_scales():
    assert layer_lr_scale(13, 13, 0.75) == 1.0
    assert layer_lr_scale(0, 12, 0.9) == pytest.approx(0.2824295, abs=1e-6)
    assert {layer_lr_scale(i, 12, 1.0) for i in range(13)} == {1.0}
    scales = [layer_lr_scale(i, 12, 0.8) for i in range(13)]
    assert scales == sorted(scales)


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
    p["w"].grad = np.zeros((2, 2))
    adamw_step(p, OptimState(), 0.1, sched())
    assert np.array_equal(p["w"].data, np.ones((2, 2)))


def test_adamw_quadratic_descends():
    w = Tensor(np.array([[3.0]]), requires_grad=True)
    state, s = OptimState(), sched()
    mags = []
    for _ in range(100):
        w.grad = 2 * w.data
        adamw_step({"w": w}, state, 0.01, s)
        mags.append(abs(float(w.data[0, 0])))
    assert all(b < a for a, b in zip(mags[1:], mags[2:]))


def test_adamw_decoupled_decay_skips_vectors():
    p = {"w": Tensor(np.ones((2, 2)), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    for t in p.values():
        t.grad = np.zeros_like(t.data)
    adamw_step(p, OptimState(), 0.1, sched(weight_decay=0.5))
    assert np.allclose(p["w"].data, 0.95) and np.array_equal(p["b"].data, np.ones(2))


def test_clipping_norm_exact():
    grads = {"a": np.array([6.0, 0.0]), "b": np.array([[0.0, 8.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 10.0
    assert global_norm(list(clipped.values())) == pytest.approx(1.0, abs=1e-15)
    same, _ = clip_grad_norm(grads, 20.0)
    assert same is grads


def test_adamw_nan_grad_names_step():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = OptimState(step=41)
    p["w"].grad = np.array([0.0, np.nan])
    with pytest.raises(TrainingError, match="step 41"):
        adamw_step(p, state, 0.1, sched())


def test_smoothed_ce_values():
    big = Tensor([60.0, 0.0, 0.0])
    assert smoothed_ce(big, 0, 0.0).item() < 1e-20
    for s in (0.0, 0.1, 0.5):
        assert smoothed_ce(Tensor(np.zeros(5)), 2, s).item() == pytest.approx(math.log(5))
    logits = np.array([1.5, -0.3, 0.2, 2.0])
    logp = [x - math.log(sum(math.exp(v) for v in logits)) for x in logits]
    expect = -(0.9 * logp[1] + sum(0.1 / 3 * logp[k] for k in (0, 2, 3)))
    assert smoothed_ce(Tensor(logits), 1, 0.1).item() == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ContractError):
        smoothed_ce(Tensor(logits), 1, 1.0)


def test_mixup():
    batch = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    same = mixup_batch(batch, [0, 1], 0.8, Rng(0), lam=1.0)
    assert np.array_equal(same.clips, batch)
    half = mixup_batch(batch, [0, 1], 0.8, Rng(0), lam=0.5)
    partners = half.partner_labels.tolist()
    for j in range(2):
        expect = 0.5 if partners[j] != j else float(j)
        assert np.all(half.clips[j] == expect)
    with pytest.raises(ContractError):
        mixup_batch(batch, [0, 1], 0.0, Rng(0))
    draws = Rng(5).beta(0.8, 0.8, size=100_000)
    assert abs(draws.mean() - 0.5) < 0.01


def test_distill_loss_values():
    x = Tensor([0.3, -1.2, 2.5])
    assert distill_loss(x, x.data, 3.0).item() == pytest.approx(0.0, abs=1e-14)
    s, t, T = np.array([0.5, 1.0, -0.5]), np.array([2.0, 0.0, -1.0]), 3.0

    def soft(v):
        e = [math.exp(a / T) for a in v]
        return [a / sum(e) for a in e]

    ps, pt = soft(s), soft(t)
    kl = sum(b * math.log(b / a) for a, b in zip(ps, pt))
    assert distill_loss(Tensor(s), t, T).item() == pytest.approx(T * T * kl, abs=1e-12)
    for temp in (0.5, 1.0, 3.0, 10.0):
        assert int(np.argmax(soft(t) if temp == T else np.exp(t / temp))) == int(np.argmax(t))
    with pytest.raises(ContractError):
        distill_loss(Tensor(s), t[:2], T)
    with pytest.raises(ContractError):
        distill_loss(Tensor(s), t, 0.0)


def test_distill_loss_grad():
    t = np.array([1.0, -0.5, 0.25, 2.0])
    x = Tensor([0.1, 0.2, -0.3, 0.0], requires_grad=True)
    assert nx.grad_check(lambda v: distill_loss(v, t, 3.0), x) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=3, max_size=3), st.lists(st.floats(-8, 8), min_size=3, max_size=3),
       st.floats(0.2, 5.0))
def test_distill_loss_nonnegative(s, t, temp):
    assert distill_loss(Tensor(s), np.array(t), temp).item() >= -1e-12


def test_toy_schedule_keeps_proportions():
    s = toy_schedule("pretrain", 300, 4)
    assert s.warmup_steps == 30 and s.total_steps == 300
    assert s.betas == (0.9, 0.95) and s.clip_grad == 0.02
    assert toy_schedule("finetune", 50, 4).betas == (0.9, 0.999)


# -- stage runs ------------------------------------------------------------------------

CFG = ModelConfig()
DUAL = DualMaskConfig()


def test_pretrain_metrics_and_reproducibility(tmp_path):
    m = synthetic_manifest(4, 16)
    s = toy_schedule("pretrain", 6, 2)
    a = run_stage("pretrain", m, CFG, DUAL, s, StageOptions(seed=3, out_dir=tmp_path / "a"))
    b = run_stage("pretrain", m, CFG, DUAL, s, StageOptions(seed=3, out_dir=tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 6 and set(rows[0]) == {"stage", "step", "lr", "loss", "extra"}
    assert a.checkpoint.exists()
    assert a.losses == b.losses


def test_stage_preconditions(tmp_path):
    s = toy_schedule("posttrain", 2, 2)
    with pytest.raises(ContractError, match="labelled"):
        run_stage("posttrain", synthetic_manifest(4, 16), CFG, DUAL, s)
    labelled = synthetic_manifest(4, 16, 2)
    with pytest.raises(ContractError, match="teacher"):
        st = init_classifier(CFG, 2, Rng(0))
        save_checkpoint(tmp_path / "s.ckpt", st)
        run_stage("distill", labelled, CFG, DUAL, s, StageOptions(init_checkpoint=tmp_path / "s.ckpt"))
    with pytest.raises(ContractError):
        run_stage("warmup", labelled, CFG, DUAL, s)


def test_distill_from_identical_teacher_starts_at_zero(tmp_path):
    st = init_classifier(CFG, 2, Rng(4))
    save_checkpoint(tmp_path / "t.ckpt", st)
    res = run_stage("distill", synthetic_manifest(4, 16, 2), CFG, DUAL, toy_schedule("distill", 2, 2),
                    StageOptions(init_checkpoint=tmp_path / "t.ckpt", teacher_checkpoint=tmp_path / "t.ckpt"))
    assert res.losses[0] == pytest.approx(0.0, abs=1e-12)


def test_posttrain_initialises_finetune(tmp_path):
    post_m = synthetic_manifest(16, 8, 2, prefix="post")
    ft_m = synthetic_manifest(8, 8, 2, prefix="ft")
    post = run_stage("posttrain", post_m, CFG, DUAL, toy_schedule("posttrain", 150, 8),
                     StageOptions(seed=0, out_dir=tmp_path / "post", stride=1))
    fs = toy_schedule("finetune", 1, 8)
    warm = run_stage("finetune", ft_m, CFG, DUAL, fs, StageOptions(seed=0, init_checkpoint=post.checkpoint, stride=1))
    cold = run_stage("finetune", ft_m, CFG, DUAL, fs, StageOptions(seed=0, stride=1))
    assert warm.losses[0] < cold.losses[0]


def test_classifier_learns_direction_task():
    m = synthetic_manifest(16, 8, 2, prefix="dir")
    res = run_stage("posttrain", m, CFG, DUAL, toy_schedule("posttrain", 200, 8), StageOptions(seed=1, stride=1))
    spec = ClipSpec(3, 8, 16, 16)
    sampler = SamplerConfig(4, 1, 16)
    clips = [sample_clip(clip_for_record(r, spec, m), sampler, Rng(0), start=0, scale=1.0, flip=False)
             for r in m.train()]
    labels = [m.label_id(r.label) for r in m.train()]
    assert accuracy(res.state, clips, labels) > 0.95
