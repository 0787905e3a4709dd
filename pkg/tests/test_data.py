from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from dualmae.data import (
    ClipRecord,
    ClipSpec,
    DatasetManifest,
    SamplerConfig,
    build_hybrid_manifest,
    clip_for_record,
    iterate_epoch,
    sample_clip,
    stride_for_source,
    synth_clip,
    synthetic_manifest,
)
from dualmae.errors import ManifestError, SamplingError
from dualmae.numerics import Rng

SPEC = ClipSpec(3, 8, 16, 16)


@pytest.mark.parametrize("kind", ["static", "translate", "rotate-luminance"])
def test_synth_clip_shape_range_determinism(kind):
    a = synth_clip(5, kind, SPEC)
    assert a.shape == (3, 8, 16, 16)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, synth_clip(5, kind, SPEC))


def test_translate_moves_by_velocity():
    clip = synth_clip(1, "translate", SPEC, velocity=(1, 0))
    assert np.array_equal(clip[:, 3], np.roll(clip[:, 0], 3, axis=2))
    static = synth_clip(1, "static", SPEC)
    assert np.array_equal(static[:, 0], static[:, 7])
    with pytest.raises(ValueError):
        synth_clip(1, "zoom", SPEC)


def test_sample_clip_strided_frames():
    clip = np.broadcast_to(np.arange(20.0)[None, :, None, None], (1, 20, 8, 8)).copy()
    out = sample_clip(clip, SamplerConfig(4, stride=4, crop=8), Rng(0), start=2, scale=1.0, flip=False)
    assert out[0, :, 0, 0].tolist() == [2.0, 6.0, 10.0, 14.0]
    assert out.shape == (1, 4, 8, 8)
    with pytest.raises(SamplingError):
        sample_clip(clip, SamplerConfig(6, stride=4, crop=8), Rng(0))
    with pytest.raises(SamplingError):
        sample_clip(clip, SamplerConfig(4, stride=4, crop=8), Rng(0), start=5)


def test_sample_clip_crop_and_flip():
    clip = np.arange(64.0).reshape(1, 1, 8, 8)
    out = sample_clip(clip, SamplerConfig(1, stride=1, crop=4), Rng(0), start=0, scale=1.0, flip=True)
    assert out[0, 0, 0].tolist() == [6.0, 4.0, 2.0, 0.0]
    half = sample_clip(clip, SamplerConfig(1, stride=1, crop=4), Rng(1), start=0, scale=0.5, flip=False)
    assert half.shape == (1, 1, 4, 4)


def test_stride_rule():
    assert stride_for_source("ssv2") == 2
    assert stride_for_source("Something-Something") == 2
    assert stride_for_source("k400") == 4


def _rec(src, vid, label, split="train"):
    return ClipRecord(src, vid, label, split, 32)


def test_hybrid_dedup_first_source_wins():
    m = build_hybrid_manifest(
        [("k400", [_rec("k400", "a", "run"), _rec("k400", "b", "jump")]),
         ("k600", [_rec("k600", "a", "sprint"), _rec("k600", "c", "hop")])],
        {"run": "running", "sprint": "running", "jump": "jumping", "hop": "jumping"},
    )
    assert [(r.source, r.video_id, r.label) for r in m.records] == [
        ("k400", "a", "running"), ("k400", "b", "jumping"), ("k600", "c", "jumping")]
    assert m.label_space == ["jumping", "running"]


def test_hybrid_val_leak_removed():
    m = build_hybrid_manifest(
        [("k400", [_rec("k400", "a", "x"), _rec("k400", "v1", "x"), _rec("k400", "v2", "y", "val")]),
         ("k700", [_rec("k700", "v2", "y"), _rec("k700", "d", "y")])],
        {"x": "X", "y": "Y"}, val_ids=["v1"],
    )
    assert [r.video_id for r in m.train()] == ["a", "d"]
    assert [r.video_id for r in m.records if r.split == "val"] == ["v2"]


def test_hybrid_missing_alias_named():
    with pytest.raises(ManifestError, match="zzz"):
        build_hybrid_manifest([("s", [_rec("s", "a", "zzz")])], {})


def test_manifest_validation():
    with pytest.raises(ManifestError):
        DatasetManifest([_rec("s", "a", None), _rec("s", "a", None)])
    with pytest.raises(ManifestError):
        DatasetManifest([_rec("s", "a", "cat")], ["dog"])
    with pytest.raises(ManifestError):
        ClipRecord("s", "a", None, "test", 3)


def test_manifest_round_trip_and_reverify(tmp_path):
    m = synthetic_manifest(6, 16, 3)
    p = tmp_path / "m.tsv"
    m.save(p)
    back = DatasetManifest.load(p)
    assert back.records == m.records and back.label_space == m.label_space
    p.write_text(p.read_text() + "synthetic\tsyn00000\tdir0\ttrain\t16\n")
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest.load(p)
    bad = tmp_path / "bad.tsv"
    bad.write_text("s\ta\t-\ttrain\n")
    with pytest.raises(ManifestError):
        DatasetManifest.load(bad)


def test_iterate_epoch_repeats_each_record():
    recs = synthetic_manifest(5, 8).records
    seen = Counter(r.video_id for r, _ in iterate_epoch(recs, 3, Rng(0)))
    assert set(seen.values()) == {3} and len(seen) == 5


def test_labelled_clips_follow_class_direction():
    m = synthetic_manifest(4, 8, 2)
    a = clip_for_record(m.records[0], SPEC, m)
    assert np.array_equal(a[:, 1], np.roll(a[:, 0], 1, axis=2))  # class 0 moves +x
    b = clip_for_record(m.records[1], SPEC, m)
    assert np.array_equal(b[:, 1], np.roll(b[:, 0], -1, axis=2))  # class 1 moves -x
    assert m.labeled and not synthetic_manifest(4, 8).labeled
