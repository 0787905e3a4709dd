"""Synthetic clips, strided clip sampling and hybrid manifest construction."""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ManifestError, SamplingError
from .numerics import Rng

KINDS = ("static", "translate", "rotate-luminance")

# unit velocities indexed by class id for the labelled direction task
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class ClipSpec:
    channels: int = 3
    frames: int = 8
    height: int = 16
    width: int = 16


def _texture(rng: Rng, spec: ClipSpec) -> np.ndarray:
    """Smooth random texture in [0, 1], shape ``C x H x W``."""
    c, h, w = spec.channels, spec.height, spec.width
    base = rng.uniform(size=(c, h, w))
    smooth = (base + np.roll(base, 1, axis=1) + np.roll(base, 1, axis=2) + np.roll(base, (1, 1), axis=(1, 2))) / 4
    return smooth


def synth_clip(seed: int, kind: str, spec: ClipSpec, velocity: tuple[int, int] | None = None) -> np.ndarray:
    """Procedural clip ``C x F x H x W`` with values in [0, 1].

    ``translate`` draws a bright textured square on a dim background and rolls
    the whole frame by ``velocity = (dx, dy)`` pixels per frame (toroidal);
    the velocity is drawn from the seed when not given.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown clip kind {kind!r}")
    rng = Rng(seed).split("synth")
    tex = _texture(rng.split("texture"), spec)
    if kind == "static":
        return np.repeat(tex[:, None], spec.frames, axis=1)
    if kind == "translate":
        frame0 = 0.3 * tex
        side = max(2, min(spec.height, spec.width) // 2)
        y0, x0 = (int(v) for v in rng.integers(0, [spec.height, spec.width]))
        ys = (y0 + np.arange(side)) % spec.height
        xs = (x0 + np.arange(side)) % spec.width
        patch = 0.6 + 0.4 * _texture(rng.split("square"), spec)[:, :side, :side]
        frame0[:, ys[:, None], xs[None, :]] = patch
        if velocity is None:
            velocity = DIRECTIONS[int(rng.integers(0, len(DIRECTIONS)))]
        dx, dy = velocity
        frames = [np.roll(frame0, (t * dy, t * dx), axis=(1, 2)) for t in range(spec.frames)]
        return np.stack(frames, axis=1)
    phase = 2 * np.pi * np.arange(spec.channels)[:, None] / spec.channels
    t = np.arange(spec.frames)[None, :]
    gain = 0.5 + 0.5 * np.sin(2 * np.pi * t / max(spec.frames, 2) + phase)
    return tex[:, None] * gain[:, :, None, None]


@dataclass(frozen=True)
class SamplerConfig:
    frames: int
    stride: int = 4
    crop: int = 16
    flip: bool = False
    scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)


def stride_for_source(source: str, default: int = 4) -> int:
    """Something-Something style sources are sampled at stride 2, everything else at ``default``."""
    name = source.lower()
    return 2 if name.startswith(("ssv2", "sth", "something")) else default


def sample_clip(clip: np.ndarray, sampler: SamplerConfig, rng: Rng, start: int | None = None,
                scale: float | None = None, flip: bool | None = None) -> np.ndarray:
    """Strided temporal window, multi-scale square crop resized to ``crop``, optional horizontal flip.

    ``start``, ``scale`` and ``flip`` override the random draws.
    """
    c, f, h, w = clip.shape
    span = sampler.frames * sampler.stride
    if sampler.frames < 1 or sampler.stride < 1 or span > f:
        raise SamplingError(f"window of {sampler.frames} frames at stride {sampler.stride} exceeds {f} frames")
    if start is None:
        start = int(rng.integers(0, f - span + 1))
    if not 0 <= start <= f - span:
        raise SamplingError(f"start {start} leaves no room for the window in {f} frames")
    out = clip[:, start:start + span:sampler.stride]
    if scale is None:
        scale = float(sampler.scales[int(rng.integers(0, len(sampler.scales)))])
    side = max(1, int(round(scale * min(h, w))))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    idx = (np.arange(sampler.crop) * side) // sampler.crop
    out = out[:, :, y0 + idx][:, :, :, x0 + idx]
    if flip is None:
        flip = sampler.flip and bool(rng.uniform() < 0.5)
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


# -- manifests -----------------------------------------------------------------------


@dataclass(frozen=True)
class ClipRecord:
    source: str
    video_id: str
    label: str | None
    split: str
    duration_frames: int

    def __post_init__(self):
        if not self.video_id:
            raise ManifestError("video_id must be non-empty")
        if self.split not in ("train", "val"):
            raise ManifestError(f"split must be train or val, got {self.split!r}")
        if self.duration_frames < 1:
            raise ManifestError(f"{self.video_id}: duration must be positive")


@dataclass
class DatasetManifest:
    records: list[ClipRecord]
    label_space: list[str] = field(default_factory=list)
    alias_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.video_id in seen:
                raise ManifestError(f"duplicate video_id {r.video_id!r}")
            seen.add(r.video_id)
        val_ids = {r.video_id for r in self.records if r.split == "val"}
        leaked = [r.video_id for r in self.records if r.split == "train" and r.video_id in val_ids]
        if leaked:
            raise ManifestError(f"train records leak into validation: {leaked}")
        space = set(self.label_space)
        missing = sorted({r.label for r in self.records if r.label is not None and r.label not in space})
        if missing:
            raise ManifestError(f"labels outside the label space: {missing}")

    def train(self) -> list[ClipRecord]:
        return [r for r in self.records if r.split == "train"]

    def label_id(self, label: str) -> int:
        return self.label_space.index(label)

    @property
    def labeled(self) -> bool:
        train = self.train()
        return bool(train) and all(r.label is not None for r in train) and len(self.label_space) >= 2

    def source_counts(self) -> dict[str, Counter]:
        out: dict[str, Counter] = {}
        for r in self.records:
            out.setdefault(r.source, Counter())[r.split] += 1
        return out

    def save(self, path: str | Path) -> None:
        lines = ["# label_space\t" + "\t".join(self.label_space)]
        for r in self.records:
            lines.append("\t".join([r.source, r.video_id, r.label or "-", r.split, str(r.duration_frames)]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        records, space = [], None
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if parts[0].strip() == "label_space":
                    space = [p for p in parts[1:] if p]
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
            source, vid, label, split, dur = parts
            try:
                duration = int(dur)
            except ValueError:
                raise ManifestError(f"{path}:{n}: duration {dur!r} is not an integer") from None
            records.append(ClipRecord(source, vid, None if label == "-" else label, split, duration))
        if space is None:
            space = sorted({r.label for r in records if r.label is not None})
        return cls(records, space)


def build_hybrid_manifest(sources: Sequence[tuple[str, Iterable[ClipRecord]]], alias_map: dict[str, str],
                          val_ids: Iterable[str] = ()) -> DatasetManifest:
    """Merge sources in order, keeping the first record per video_id.

    Train records whose id is a validation id (given, or carried by any val
    record) are dropped; source labels are rewritten through ``alias_map`` into
    a unified, sorted label space.
    """
    sources = [(name, list(recs)) for name, recs in sources]
    offenders = sorted({r.label for _, recs in sources for r in recs if r.label is not None and r.label not in alias_map})
    if offenders:
        raise ManifestError(f"alias map has no entry for labels: {offenders}")
    val = set(val_ids) | {r.video_id for _, recs in sources for r in recs if r.split == "val"}
    seen: set[str] = set()
    merged: list[ClipRecord] = []
    for name, recs in sources:
        for r in recs:
            if r.split == "train" and r.video_id in val:
                continue
            if r.video_id in seen:
                continue
            seen.add(r.video_id)
            label = alias_map[r.label] if r.label is not None else None
            merged.append(replace(r, source=name, label=label))
    return DatasetManifest(merged, sorted(set(alias_map.values())), dict(alias_map))


def iterate_epoch(records: Sequence[ClipRecord], repeats: int, rng: Rng) -> Iterator[tuple[ClipRecord, int]]:
    """Every record exactly ``repeats`` times in a shuffled order, paired with its repeat index."""
    items = [(i, k) for i in range(len(records)) for k in range(repeats)]
    for j in rng.permutation(len(items)):
        i, k = items[int(j)]
        yield records[i], k


def record_seed(record: ClipRecord) -> int:
    return zlib.crc32(f"{record.source}/{record.video_id}".encode("utf-8"))


def clip_for_record(record: ClipRecord, spec: ClipSpec, manifest: DatasetManifest | None = None) -> np.ndarray:
    """Deterministic synthetic stand-in for a record's video.

    Labelled records move a square along the direction of their class id;
    unlabelled ones draw a clip kind from the id.
    """
    seed = record_seed(record)
    spec = replace(spec, frames=record.duration_frames)
    if record.label is not None and manifest is not None:
        cls = manifest.label_id(record.label)
        return synth_clip(seed, "translate", spec, velocity=DIRECTIONS[cls % len(DIRECTIONS)])
    return synth_clip(seed, KINDS[seed % len(KINDS)], spec)


def synthetic_manifest(n_clips: int, duration: int, num_classes: int = 0, prefix: str = "syn",
                       source: str = "synthetic") -> DatasetManifest:
    """A single-source manifest; labelled with direction classes when ``num_classes >= 2``."""
    names = [f"dir{k}" for k in range(num_classes)] if num_classes >= 2 else []
    recs = [ClipRecord(source, f"{prefix}{i:05d}", names[i % len(names)] if names else None, "train", duration)
            for i in range(n_clips)]
    return DatasetManifest(recs, names)
