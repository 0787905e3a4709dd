"""Command-line entry point: cost, mask, manifest and the four training stages."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .costmodel import format_report, pipeline_cost
from .data import DatasetManifest, build_hybrid_manifest, synthetic_manifest
from .errors import ConfigError, DualMAEError, TrainingError
from .masking import DualMaskConfig, MaskMap, Role, loss_index_set
from .model import ModelConfig, sample_masks
from .numerics import Rng
from .training import (
    FULL_STAGE_DEFAULTS,
    STAGES,
    StageOptions,
    TrainSchedule,
    run_stage,
    steps_per_epoch,
    toy_schedule,
)

log = logging.getLogger("dualmae")

COMMANDS = ("cost", "mask", "manifest") + STAGES

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "") else float(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    default: str
    parse: Callable[[str], object]
    doc: str


_MODEL_KEYS = [
    Key("variant", "toy", str, "backbone: toy, B, L, H or g (sets the other model keys)"),
    Key("patch", "4", int, "spatial patch size p"),
    Key("tubelet", "2", int, "temporal cube size t_c"),
    Key("enc_depth", "2", int, "encoder blocks"),
    Key("enc_dim", "16", int, "encoder width"),
    Key("enc_heads", "2", int, "encoder attention heads"),
    Key("enc_mlp", "32", int, "encoder MLP hidden width"),
    Key("dec_depth", "1", int, "decoder blocks"),
    Key("dec_dim", "16", int, "decoder width"),
    Key("dec_heads", "2", int, "decoder attention heads"),
    Key("dec_mlp", "32", int, "decoder MLP hidden width"),
    Key("frames", "4", int, "input frames per clip"),
    Key("height", "16", int, "input height"),
    Key("width", "16", int, "input width"),
    Key("channels", "3", int, "input channels"),
]

_AUTO = "auto"

KEYS: list[Key] = _MODEL_KEYS + [
    Key("mask_ratio", "0.9", float, "encoder masking ratio rho"),
    Key("decoder_mask_ratio", "0.5", float, "decoder masking ratio rho_d"),
    Key("cell", "2", int, "running-cell size"),
    Key("decoder_strategy", "running_cell", str, "running_cell, frame, random or none"),
    Key("decoder_masking", "true", _bool, "cost: count the dual-masked decoder (false = encoder-only masking)"),
    Key("cost_mode", "analytic", str, "cost: analytic (N_e + |M_d| decoder rows) or realized (sampled masks)"),
    Key("denominator", "kept", str, "pretrain loss denominator: kept (|M_d| cubes) or exact (|loss set| cubes)"),
    Key("profile", "toy", str, "stage defaults: toy (desk scale) or full (full-scale recipe)"),
    Key("steps", "100", int, "toy profile: optimiser steps per stage"),
    Key("base_lr", _AUTO, float, "base learning rate, scaled by batch_size/256"),
    Key("batch_size", _AUTO, int, "clips per optimiser step"),
    Key("warmup_epochs", _AUTO, float, "linear warmup length in epochs"),
    Key("epochs", _AUTO, float, "total epochs (full profile)"),
    Key("min_lr", "0.0", float, "cosine floor"),
    Key("weight_decay", _AUTO, float, "decoupled weight decay (matrices only)"),
    Key("beta1", _AUTO, float, "AdamW beta1"),
    Key("beta2", _AUTO, float, "AdamW beta2"),
    Key("layer_decay", _AUTO, float, "layer-wise lr decay (fine-tuning stages)"),
    Key("clip_grad", _AUTO, _opt_float, "global gradient-norm clip, none to disable"),
    Key("label_smoothing", _AUTO, float, "label smoothing s"),
    Key("mixup", _AUTO, float, "mixup Beta(alpha, alpha), 0 to disable"),
    Key("temperature", _AUTO, float, "distillation temperature"),
    Key("repeated_augmentation", _AUTO, int, "samples drawn per clip per epoch"),
    Key("flip", _AUTO, _bool, "random horizontal flip"),
    Key("stride", "0", int, "temporal sampling stride; 0 picks 2 for ssv2-like sources and 4 otherwise"),
    Key("scales", "1.0,0.875,0.75,0.66", _floats, "multi-scale crop fractions"),
    Key("fixed_masks", "false", _bool, "pretrain: one mask pair per clip instead of per step"),
    Key("target_loss", "none", _opt_float, "stop at the first step with loss at or below this"),
    Key("manifest", "", str, "manifest TSV; empty builds a synthetic one"),
    Key("synthetic_clips", "8", int, "synthetic manifest size"),
    Key("synthetic_classes", "2", int, "synthetic direction classes (0 = unlabelled)"),
    Key("clip_frames", "16", int, "frames per synthetic video"),
    Key("init_checkpoint", "", str, "checkpoint to initialise from"),
    Key("teacher_checkpoint", "", str, "distill: teacher checkpoint"),
    Key("sources", "", str, "manifest: comma list of name=path.tsv in priority order"),
    Key("alias_map", "", str, "manifest: TSV of source_label<TAB>unified_label"),
    Key("val_ids", "", str, "manifest: file with one validation video_id per line"),
]

KEY_INDEX = {k.name: k for k in KEYS}

# how stage-table entries map onto config keys
_TABLE_KEYS = {"base_lr": "base_lr", "batch_size": "batch_size", "warmup_epochs": "warmup_epochs",
               "epochs": "total_epochs", "weight_decay": "weight_decay", "layer_decay": "layer_decay",
               "clip_grad": "clip_grad", "label_smoothing": "label_smoothing", "mixup": "mixup",
               "temperature": "temperature", "repeated_augmentation": "repeated_augmentation", "flip": "flip"}

TOY_BATCH = 4


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{origin}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


class Config:
    """Resolved configuration: defaults, then the config file, then ``--set`` overrides."""

    def __init__(self, explicit: dict[str, str], seed: int = 0):
        self.seed = seed
        for k in explicit:
            if k not in KEY_INDEX:
                raise ConfigError(f"unknown config key {k!r}")
        self.explicit = dict(explicit)
        self.values: dict[str, object] = {}
        for key in KEYS:
            raw = explicit.get(key.name, key.default)
            if raw == _AUTO:
                self.values[key.name] = _AUTO
                continue
            try:
                self.values[key.name] = key.parse(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key.name}: {raw!r} ({e})") from None

    def __getitem__(self, name: str):
        return self.values[name]

    def is_set(self, name: str) -> bool:
        return name in self.explicit

    def model(self) -> ModelConfig:
        overrides = {k.name: self[k.name] for k in _MODEL_KEYS[1:] if self.is_set(k.name)}
        if self["variant"] == "toy":
            return ModelConfig(**{k.name: self[k.name] for k in _MODEL_KEYS})
        return ModelConfig.from_variant(self["variant"], **overrides)

    def dual(self) -> DualMaskConfig:
        return DualMaskConfig(self["mask_ratio"], self["decoder_mask_ratio"], self["cell"], self["decoder_strategy"])

    def snapshot(self) -> str:
        lines = [f"# seed = {self.seed}"]
        for k in KEYS:
            v = self.values[k.name]
            lines.append(f"{k.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


def stage_value(cfg: Config, stage: str, key: str):
    """Explicit value if given, else the profile's stage default."""
    if cfg[key] != _AUTO:
        return cfg[key]
    table = FULL_STAGE_DEFAULTS[stage]
    if key in ("beta1", "beta2"):
        return table["betas"][0 if key == "beta1" else 1]
    if cfg["profile"] == "toy" and key == "batch_size":
        return TOY_BATCH
    if cfg["profile"] == "toy" and key == "mixup":
        return 0.0
    field = _TABLE_KEYS[key]
    if field in table:
        return table[field]
    return {"label_smoothing": 0.0, "mixup": 0.0, "temperature": 3.0}[key]


def build_schedule(cfg: Config, stage: str, manifest: DatasetManifest) -> TrainSchedule:
    batch = stage_value(cfg, stage, "batch_size")
    common = dict(weight_decay=stage_value(cfg, stage, "weight_decay"),
                  betas=(stage_value(cfg, stage, "beta1"), stage_value(cfg, stage, "beta2")),
                  layer_decay=stage_value(cfg, stage, "layer_decay"), clip_grad=stage_value(cfg, stage, "clip_grad"),
                  min_lr=cfg["min_lr"])
    if cfg["profile"] == "toy":
        base_lr = None if cfg["base_lr"] == _AUTO else cfg["base_lr"]
        if cfg["warmup_epochs"] != _AUTO:
            common["warmup_epochs"] = cfg["warmup_epochs"]
        return toy_schedule(stage, cfg["steps"], batch, base_lr, **common)
    if cfg["profile"] != "full":
        raise ConfigError(f"profile must be toy or full, got {cfg['profile']!r}")
    repeats = stage_value(cfg, stage, "repeated_augmentation")
    return TrainSchedule(base_lr=stage_value(cfg, stage, "base_lr"), batch_size=batch,
                         warmup_epochs=stage_value(cfg, stage, "warmup_epochs"),
                         total_epochs=stage_value(cfg, stage, "epochs"),
                         steps_per_epoch=steps_per_epoch(manifest, batch, repeats), **common)


def load_manifest(cfg: Config) -> DatasetManifest:
    if cfg["manifest"]:
        return DatasetManifest.load(cfg["manifest"])
    return synthetic_manifest(cfg["synthetic_clips"], cfg["clip_frames"], cfg["synthetic_classes"])


# -- commands --------------------------------------------------------------------------


def cmd_cost(cfg: Config, out: Path | None) -> int:
    model, dual = cfg.model(), cfg.dual()
    mode = cfg["cost_mode"]
    if mode not in ("analytic", "realized"):
        raise ConfigError(f"cost_mode must be analytic or realized, got {mode!r}")
    seed = cfg.seed if mode == "realized" else None
    report = pipeline_cost(model, dual, cfg["decoder_masking"], seed=seed)
    title = f"variant={model.variant} rho={dual.rho} rho_d={dual.rho_d} decoder_masking={cfg['decoder_masking']} mode={mode}"
    text = format_report(report, title)
    sys.stdout.write(text)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.txt").write_text(text, encoding="utf-8")
        from .plotting import plot_cost_sweep
        plot_cost_sweep(model, dual, out / "figures" / "cost_sweep.png")
    return EXIT_OK


def cmd_mask(cfg: Config, out: Path | None) -> int:
    model, dual = cfg.model(), cfg.dual()
    enc, dec = sample_masks(model, dual, Rng(cfg.seed))
    loss = MaskMap(enc.grid, Role.DECODER_KEPT, loss_index_set(enc, dec))
    sections = [("encoder_visible", enc), ("decoder_kept", dec), ("loss_set", loss)]
    g = enc.grid
    lines = [f"grid t={g.t_tokens} h={g.h_tokens} w={g.w_tokens}"]
    for name, m in sections:
        lines.append(f"[{name}] count={len(m)}")
        lines.append(m.to_text())
    sys.stdout.write("\n".join(lines))
    if out:
        masks = out / "masks"
        masks.mkdir(parents=True, exist_ok=True)
        for name, m in sections:
            (masks / f"{name}.txt").write_text(m.to_text(), encoding="utf-8")
        from .plotting import plot_masks
        plot_masks(enc, dec, out / "figures" / "masks.png")
    return EXIT_OK


def cmd_manifest(cfg: Config, out: Path | None) -> int:
    if not cfg["sources"]:
        raise ConfigError("manifest needs sources = name=path[,name=path...]")
    sources = []
    for item in cfg["sources"].split(","):
        if "=" not in item:
            raise ConfigError(f"bad source entry {item!r}; expected name=path")
        name, path = (s.strip() for s in item.split("=", 1))
        sources.append((name, DatasetManifest.load(path).records))
    alias: dict[str, str] = {}
    if cfg["alias_map"]:
        for line in Path(cfg["alias_map"]).read_text(encoding="utf-8").splitlines():
            if line.strip() and not line.startswith("#"):
                src, dst = line.split("\t")
                alias[src.strip()] = dst.strip()
    val_ids: list[str] = []
    if cfg["val_ids"]:
        val_ids = [ln.strip() for ln in Path(cfg["val_ids"]).read_text(encoding="utf-8").splitlines() if ln.strip()]
    manifest = build_hybrid_manifest(sources, alias, val_ids)
    out = out or Path("runs/manifest")
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.tsv")
    print(f"records={len(manifest.records)}")
    print(f"labels={len(manifest.label_space)}")
    for src, counts in sorted(manifest.source_counts().items()):
        print(f"source.{src}=train:{counts['train']},val:{counts['val']}")
    print(f"manifest={out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_stage(stage: str, cfg: Config, out: Path | None) -> int:
    model, dual = cfg.model(), cfg.dual()
    manifest = load_manifest(cfg)
    sched = build_schedule(cfg, stage, manifest)
    out = out or Path("runs") / stage
    opts = StageOptions(
        seed=cfg.seed, out_dir=out,
        init_checkpoint=Path(cfg["init_checkpoint"]) if cfg["init_checkpoint"] else None,
        teacher_checkpoint=Path(cfg["teacher_checkpoint"]) if cfg["teacher_checkpoint"] else None,
        label_smoothing=stage_value(cfg, stage, "label_smoothing"),
        mixup_alpha=stage_value(cfg, stage, "mixup"),
        temperature=stage_value(cfg, stage, "temperature"),
        repeated_augmentation=stage_value(cfg, stage, "repeated_augmentation"),
        stride=cfg["stride"] or None, flip=stage_value(cfg, stage, "flip"), scales=cfg["scales"],
        denominator=cfg["denominator"], fixed_masks=cfg["fixed_masks"], target_loss=cfg["target_loss"],
    )
    if opts.denominator not in ("kept", "exact"):
        raise ConfigError(f"denominator must be kept or exact, got {opts.denominator!r}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.snapshot(), encoding="utf-8")
    result = run_stage(stage, manifest, model, dual, sched, opts)
    from .plotting import plot_loss_curve
    plot_loss_curve(result.metrics, out / "figures" / "loss_curve.png")
    last = result.metrics[-1]
    print(f"stage={stage}")
    print(f"steps={len(result.metrics)}")
    print(f"initial_loss={result.metrics[0]['loss']:.6g}")
    print(f"final_loss={last['loss']:.6g}")
    print(f"checkpoint={result.checkpoint}")
    print(f"metrics={out / 'metrics.jsonl'}")
    return EXIT_OK


# -- argument handling ------------------------------------------------------------------


def _help_epilog() -> str:
    lines = ["config keys (key = value; 'auto' takes the stage default):"]
    width = max(len(k.name) for k in KEYS)
    for k in KEYS:
        default = k.default or '""'
        lines.append(f"  {k.name.ljust(width)}  {default:<22} {k.doc}")
    lines.append("")
    lines.append("full-profile stage defaults:")
    for stage, table in FULL_STAGE_DEFAULTS.items():
        lines.append(f"  {stage}: " + json.dumps(table, sort_keys=True))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmae", description="Dual-masked video autoencoder toolkit.",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_help_epilog(),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, applied after --config)")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(config_path: Path | None, overrides: Sequence[str], seed: int) -> Config:
    explicit: dict[str, str] = {}
    if config_path:
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
        explicit.update(parse_config_text(text, str(config_path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in KEY_INDEX:
            raise ConfigError(f"unknown config key {k!r}")
        explicit[k] = v
    return Config(explicit, seed)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        if args.command == "cost":
            return cmd_cost(cfg, args.out)
        if args.command == "mask":
            return cmd_mask(cfg, args.out)
        if args.command == "manifest":
            return cmd_manifest(cfg, args.out)
        return cmd_stage(args.command, cfg, args.out)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (DualMAEError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
