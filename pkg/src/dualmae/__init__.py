"""Dual-masked video autoencoder pre-training at desk scale.

A float64 autodiff core, encoder/decoder masking, a small ViT autoencoder,
an analytic cost model, manifest tooling and a staged training loop.
"""

from __future__ import annotations

from .costmodel import CostReport, memory_ratio, pipeline_cost
from .data import ClipRecord, DatasetManifest, build_hybrid_manifest
from .masking import DualMaskConfig, MaskMap, TokenGrid
from .model import ModelConfig, forward_classify, forward_pretrain, init_autoencoder, init_classifier
from .numerics import Rng, Tensor, grad_check
from .training import TrainSchedule, run_stage

__version__ = "0.1.0"

__all__ = [
    "ClipRecord", "CostReport", "DatasetManifest", "DualMaskConfig", "MaskMap", "ModelConfig", "Rng",
    "Tensor", "TokenGrid", "TrainSchedule", "build_hybrid_manifest", "forward_classify", "forward_pretrain",
    "grad_check", "init_autoencoder", "init_classifier", "memory_ratio", "pipeline_cost", "run_stage",
]
