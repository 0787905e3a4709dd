"""Analytic compute, parameter and activation-memory model of the pre-training pipeline.

Counts are multiply-accumulates (MACs); norms, softmax and bias adds are ignored.

Two accountings of the decoder length are supported. The analytic one (no
seed) sizes the decoder input as ``N_e + |M_d|``, the way the architecture
table counts it, which is what the published FLOPs figures correspond to.
Passing a seed realises the actual masks instead and counts
``N_e + |M_d \\ M_e|`` rows, matching what :func:`forward_pretrain` runs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .masking import DualMaskConfig, cell_keep_count, floor_count, keep_count, loss_index_set
from .model import ModelConfig, param_count, sample_masks
from .numerics import Rng


def flops_block(n: int, d: int, mlp: int) -> int:
    """MACs of one transformer block: QKV + output projections, attention, MLP."""
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * mlp


def block_activations(n: int, d: int, mlp: int, heads: int) -> int:
    """Feature-map footprint of one block: residual stream, MLP hidden, attention maps."""
    return n * d + n * mlp + heads * n * n


@dataclass(frozen=True)
class CostReport:
    n_tokens: int
    enc_visible: int
    dec_len: int
    dec_out: int
    enc_flops: int
    dec_flops: int
    embed_flops: int
    projector_flops: int
    total_flops: int
    params: int
    activation_mem: int

    def records(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def decoder_kept_per_slice(cfg: ModelConfig, dual: DualMaskConfig) -> int:
    """Decoder-kept tokens per temporal slice under the configured strategy's rounding."""
    g = cfg.grid
    if dual.strategy == "none":
        return g.s_tokens
    if dual.strategy == "running_cell":
        dual.check_grid(g)
        return cell_keep_count(dual.rho_d, dual.cell) * (g.s_tokens // (dual.cell * dual.cell))
    return keep_count(g.s_tokens, dual.rho_d)


def sequence_lengths(cfg: ModelConfig, dual: DualMaskConfig, decoder_masking: bool = True,
                     seed: int | None = None) -> tuple[int, int, int, int]:
    """``(N, N_e, L, output rows)`` for the encoder-only or dual-masked pipeline."""
    g = cfg.grid
    n = g.n_total
    if seed is not None:
        d = dual if decoder_masking else DualMaskConfig(dual.rho, 0.0, dual.cell, "none")
        enc, dec = sample_masks(cfg, d, Rng(seed))
        out = int(loss_index_set(enc, dec).size)
        return n, len(enc), len(enc) + out, out
    n_e = g.t_tokens * keep_count(g.s_tokens, dual.rho)
    if not decoder_masking or dual.strategy == "none" or dual.rho_d == 0:
        return n, n_e, n, n - n_e
    if dual.strategy == "frame":
        kept = (g.t_tokens - floor_count(dual.rho_d * g.t_tokens)) * g.s_tokens
    elif dual.strategy == "random":
        kept = keep_count(n, dual.rho_d)
    else:
        kept = g.t_tokens * decoder_kept_per_slice(cfg, dual)
    return n, n_e, min(n, n_e + kept), min(kept, n - n_e)


def pipeline_cost(cfg: ModelConfig, dual: DualMaskConfig, decoder_masking: bool = True,
                  seed: int | None = None) -> CostReport:
    n, n_e, L, out_rows = sequence_lengths(cfg, dual, decoder_masking, seed)
    d, dd, c = cfg.enc_dim, cfg.dec_dim, cfg.cube_dim
    enc = cfg.enc_depth * flops_block(n_e, d, cfg.enc_mlp)
    dec = cfg.dec_depth * flops_block(L, dd, cfg.dec_mlp)
    embed = n * c * d
    proj = n_e * d * dd + out_rows * dd * c
    mem = (
        n * d
        + cfg.enc_depth * block_activations(n_e, d, cfg.enc_mlp, cfg.enc_heads)
        + n_e * dd
        + cfg.dec_depth * block_activations(L, dd, cfg.dec_mlp, cfg.dec_heads)
        + out_rows * c
    )
    return CostReport(
        n_tokens=n, enc_visible=n_e, dec_len=L, dec_out=out_rows,
        enc_flops=enc, dec_flops=dec, embed_flops=embed, projector_flops=proj,
        total_flops=enc + dec + embed + proj,
        params=param_count(cfg, "full"), activation_mem=mem,
    )


def memory_ratio(cfg: ModelConfig, dual: DualMaskConfig) -> float:
    """Dual-masked over encoder-only activation memory."""
    return pipeline_cost(cfg, dual, True).activation_mem / pipeline_cost(cfg, dual, False).activation_mem


def format_report(report: CostReport, title: str = "") -> str:
    """Aligned table followed by ``key=value`` lines; FLOPs shown as MACs and as 2x MACs."""
    rows = [("field", "value", "GMACs", "GFLOPs(2xMAC)")]
    for name, value in report.records():
        if name.endswith("_flops"):
            rows.append((name, str(value), f"{value / 1e9:.2f}", f"{2 * value / 1e9:.2f}"))
        else:
            rows.append((name, str(value), "", ""))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = [title] if title else []
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) if i == 0 else r[i].rjust(widths[i]) for i in range(4)).rstrip())
    lines.append("")
    lines.append("flops_convention=MAC")
    lines.extend(f"{name}={value}" for name, value in report.records())
    return "\n".join(lines) + "\n"
