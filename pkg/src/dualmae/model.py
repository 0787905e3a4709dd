"""Cube embedding, masked ViT encoder, dual-masked decoder and classifier.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names
(``embed.w``, ``enc.3.attn.wq``, ``dec.norm.g`` ...). The encoder path is
everything under ``embed.`` and ``enc.``; the classifier reuses it and adds
``head.``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DegenerateConfigError, ShapeError
from .masking import (
    DualMaskConfig,
    MaskMap,
    Role,
    TokenGrid,
    decoder_mask,
    loss_index_set,
    tube_mask,
)
from .numerics import Rng, Tensor

LN_EPS = 1e-6
TARGET_EPS = 1e-6

# (patch, enc_depth, enc_dim, enc_heads, enc_mlp, dec_dim, dec_heads, dec_mlp)
_BACKBONES = {
    "B": (16, 12, 768, 12, 3072, 384, 6, 1536),
    "L": (16, 24, 1024, 16, 4096, 512, 8, 2048),
    "H": (14, 32, 1280, 16, 5120, 512, 8, 2048),
    "g": (14, 40, 1408, 16, 6144, 512, 8, 2048),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "toy"
    patch: int = 4
    tubelet: int = 2
    enc_depth: int = 2
    enc_dim: int = 16
    enc_heads: int = 2
    enc_mlp: int = 32
    dec_depth: int = 1
    dec_dim: int = 16
    dec_heads: int = 2
    dec_mlp: int = 32
    frames: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3

    def __post_init__(self):
        if min(self.patch, self.tubelet, self.enc_dim, self.enc_heads, self.dec_dim, self.dec_heads,
               self.frames, self.height, self.width, self.channels) <= 0:
            raise ConfigError(f"model dimensions must be positive: {self}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigError("depths must be non-negative")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide {self.height}x{self.width}")
        if self.frames % self.tubelet:
            raise ConfigError(f"tubelet {self.tubelet} does not divide {self.frames} frames")
        if self.enc_dim % self.enc_heads:
            raise ConfigError(f"enc_dim {self.enc_dim} not divisible by {self.enc_heads} heads")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by {self.dec_heads} heads")

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ModelConfig":
        """Reference backbones B/L/H/g at 16x224x224 with a 4-block decoder, or the default ``toy``."""
        if variant == "toy":
            return cls(**overrides)
        if variant not in _BACKBONES:
            raise ConfigError(f"unknown variant {variant!r}; expected one of toy, {', '.join(_BACKBONES)}")
        p, depth, dim, heads, mlp, ddim, dheads, dmlp = _BACKBONES[variant]
        base = dict(variant=variant, patch=p, tubelet=2, enc_depth=depth, enc_dim=dim, enc_heads=heads,
                    enc_mlp=mlp, dec_depth=4, dec_dim=ddim, dec_heads=dheads, dec_mlp=dmlp,
                    frames=16, height=224, width=224, channels=3)
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> TokenGrid:
        return TokenGrid(self.frames // self.tubelet, self.height // self.patch, self.width // self.patch)

    @property
    def n_tokens(self) -> int:
        return self.grid.n_total

    @property
    def cube_dim(self) -> int:
        return self.channels * self.tubelet * self.patch * self.patch

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AutoencoderState:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class ClassifierState:
    cfg: ModelConfig
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"a classifier needs at least 2 classes, got {self.num_classes}")


@dataclass(frozen=True)
class PretrainDiagnostics:
    n_tokens: int
    enc_visible: int
    dec_len: int
    loss_set: int
    dec_kept: int


# -- parameters --------------------------------------------------------------------


def _block_shapes(prefix: str, d: int, mlp: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.norm1.g", (d,)), (f"{prefix}.norm1.b", (d,)),
        (f"{prefix}.attn.wq", (d, d)), (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.wk", (d, d)), (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.wv", (d, d)), (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.wo", (d, d)), (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.norm2.g", (d,)), (f"{prefix}.norm2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, mlp)), (f"{prefix}.mlp.b1", (mlp,)),
        (f"{prefix}.mlp.w2", (mlp, d)), (f"{prefix}.mlp.b2", (d,)),
    ]


def encoder_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.enc_dim
    shapes = [("embed.w", (cfg.cube_dim, d)), ("embed.b", (d,))]
    for i in range(cfg.enc_depth):
        shapes += _block_shapes(f"enc.{i}", d, cfg.enc_mlp)
    return shapes + [("enc.norm.g", (d,)), ("enc.norm.b", (d,))]


def decoder_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, dd = cfg.enc_dim, cfg.dec_dim
    shapes = [("proj.w", (d, dd)), ("proj.b", (dd,)), ("mask_token", (dd,))]
    for i in range(cfg.dec_depth):
        shapes += _block_shapes(f"dec.{i}", dd, cfg.dec_mlp)
    return shapes + [("dec.norm.g", (dd,)), ("dec.norm.b", (dd,)),
                     ("out.w", (dd, cfg.cube_dim)), ("out.b", (cfg.cube_dim,))]


def _init_param(name: str, shape, rng: Rng | None) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape)
    if len(shape) == 1 and name != "mask_token":
        return np.zeros(shape)
    if rng is None:
        return np.zeros(shape)
    return rng.split(name).trunc_normal(shape, std=0.02)


def _build(shapes, rng: Rng | None) -> dict[str, Tensor]:
    return {name: Tensor(_init_param(name, shape, rng), requires_grad=True) for name, shape in shapes}


def init_autoencoder(cfg: ModelConfig, rng: Rng | None = None) -> AutoencoderState:
    """Truncated-normal (0.02) weights, zero biases, unit norm gains.

    With ``rng=None`` all weights are zero; useful only for shape bookkeeping.
    """
    return AutoencoderState(cfg, _build(encoder_shapes(cfg) + decoder_shapes(cfg), rng))


def init_classifier(cfg: ModelConfig, num_classes: int, rng: Rng | None = None) -> ClassifierState:
    shapes = encoder_shapes(cfg) + [("head.w", (cfg.enc_dim, num_classes)), ("head.b", (num_classes,))]
    return ClassifierState(cfg, num_classes, _build(shapes, rng))


def param_count(cfg: ModelConfig, part: str = "encoder") -> int:
    """Closed-form parameter count of the encoder path (``part="encoder"``) or the full autoencoder."""

    def block(d, mlp):
        return 4 * d * d + 4 * d + 2 * d * mlp + mlp + d + 4 * d

    d, dd, c = cfg.enc_dim, cfg.dec_dim, cfg.cube_dim
    encoder = c * d + d + cfg.enc_depth * block(d, cfg.enc_mlp) + 2 * d
    if part == "encoder":
        return encoder
    if part != "full":
        raise ContractError(f"unknown part {part!r}")
    return encoder + d * dd + dd + dd + cfg.dec_depth * block(dd, cfg.dec_mlp) + 2 * dd + dd * c + c


# -- building blocks -------------------------------------------------------------------


@lru_cache(maxsize=32)
def _sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    j = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, 2 * (j // 2) / d)
    table = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Fixed positional table over the flattened token index."""
    return _sinusoid_table(n, d)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, w), b)


def attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Full self-attention over all rows of ``x`` (joint space-time)."""
    n, d = x.shape
    dh = d // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = split(linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = split(linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    o = nx.matmul(nx.softmax(scores), v)
    o = nx.reshape(nx.transpose(o, (1, 0, 2)), (n, d))
    return linear(o, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = nx.layer_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"], LN_EPS)
    x = nx.add(x, attention(h, p, f"{prefix}.attn", heads))
    h = nx.layer_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"], LN_EPS)
    h = linear(nx.gelu(linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])), p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return nx.add(x, h)


# -- pipeline -----------------------------------------------------------------------------


def _check_clip(clip_shape, cfg: ModelConfig) -> None:
    want = (cfg.channels, cfg.frames, cfg.height, cfg.width)
    if tuple(clip_shape) != want:
        raise ShapeError(f"clip shape {tuple(clip_shape)} does not match config {want}")


def patchify(clip, cfg: ModelConfig):
    """``C x T x H x W`` -> ``N x (C * t_c * p * p)``; works on arrays and Tensors.

    Tokens are ordered temporal-major then row-major; each row is flattened as
    ``(channel, frame-in-tubelet, y, x)``.
    """
    _check_clip(clip.shape, cfg)
    c, p, tc = cfg.channels, cfg.patch, cfg.tubelet
    g = cfg.grid
    shape7 = (c, g.t_tokens, tc, g.h_tokens, p, g.w_tokens, p)
    axes = (1, 3, 5, 0, 2, 4, 6)
    if isinstance(clip, Tensor):
        return nx.reshape(nx.transpose(nx.reshape(clip, shape7), axes), (g.n_total, cfg.cube_dim))
    arr = np.asarray(clip, dtype=np.float64)
    return arr.reshape(shape7).transpose(axes).reshape(g.n_total, cfg.cube_dim)


def cube_embed(clip, cfg: ModelConfig, state) -> Tensor:
    cubes = patchify(clip if isinstance(clip, Tensor) else np.asarray(clip, dtype=np.float64), cfg)
    p = state.params
    tokens = linear(nx.as_tensor(cubes), p["embed.w"], p["embed.b"])
    return nx.add(tokens, Tensor(sinusoid_table(cfg.n_tokens, cfg.enc_dim)))


def run_encoder(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor]) -> Tensor:
    for i in range(cfg.enc_depth):
        x = transformer_block(x, params, f"enc.{i}", cfg.enc_heads)
    return nx.layer_norm(x, params["enc.norm.g"], params["enc.norm.b"], LN_EPS)


def encode(tokens: Tensor, enc_mask: MaskMap, cfg: ModelConfig, state) -> Tensor:
    if enc_mask.role is not Role.ENCODER_VISIBLE:
        raise ContractError(f"encode needs an encoder-visible mask, got {enc_mask.role.value}")
    return run_encoder(nx.gather(tokens, enc_mask.kept), cfg, state.params)


def decoder_positions(enc_mask: MaskMap, dec_mask: MaskMap) -> np.ndarray:
    """Grid positions of the decoder input rows: encoder-visible block, then the masked block."""
    return np.concatenate([enc_mask.kept, loss_index_set(enc_mask, dec_mask)])


def build_decoder_input(Z: Tensor, enc_mask: MaskMap, dec_mask: MaskMap, cfg: ModelConfig,
                        state: AutoencoderState) -> Tensor:
    """Projected encoder output followed by one mask token per decoder-kept,
    encoder-invisible position; decoder positional embeddings are added to every row."""
    masked = loss_index_set(enc_mask, dec_mask)
    if Z.shape[0] != len(enc_mask):
        raise ContractError(f"encoder output has {Z.shape[0]} rows but the mask keeps {len(enc_mask)}")
    p = state.params
    parts = [linear(Z, p["proj.w"], p["proj.b"])]
    if masked.size:
        ones = Tensor(np.ones((masked.size, 1)))
        parts.append(nx.matmul(ones, nx.reshape(p["mask_token"], (1, cfg.dec_dim))))
    zc = nx.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    pos = sinusoid_table(cfg.n_tokens, cfg.dec_dim)[np.concatenate([enc_mask.kept, masked])]
    return nx.add(zc, Tensor(pos))


def decode(Z_c: Tensor, cfg: ModelConfig, state: AutoencoderState, discard: int = 0) -> Tensor:
    """Decoder blocks over all rows; the first ``discard`` rows are dropped before the output projection."""
    p = state.params
    x = Z_c
    for i in range(cfg.dec_depth):
        x = transformer_block(x, p, f"dec.{i}", cfg.dec_heads)
    x = nx.layer_norm(x, p["dec.norm.g"], p["dec.norm.b"], LN_EPS)
    if discard:
        x = nx.gather(x, np.arange(discard, x.shape[0]))
    return linear(x, p["out.w"], p["out.b"])


def normalize_targets(clip, cfg: ModelConfig) -> np.ndarray:
    cubes = patchify(np.asarray(clip, dtype=np.float64), cfg)
    mu = cubes.mean(axis=1, keepdims=True)
    var = cubes.var(axis=1, keepdims=True)
    return (cubes - mu) / np.sqrt(var + TARGET_EPS)


DENOMINATORS = ("kept", "exact")


def reconstruction_loss(pred_rows: Tensor, targets: np.ndarray, enc_mask: MaskMap, dec_mask: MaskMap,
                        denominator: str = "kept") -> Tensor:
    """Squared error summed over decoder-kept, encoder-invisible tokens.

    ``kept`` divides by ``(1 - rho_d) N`` cubes, i.e. the decoder-kept count;
    ``exact`` divides by the supervised count. Both are per pixel.
    """
    if denominator not in DENOMINATORS:
        raise ContractError(f"denominator must be one of {DENOMINATORS}")
    idx = loss_index_set(enc_mask, dec_mask)
    if idx.size == 0:
        raise DegenerateConfigError("no decoder-kept token is hidden from the encoder; nothing to supervise")
    if pred_rows.shape[0] != idx.size:
        raise ContractError(f"{pred_rows.shape[0]} prediction rows for {idx.size} supervised tokens")
    diff = nx.sub(pred_rows, Tensor(np.asarray(targets)[idx]))
    sq = nx.tsum(nx.mul(diff, diff))
    count = len(dec_mask) if denominator == "kept" else idx.size
    return nx.scale(sq, 1.0 / (count * targets.shape[1]))


def sample_masks(cfg: ModelConfig, dual: DualMaskConfig, rng: Rng) -> tuple[MaskMap, MaskMap]:
    grid = cfg.grid
    return tube_mask(grid, dual.rho, rng.split("tube")), decoder_mask(grid, dual, rng.split("decoder"))


def forward_pretrain(clip, cfg: ModelConfig, dual: DualMaskConfig, state: AutoencoderState, rng: Rng,
                     denominator: str = "kept", masks: tuple[MaskMap, MaskMap] | None = None):
    """Dual-masked reconstruction loss for one clip; returns ``(loss, PretrainDiagnostics)``."""
    enc_mask, dec_mask = masks if masks is not None else sample_masks(cfg, dual, rng)
    tokens = cube_embed(clip, cfg, state)
    Z = encode(tokens, enc_mask, cfg, state)
    zc = build_decoder_input(Z, enc_mask, dec_mask, cfg, state)
    pred = decode(zc, cfg, state, discard=len(enc_mask))
    loss = reconstruction_loss(pred, normalize_targets(clip, cfg), enc_mask, dec_mask, denominator)
    diag = PretrainDiagnostics(cfg.n_tokens, len(enc_mask), zc.shape[0], pred.shape[0], len(dec_mask))
    return loss, diag


def forward_classify(clip, cfg: ModelConfig, state: ClassifierState) -> Tensor:
    """Unmasked encoder, mean-pooled tokens, linear head -> logits ``[num_classes]``."""
    x = run_encoder(cube_embed(clip, cfg, state), cfg, state.params)
    pooled = nx.reshape(nx.mean(x, axis=0), (1, cfg.enc_dim))
    logits = linear(pooled, state.params["head.w"], state.params["head.b"])
    return nx.reshape(logits, (state.num_classes,))


def encoder_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(("embed.", "enc."))}


def layer_id(name: str, depth: int) -> int:
    """Layer index for layer-wise lr decay: embedding 0, block i -> i + 1, final norm / head -> depth + 1."""
    if name.startswith("embed."):
        return 0
    parts = name.split(".")
    if parts[0] == "enc" and parts[1].isdigit():
        return int(parts[1]) + 1
    return depth + 1
