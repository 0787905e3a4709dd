"""Encoder and decoder masking maps over the spatiotemporal token grid.

Tokens are indexed temporal-major: index ``i`` lives at temporal slice
``i // s_tokens`` and spatial position ``i % s_tokens`` (row-major over the
``h_tokens x w_tokens`` patch grid).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import Rng

_EPS = 1e-9


def floor_count(x: float) -> int:
    """``floor(x)`` tolerant of binary round-off such as ``10 * (1 - 0.9)``."""
    return int(math.floor(x + _EPS))


def keep_count(n: int, ratio: float) -> int:
    """Number of items kept out of ``n`` when a fraction ``ratio`` is dropped: ``floor(n (1 - ratio))``."""
    return floor_count(n * (1.0 - ratio))


class Role(enum.Enum):
    ENCODER_VISIBLE = "encoder-visible"
    DECODER_KEPT = "decoder-kept"


@dataclass(frozen=True)
class TokenGrid:
    t_tokens: int
    h_tokens: int
    w_tokens: int

    def __post_init__(self):
        if min(self.t_tokens, self.h_tokens, self.w_tokens) <= 0:
            raise ConfigError(f"token grid dimensions must be positive: {self}")

    @classmethod
    def square(cls, t_tokens: int, s_tokens: int) -> "TokenGrid":
        side = math.isqrt(s_tokens)
        if side * side == s_tokens:
            return cls(t_tokens, side, side)
        return cls(t_tokens, 1, s_tokens)

    @property
    def s_tokens(self) -> int:
        return self.h_tokens * self.w_tokens

    @property
    def n_total(self) -> int:
        return self.t_tokens * self.s_tokens


@dataclass(frozen=True, eq=False)
class MaskMap:
    grid: TokenGrid
    role: Role
    kept: np.ndarray = field(repr=False)

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.int64).reshape(-1)
        if kept.size:
            if kept[0] < 0 or kept[-1] >= self.grid.n_total:
                raise ContractError(f"mask indices out of range [0, {self.grid.n_total})")
            if np.any(np.diff(kept) <= 0):
                raise ContractError("mask indices must be unique and strictly increasing")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    def __len__(self) -> int:
        return int(self.kept.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskMap):
            return NotImplemented
        return self.grid == other.grid and self.role == other.role and np.array_equal(self.kept, other.kept)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.grid.n_total, dtype=bool)
        out[self.kept] = True
        return out

    def per_slice(self) -> np.ndarray:
        """Boolean array ``[t_tokens, h_tokens, w_tokens]``."""
        g = self.grid
        return self.as_bool().reshape(g.t_tokens, g.h_tokens, g.w_tokens)

    def to_text(self) -> str:
        return grid_to_text(self.per_slice())

    @classmethod
    def from_text(cls, text: str, role: Role) -> "MaskMap":
        slices = text_to_grid(text)
        t, h, w = slices.shape
        return cls(TokenGrid(t, h, w), role, np.flatnonzero(slices.reshape(-1)))


def grid_to_text(slices: np.ndarray) -> str:
    """One block per temporal slice: a ``t=k`` header, then rows of ``#`` (kept) / ``.`` (dropped)."""
    blocks = []
    for t, sl in enumerate(slices):
        rows = ["".join("#" if v else "." for v in row) for row in sl]
        blocks.append(f"t={t}\n" + "\n".join(rows))
    return "\n\n".join(blocks) + "\n"


def text_to_grid(text: str) -> np.ndarray:
    blocks, cur = [], None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("t="):
            cur = []
            blocks.append(cur)
            continue
        if cur is None or set(line) - {"#", "."}:
            raise ContractError(f"malformed mask text line: {line!r}")
        cur.append([c == "#" for c in line])
    if not blocks:
        raise ContractError("mask text contains no slices")
    return np.array(blocks, dtype=bool)


def _check_ratio(name: str, value: float) -> None:
    if not (0.0 <= value < 1.0):
        raise ConfigError(f"{name} must lie in [0, 1), got {value}")


@dataclass(frozen=True)
class DualMaskConfig:
    rho: float = 0.9
    rho_d: float = 0.5
    cell: int = 2
    strategy: str = "running_cell"

    STRATEGIES = ("running_cell", "frame", "random", "none")

    def __post_init__(self):
        _check_ratio("rho", self.rho)
        _check_ratio("rho_d", self.rho_d)
        if self.cell < 1:
            raise ConfigError(f"cell must be >= 1, got {self.cell}")
        if self.strategy not in self.STRATEGIES:
            raise ConfigError(f"unknown decoder masking strategy {self.strategy!r}")

    def check_grid(self, grid: TokenGrid) -> None:
        if grid.h_tokens % self.cell or grid.w_tokens % self.cell:
            raise ConfigError(
                f"running cell {self.cell} does not tile the {grid.h_tokens}x{grid.w_tokens} spatial grid"
            )


# -- encoder masking ------------------------------------------------------------


def tube_mask(grid: TokenGrid, rho: float, rng: Rng) -> MaskMap:
    """Keep ``floor(s (1 - rho))`` random spatial positions, replicated over every temporal slice."""
    _check_ratio("rho", rho)
    s = grid.s_tokens
    k_s = keep_count(s, rho)
    spatial = rng.choice(s, k_s)
    kept = (np.arange(grid.t_tokens)[:, None] * s + spatial[None, :]).reshape(-1)
    return MaskMap(grid, Role.ENCODER_VISIBLE, kept)


def is_tube(mask: MaskMap) -> bool:
    sl = mask.per_slice()
    return bool((sl == sl[0]).all())


# -- decoder masking ------------------------------------------------------------


def cell_keep_count(rho_d: float, cell: int) -> int:
    return keep_count(cell * cell, rho_d)


def running_cell_mask(grid: TokenGrid, rho_d: float, cell: int) -> MaskMap:
    """Deterministic running-cell decoder mask.

    Each ``cell x cell`` block keeps ``k_c`` in-cell positions per slice; at
    slice ``t`` these are the row-major offsets ``(t + j) mod cell**2`` for
    ``j < k_c``, so the kept offsets advance by one per slice and every offset
    is covered ``k_c`` times over ``cell**2`` consecutive slices.
    """
    _check_ratio("rho_d", rho_d)
    if cell < 1:
        raise ConfigError(f"cell must be >= 1, got {cell}")
    if grid.h_tokens % cell or grid.w_tokens % cell:
        raise ConfigError(f"running cell {cell} does not tile the {grid.h_tokens}x{grid.w_tokens} spatial grid")
    c2 = cell * cell
    k_c = cell_keep_count(rho_d, cell)
    rows = np.arange(grid.h_tokens)
    cols = np.arange(grid.w_tokens)
    in_cell = (rows[:, None] % cell) * cell + (cols[None, :] % cell)
    slices = np.zeros((grid.t_tokens, grid.h_tokens, grid.w_tokens), dtype=bool)
    for t in range(grid.t_tokens):
        offsets = (t + np.arange(k_c)) % c2
        slices[t] = np.isin(in_cell, offsets)
    return MaskMap(grid, Role.DECODER_KEPT, np.flatnonzero(slices.reshape(-1)))


def frame_mask(grid: TokenGrid, rho_d: float) -> MaskMap:
    """Keep whole temporal slices, spread evenly: ``m = t - floor(rho_d t)`` slices at ``floor(j t / m)``.

    At ``rho_d = 0.5`` this is every even-indexed slice.
    """
    _check_ratio("rho_d", rho_d)
    t = grid.t_tokens
    m = t - floor_count(rho_d * t)
    slices = sorted({(j * t) // m for j in range(m)})
    s = grid.s_tokens
    kept = (np.asarray(slices)[:, None] * s + np.arange(s)[None, :]).reshape(-1)
    return MaskMap(grid, Role.DECODER_KEPT, kept)


def random_mask(grid: TokenGrid, rho_d: float, rng: Rng) -> MaskMap:
    _check_ratio("rho_d", rho_d)
    n = grid.n_total
    return MaskMap(grid, Role.DECODER_KEPT, rng.choice(n, keep_count(n, rho_d)))


def full_mask(grid: TokenGrid, role: Role = Role.DECODER_KEPT) -> MaskMap:
    return MaskMap(grid, role, np.arange(grid.n_total))


def decoder_mask(grid: TokenGrid, dual: DualMaskConfig, rng: Rng) -> MaskMap:
    """Dispatch on ``dual.strategy``; ``none`` keeps every position (no decoder masking)."""
    if dual.strategy == "none":
        return full_mask(grid)
    if dual.strategy == "running_cell":
        return running_cell_mask(grid, dual.rho_d, dual.cell)
    if dual.strategy == "frame":
        return frame_mask(grid, dual.rho_d)
    return random_mask(grid, dual.rho_d, rng)


def loss_index_set(enc: MaskMap, dec: MaskMap) -> np.ndarray:
    """Decoder-kept positions that the encoder did not see, ascending."""
    if enc.grid != dec.grid:
        raise ContractError(f"mask grids differ: {enc.grid} vs {dec.grid}")
    return np.setdiff1d(dec.kept, enc.kept, assume_unique=True)
