"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"DMAECKPT"
    version    u32
    header     u32 length + UTF-8 text, one ``key=value`` per line
               (``kind``, ``num_classes`` and every ModelConfig field)
    count      u32 number of tensors
    tensor*    u32 name length, name bytes, u32 rank, u64 dims..., float64 payload
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import AutoencoderState, ClassifierState, ModelConfig
from .numerics import Tensor

MAGIC = b"DMAECKPT"
VERSION = 1


def _config_header(cfg: ModelConfig, extra: dict[str, str]) -> str:
    items = list(extra.items()) + [(k, str(v)) for k, v in cfg.as_dict().items()]
    return "".join(f"{k}={v}\n" for k, v in items)


def _parse_config(fields: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in fields:
            raise CheckpointError(f"checkpoint header lacks config field {f.name!r}")
        kwargs[f.name] = fields[f.name] if f.type in (str, "str") else int(fields[f.name])
    return ModelConfig(**kwargs)


def save_checkpoint(path: str | Path, state: AutoencoderState | ClassifierState) -> None:
    if isinstance(state, ClassifierState):
        extra = {"kind": "classifier", "num_classes": str(state.num_classes)}
    else:
        extra = {"kind": "autoencoder", "num_classes": "0"}
    header = _config_header(state.cfg, extra).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(state.params))]
    for name, t in state.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    da, db = a.as_dict(), b.as_dict()
    return [f"{k}: {da[k]} != {db[k]}" for k in da if da[k] != db[k]]


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> AutoencoderState | ClassifierState:
    """Read a checkpoint; with ``expect`` the stored config must match it field for field."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    text = r.take(r.u32()).decode("utf-8")
    fields = dict(line.split("=", 1) for line in text.splitlines() if line)
    cfg = _parse_config(fields)
    if expect is not None:
        diff = config_diff(cfg, expect)
        if diff:
            raise CheckpointError(f"{path}: config mismatch: " + "; ".join(diff))
    params: dict[str, Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    if fields.get("kind") == "classifier":
        return ClassifierState(cfg, int(fields["num_classes"]), params)
    return AutoencoderState(cfg, params)
