"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DIVSUM1\\0"
    u64 header length, then that many bytes of UTF-8 JSON
        {"config": ..., "vocab": [...], "best_metric": ..., ...}
    repeated until EOF:
        u16 name length, name (UTF-8)
        u8 rank, rank x u64 dims
        float32 data, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DIVSUM1\0"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    vocab: list[str]
    params: dict[str, np.ndarray]
    best_metric: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # storage precision is float32; keep the in-memory copy identical to what lands on disk
        self.params = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"config": self.config, "vocab": self.vocab, "best_metric": self.best_metric, "extra": self.extra},
            sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        ).encode("utf-8")
        out = [MAGIC, struct.pack("<Q", len(header)), header]
        for name in sorted(self.params):
            arr = self.params[name]
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes(order="C"))
        return b"".join(out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if not buf.startswith(MAGIC):
            raise CheckpointError("not a checkpoint (bad magic bytes)")
        pos = len(MAGIC)
        try:
            (hlen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
            pos += hlen
            params = {}
            while pos < len(buf):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                name = buf[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", buf, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}Q", buf, pos)
                pos += 8 * rank
                count = int(np.prod(dims, dtype=np.int64))
                if pos + 4 * count > len(buf):
                    raise CheckpointError(f"truncated data for {name}")
                params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
                pos += 4 * count
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        return cls(header["config"], header["vocab"], params, header.get("best_metric"), header.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    # -- model conversion -------------------------------------------------

    @classmethod
    def from_model(cls, model, vocab, best_metric=None, extra=None) -> "Checkpoint":
        return cls(model.config.to_dict(), list(vocab.tokens),
                   {k: v.data for k, v in model.params.items()}, best_metric, extra or {})

    def to_model(self):
        from .model import Model, ModelConfig
        from .tensor import parameter

        config = ModelConfig.from_dict(self.config)
        return Model(config, {k: parameter(v.astype(np.float64), k) for k, v in self.params.items()})

    def vocabulary(self):
        from .corpus import Vocabulary
        return Vocabulary(list(self.vocab))
