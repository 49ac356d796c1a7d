"""Versioned binary checkpoints and the plain-text embedding export.

Checkpoint layout::

    b"STRTCKPT"  | uint32 version | uint64 header length | header (UTF-8 JSON, sorted keys)
    | payload (little-endian float32 arrays, back to back) | torch RNG state bytes

The header lists every array with its name, shape and byte offset, so the
payload is never interpreted without its description.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"STRTCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> float32 ndarray, in insertion order
    optimizer: dict | None = None  # {"param_groups": [...], "state": {idx: {name: ndarray}}}
    rng_state: bytes = b""
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    # --- building from / applying to torch objects ---------------------------

    @classmethod
    def capture(cls, module: torch.nn.Module, config: dict, optimizer=None, epoch: int = 0,
                meta: dict | None = None) -> "Checkpoint":
        params = {k: v.detach().cpu().to(torch.float32).numpy().copy()
                  for k, v in module.state_dict().items()}
        opt = None
        if optimizer is not None:
            sd = optimizer.state_dict()
            opt = {"param_groups": sd["param_groups"],
                   "state": {int(i): {k: torch.as_tensor(v).detach().cpu().to(torch.float32).numpy().copy()
                                      for k, v in s.items()}
                             for i, s in sd["state"].items()}}
        return cls(config, params, opt, torch.get_rng_state().numpy().tobytes(), epoch, meta or {})

    def state_dict(self, prefix: str = "", dtype=torch.float32) -> dict:
        """Tensors whose names start with ``prefix``, with the prefix stripped."""
        return {k[len(prefix):]: torch.from_numpy(v.copy()).to(dtype)
                for k, v in self.params.items() if k.startswith(prefix)}

    def restore_optimizer(self, optimizer) -> None:
        if self.optimizer is None:
            raise ValidationError("checkpoint carries no optimizer state")
        state = {i: {k: torch.from_numpy(v.copy()) for k, v in s.items()}
                 for i, s in self.optimizer["state"].items()}
        optimizer.load_state_dict({"param_groups": self.optimizer["param_groups"], "state": state})

    def restore_rng(self) -> None:
        if self.rng_state:
            torch.set_rng_state(torch.frombuffer(bytearray(self.rng_state), dtype=torch.uint8))

    # --- bytes ----------------------------------------------------------------

    def to_bytes(self) -> bytes:
        arrays = []
        offset = 0

        def entry(arr):
            nonlocal offset
            arr = np.ascontiguousarray(arr, dtype="<f4")
            desc = {"shape": list(arr.shape), "offset": offset}
            arrays.append(arr.tobytes())
            offset += arr.nbytes
            return desc

        params = [{"name": k, **entry(v)} for k, v in self.params.items()]
        opt = None
        if self.optimizer is not None:
            opt = {"param_groups": self.optimizer["param_groups"],
                   "state": [{"index": i, "tensors": [{"name": k, **entry(v)}
                                                       for k, v in sorted(s.items())]}
                             for i, s in sorted(self.optimizer["state"].items())]}
        header = {"config": self.config, "epoch": self.epoch, "meta": self.meta,
                  "params": params, "optimizer": opt, "payload_bytes": offset,
                  "rng_bytes": len(self.rng_state)}
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return (MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + b"".join(arrays)
                + self.rng_state)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(MAGIC)] != MAGIC:
            raise ValidationError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        if len(data) < pos + struct.calcsize("<IQ"):
            raise ValidationError("checkpoint is truncated")
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != VERSION:
            raise ValidationError(f"checkpoint version {version} is not supported (expected {VERSION})")
        pos += struct.calcsize("<IQ")
        try:
            header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        except ValueError:
            raise ValidationError("checkpoint header is unreadable") from None
        base = pos + hlen
        if len(data) != base + header["payload_bytes"] + header["rng_bytes"]:
            raise ValidationError("checkpoint is truncated or has trailing bytes")

        def read(desc):
            n = int(np.prod(desc["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=base + desc["offset"])
            return arr.reshape(desc["shape"]).astype(np.float32)

        params = {p["name"]: read(p) for p in header["params"]}
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = {"param_groups": o["param_groups"],
                   "state": {s["index"]: {t["name"]: read(t) for t in s["tensors"]} for s in o["state"]}}
        rng = data[base + header["payload_bytes"]:]
        return cls(header["config"], params, opt, bytes(rng), header["epoch"], header["meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings(path, ids, vectors) -> None:
    vectors = np.asarray(vectors)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"d={vectors.shape[1]}\n")
        for tid, row in zip(ids, vectors):
            f.write(tid + "\t" + " ".join(f"{float(v):.9g}" for v in row) + "\n")


def read_embeddings(path):
    with open(path, encoding="utf-8") as f:
        head = f.readline().strip()
        if not head.startswith("d="):
            raise ValidationError(f"{path}: missing 'd=<dim>' header")
        d = int(head[2:])
        ids, rows = [], []
        for lineno, line in enumerate(f, start=2):
            tid, _, vals = line.rstrip("\n").partition("\t")
            row = [float(v) for v in vals.split()]
            if len(row) != d:
                raise ValidationError(f"{path}:{lineno}: expected {d} values, got {len(row)}")
            ids.append(tid)
            rows.append(row)
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), d)
