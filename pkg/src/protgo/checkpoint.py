"""Binary model checkpoints: magic "PGO1", a JSON header describing every
array (name, dtype, shape, byte offset), then the raw little-endian arrays.

The save -> load round trip is bit-exact for parameters, optimizer moments,
the freeze mask, and the training RNG bookkeeping.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import FreezeMask, ModelConfig, ProteinEncoder

MAGIC = b"PGO1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> np.ndarray
    freeze_mask: FreezeMask
    optimizer_state: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    rng_state: dict = field(default_factory=dict)  # seed / epochs_completed bookkeeping

    def to_model(self) -> ProteinEncoder:
        model = ProteinEncoder(self.config, params=self.params)
        model.apply_freeze(self.freeze_mask, mode="load")
        return model


def _dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"param.{k}": np.ascontiguousarray(v) for k, v in ckpt.params.items()}
    opt_meta = None
    if ckpt.optimizer_state is not None:
        opt_meta = {"step": int(ckpt.optimizer_state["step"])}
        for moment in ("m", "v"):
            for k, arr in ckpt.optimizer_state[moment].items():
                arrays[f"adam.{moment}.{k}"] = np.ascontiguousarray(arr)

    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        nbytes = arr.size * arr.dtype.itemsize
        entries.append({"name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape), "offset": offset})
        offset += nbytes

    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "freeze_mask": ckpt.freeze_mask.frozen,
        "optimizer": opt_meta,
        "rng_state": ckpt.rng_state,
        "arrays": entries,
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for name in sorted(arrays):
        arr = arrays[name]
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    header_len = struct.unpack("<I", blob[4:8])[0]
    if len(blob) < 8 + header_len:
        raise CheckpointError(f"truncated checkpoint (header incomplete): {path}")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unrecognized checkpoint format_version {header.get('format_version')}")
    payload = blob[8 + header_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"truncated checkpoint: expected {header['payload_bytes']} payload bytes, found {len(payload)}"
        )

    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()

    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    optimizer_state = None
    if header["optimizer"] is not None:
        optimizer_state = {
            "step": header["optimizer"]["step"],
            "m": {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")},
        }
    config = ModelConfig.from_dict(header["config"])
    ckpt = Checkpoint(
        config=config,
        params=params,
        freeze_mask=FreezeMask(dict(header["freeze_mask"])),
        optimizer_state=optimizer_state,
        rng_state=dict(header["rng_state"]),
    )
    # shape validation against the embedded config happens in ProteinEncoder
    ProteinEncoder(config, params=params)
    return ckpt


def checkpoint_from_model(model: ProteinEncoder, freeze_mask: FreezeMask,
                          optimizer_state=None, rng_state=None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={k: v.data.copy() for k, v in model.params.items()},
        freeze_mask=freeze_mask,
        optimizer_state=optimizer_state,
        rng_state=rng_state or {},
    )
