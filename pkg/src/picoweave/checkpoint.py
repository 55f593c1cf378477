"""Checkpoint container: structured-text manifest + named float arrays.

Layout (all integers little-endian u32 unless noted):

    magic         8 bytes  b"PWCKPT01"
    manifest_len  u32
    manifest      UTF-8 JSON: format, step, optimizer step count, config
                  echo, metric snapshot, and an ordered array directory of
                  {name, dtype ("<f4"|"<f8"), shape}
    array data    raw little-endian bytes, concatenated in directory order

Round trips are bit-exact. Loading validates the stored config against the
caller's structural fields and refuses on mismatch, naming every differing
field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PWCKPT01"
_DTYPES = {"<f4", "<f8"}


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, fields: dict):
        self.fields = fields
        detail = ", ".join(f"{k}: saved={v[0]!r} current={v[1]!r}" for k, v in sorted(fields.items()))
        super().__init__(f"checkpoint config mismatch on fields: {detail}")


@dataclass
class Checkpoint:
    step: int
    opt_step: int
    config: dict
    metrics: dict
    arrays: dict  # name -> np.ndarray


def save_checkpoint(path, step: int, config: dict, arrays: dict, metrics: dict | None = None,
                    opt_step: int = 0) -> None:
    directory = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        data = np.ascontiguousarray(arr, dtype=code)
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(data.tobytes())
    manifest = {
        "format": "picoweave-checkpoint-v1",
        "step": step,
        "opt_step": opt_step,
        "config": config,
        "metrics": metrics or {},
        "arrays": directory,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, expect_config: dict | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in checkpoint header: {magic!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError("truncated checkpoint: manifest length missing")
        (mlen,) = struct.unpack("<I", raw)
        mraw = f.read(mlen)
        if len(mraw) != mlen:
            raise CheckpointError("truncated checkpoint: manifest section incomplete")
        try:
            manifest = json.loads(mraw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt manifest section: {e}") from e

        arrays = {}
        for entry in manifest["arrays"]:
            code = entry["dtype"]
            if code not in _DTYPES:
                raise CheckpointError(f"array {entry['name']!r}: unknown dtype {code!r}")
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * int(code[-1])
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated checkpoint: array section {entry['name']!r} incomplete")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=code).reshape(shape).copy()

    if expect_config is not None:
        stored = manifest.get("config", {})
        mismatched = {
            k: (stored.get(k), expect_config[k])
            for k in expect_config
            if k in stored and stored[k] != expect_config[k]
        }
        if mismatched:
            raise ConfigMismatchError(mismatched)

    return Checkpoint(
        step=manifest["step"],
        opt_step=manifest.get("opt_step", 0),
        config=manifest.get("config", {}),
        metrics=manifest.get("metrics", {}),
        arrays=arrays,
    )
