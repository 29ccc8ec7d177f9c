"""Binary checkpoint format.

Layout: an 8-byte little-endian uint64 header length, a UTF-8 JSON header,
then a flat payload of raw little-endian float32 arrays. The header holds
the format version, the full run config, the epoch counter, optimizer step
counts, the training RNG state, and a tensor directory mapping each array
name to its shape and byte offset in the payload. Everything needed to
resume training bit-for-bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_NAME = "tamperkit-checkpoint"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class CheckpointData:
    config: dict
    epoch: int
    tensors: dict[str, np.ndarray]
    opt_steps: list[int]
    rng_state: dict
    best_val_auc: float
    best_epoch: int


def _rng_state_to_json(state: dict) -> dict:
    # PCG64 state is nested dicts of big ints; JSON handles those natively
    return json.loads(json.dumps(state))


def save_checkpoint(path, *, config: dict, epoch: int, tensors: dict[str, np.ndarray],
                    opt_steps: list[int], rng_state: dict, best_val_auc: float = float("-inf"),
                    best_epoch: int = -1) -> None:
    directory = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config,
        "epoch": int(epoch),
        "opt_steps": [int(s) for s in opt_steps],
        "rng_state": _rng_state_to_json(rng_state),
        "best_val_auc": float(best_val_auc),
        "best_epoch": int(best_epoch),
        "tensor_directory": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointData:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no checkpoint at {p}")
    with open(p, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ValueError(f"{p}: truncated checkpoint (no header length)")
        (hlen,) = struct.unpack("<Q", raw_len)
        hbytes = f.read(hlen)
        if len(hbytes) != hlen:
            raise ValueError(f"{p}: truncated checkpoint header")
        header = json.loads(hbytes.decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{p}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{p}: unsupported checkpoint version {header.get('version')}")
        payload = f.read()
    tensors = {}
    for entry in header["tensor_directory"]:
        start = entry["offset"]
        end = start + entry["nbytes"]
        if end > len(payload):
            raise ValueError(f"{p}: tensor {entry['name']} overruns the payload")
        arr = np.frombuffer(payload[start:end], dtype=_DTYPE).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return CheckpointData(
        config=header["config"],
        epoch=int(header["epoch"]),
        tensors=tensors,
        opt_steps=[int(s) for s in header["opt_steps"]],
        rng_state=header["rng_state"],
        best_val_auc=float(header["best_val_auc"]),
        best_epoch=int(header["best_epoch"]),
    )
