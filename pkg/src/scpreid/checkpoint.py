"""Versioned binary container for model weights and training state.

Layout (all integers little-endian):

    bytes 0..5    magic  b"SCPRv1"
    bytes 6..13   uint64 header length in bytes
    header        UTF-8 JSON: {"format_version", "config", "step",
                  "extra", "arrays": [{"name", "shape", "dtype", "offset",
                  "nbytes"}, ...]}
    payload       raw array data, concatenated in index order

Weight arrays are stored as little-endian 32-bit floats ("<f4").  Optimizer
moments reuse the same dtype; integer counters use "<i8" and RNG state bytes
use "u1".  Offsets are relative to the start of the payload.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SCPRv1"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


class CheckpointError(RuntimeError):
    """Corrupt or unreadable checkpoint container."""


def _canonical_dtype(arr: np.ndarray) -> tuple[np.ndarray, str]:
    kind = arr.dtype.kind
    if kind == "f":
        dt = "<f8" if arr.dtype.itemsize == 8 else "<f4"
    elif kind in "iub" and arr.dtype.itemsize == 1:
        dt = "|u1"
    elif kind in "iu":
        dt = "<i8"
    else:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    # np.asarray with order="C" (unlike ascontiguousarray) keeps 0-d shapes
    return np.asarray(arr, dtype=np.dtype(dt), order="C"), dt


def save_container(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    config: dict | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        arr, dt = _canonical_dtype(arr)
        raw = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "step": int(step),
        "extra": extra or {},
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


class Container:
    def __init__(self, config: dict, step: int, extra: dict, arrays: dict[str, np.ndarray]):
        self.config = config
        self.step = step
        self.extra = extra
        self.arrays = arrays


def load_container(path: str | Path) -> Container:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    data = path.read_bytes()
    if data[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:6]!r}")
    header_len = int.from_bytes(data[6:14], "little")
    try:
        header = json.loads(data[14 : 14 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = data[14 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = entry["dtype"]
        if dt not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: array {entry['name']!r} has dtype {dt!r}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(dt)).reshape(entry["shape"]).copy()
    return Container(header.get("config", {}), int(header.get("step", 0)), header.get("extra", {}), arrays)
