"""Binary checkpoint format: magic "FCK1", a version field, a JSON header
describing layouts and array lengths, then raw little-endian float64
payloads. Round trips are bitwise exact; writes are atomic."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .network import NetLayout
from .optim import OptimizerState

MAGIC = b"FCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    f_layout: NetLayout
    f_params: np.ndarray
    ema: np.ndarray
    step: int = 0
    config_hash: str = ""
    g_layout: NetLayout | None = None
    g_params: np.ndarray | None = None
    f_opt: OptimizerState | None = None
    g_opt: OptimizerState | None = None


def _array_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    table = [("f_params", ckpt.f_params), ("ema", ckpt.ema)]
    if ckpt.g_params is not None:
        table.append(("g_params", ckpt.g_params))
    for tag, opt in (("f_opt", ckpt.f_opt), ("g_opt", ckpt.g_opt)):
        if opt is not None:
            table.append((f"{tag}.m", opt.m))
            table.append((f"{tag}.v", opt.v))
    return table


def checkpoint_save(path: str, ckpt: Checkpoint) -> str:
    arrays = _array_table(ckpt)
    header = {
        "version": VERSION,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "f_layout": ckpt.f_layout.to_dict(),
        "g_layout": None if ckpt.g_layout is None else ckpt.g_layout.to_dict(),
        "opt_counts": {
            tag: opt.count
            for tag, opt in (("f_opt", ckpt.f_opt), ("g_opt", ckpt.g_opt))
            if opt is not None
        },
        "arrays": [[name, int(arr.size)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def checkpoint_load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {VERSION})"
        )
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + blob_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16 : 16 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    offset = 16 + blob_len
    payload: dict[str, np.ndarray] = {}
    for name, size in header["arrays"]:
        nbytes = 8 * size
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"truncated checkpoint payload at {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(
            np.float64
        )
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in checkpoint array {name}")
        payload[name] = arr
        offset += nbytes

    counts = header.get("opt_counts", {})

    def opt_of(tag):
        if f"{tag}.m" not in payload:
            return None
        return OptimizerState(
            m=payload[f"{tag}.m"], v=payload[f"{tag}.v"], count=int(counts[tag])
        )

    return Checkpoint(
        f_layout=NetLayout.from_dict(header["f_layout"]),
        f_params=payload["f_params"],
        ema=payload["ema"],
        step=int(header["step"]),
        config_hash=header["config_hash"],
        g_layout=(
            None
            if header["g_layout"] is None
            else NetLayout.from_dict(header["g_layout"])
        ),
        g_params=payload.get("g_params"),
        f_opt=opt_of("f_opt"),
        g_opt=opt_of("g_opt"),
    )
