"""Versioned binary checkpoint format.

Layout (all multi-byte integers little-endian):

    bytes 0..7    magic ``KVGRPOC1``
    bytes 8..11   format version (uint32), currently 1
    bytes 12..15  header length H in bytes (uint32)
    bytes 16..16+H  UTF-8 JSON header: {"layout": {name: {offset, shape}},
                  "param_count": P, "config": {...}, "iteration": n,
                  "has_ema": bool}
    then          P float64 values little-endian (the parameters)
    then          P float64 values little-endian (EMA parameters, if has_ema)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .params import Layout, Params

MAGIC = b"KVGRPOC1"
VERSION = 1


@dataclass
class CheckpointData:
    params: Params
    config: dict
    iteration: int
    ema: Params | None


def save_checkpoint(path: str | Path, params: Params, config: dict,
                    iteration: int = 0, ema: Params | None = None) -> None:
    header = {
        "layout": params.layout.to_json(),
        "param_count": params.layout.total,
        "config": config,
        "iteration": iteration,
        "has_ema": ema is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())
        if ema is not None:
            fh.write(ema.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    layout = Layout.from_json(header["layout"])
    count = header["param_count"]
    if count != layout.total:
        raise ConfigError(f"checkpoint count {count} disagrees with layout {layout.total}")
    offset = 16 + header_len
    need = count * 8 * (2 if header["has_ema"] else 1)
    if len(raw) - offset < need:
        raise ConfigError(f"checkpoint truncated: need {need} value bytes")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    params = Params(values.astype(np.float64), layout)
    ema = None
    if header["has_ema"]:
        ema_values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset + count * 8)
        ema = Params(ema_values.astype(np.float64), layout)
    return CheckpointData(params, header["config"], header["iteration"], ema)
