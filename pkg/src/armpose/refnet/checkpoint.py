"""Binary weight checkpoints.

Layout: the 8-byte magic ``ARMPOSE1``, a little-endian uint64 header length,
a UTF-8 JSON header, then every parameter as little-endian float64 in header
order. The header records the network config, each parameter's offset and
shape (in elements), and free-form ``extra`` metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .layers import Layer
from .model import NetConfig, PoseNet

MAGIC = b"ARMPOSE1"


def dump_bytes(model: Layer, config: NetConfig, extra: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, p, _ in model.named_parameters():
        entries.append({"name": name, "offset": offset, "shape": list(p.shape)})
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
        offset += p.size
    header = json.dumps(
        {"config": config.to_dict(), "params": entries, "count": offset, "extra": extra or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def parse_bytes(blob: bytes) -> tuple[NetConfig, dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a weight checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    data = np.frombuffer(blob, dtype="<f8", offset=16 + hlen)
    if data.size != header["count"]:
        raise DataError(f"checkpoint holds {data.size} values, header says {header['count']}")
    state = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        state[e["name"]] = data[e["offset"] : e["offset"] + size].reshape(e["shape"])
    return NetConfig.from_dict(header["config"]), state, header["extra"]


def save_checkpoint(path, model: Layer, config: NetConfig, extra: dict | None = None) -> None:
    Path(path).write_bytes(dump_bytes(model, config, extra))


def load_checkpoint(path) -> tuple[PoseNet, dict]:
    """Rebuild the network from a checkpoint; returns it with the ``extra`` dict."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    config, state, extra = parse_bytes(blob)
    net = PoseNet(config)
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match its config: {exc}") from exc
    return net, extra
