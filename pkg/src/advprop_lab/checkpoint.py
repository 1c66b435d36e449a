"""Checkpoint files: a plain-text manifest followed by a little-endian float64 payload.

Layout::

    ADVPROP-CHECKPOINT 1
    meta <key> = <value>          (sorted by key)
    array <name> <d0,d1,...>      (payload order)
    payload <total float count>
    end
    <raw float64 little-endian bytes>
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .layers import DeskNet, Model, route_of

MAGIC = "ADVPROP-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Corrupt, truncated, incompatible or unknown-version checkpoint."""


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    meta: Dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @property
    def num_routes(self) -> int:
        routes = [route_of(n) for n in self.arrays]
        return max((r for r in routes if r is not None), default=0) + 1

    def payload_size(self) -> int:
        return sum(a.size for a in self.arrays.values())


def config_digest(described: Dict[str, str]) -> str:
    text = "\n".join(f"{k}={described[k]}" for k in sorted(described))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def from_model(model: Model, meta: Optional[Dict[str, str]] = None) -> Checkpoint:
    info = dict(meta or {})
    if isinstance(model, DeskNet):
        info.update({k: str(v) for k, v in model.config().items()})
    info["K"] = str(model.num_routes)
    return Checkpoint(model.state(), info)


def to_model(ckpt: Checkpoint) -> DeskNet:
    """Build a DeskNet matching the checkpoint's recorded architecture and load it."""
    try:
        model = DeskNet(int(ckpt.meta["channels_in"]), int(ckpt.meta["num_classes"]), int(ckpt.meta["K"]),
                        image_size=int(ckpt.meta["image_size"]),
                        share_affine=bool(int(ckpt.meta.get("share_affine", "0"))))
    except KeyError as e:
        raise CheckpointError(f"checkpoint metadata lacks {e.args[0]!r}") from None
    load_into(model, ckpt)
    return model


def load_into(model: Model, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``model``; any name or shape mismatch is an error."""
    if ckpt.num_routes != model.num_routes:
        raise CheckpointError(
            f"checkpoint has K={ckpt.num_routes} BN routes but the model has K={model.num_routes}; "
            "strip auxiliary routes first")
    try:
        model.load_state(ckpt.arrays)
    except ValueError as e:
        raise CheckpointError(str(e)) from None


def encode(ckpt: Checkpoint) -> bytes:
    lines = [f"{MAGIC} {ckpt.version}"]
    for key in sorted(ckpt.meta):
        value = str(ckpt.meta[key])
        if "\n" in value or "\n" in key:
            raise CheckpointError("metadata may not contain newlines")
        lines.append(f"meta {key} = {value}")
    chunks = []
    for name, arr in ckpt.arrays.items():
        if " " in name:
            raise CheckpointError(f"array name {name!r} contains a space")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"array {name} {','.join(str(d) for d in arr.shape) or '-'}")
        chunks.append(arr.astype(_DTYPE).tobytes())
    lines.append(f"payload {ckpt.payload_size()}")
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def decode(raw: bytes) -> Checkpoint:
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError("checkpoint manifest is not terminated (corrupt file)")
    try:
        header = raw[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint manifest is not valid text") from None
    payload = raw[cut + len(marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError("not an advprop checkpoint")
    if first[1] != str(VERSION):
        raise CheckpointError(f"unsupported checkpoint version {first[1]} (expected {VERSION})")
    meta: Dict[str, str] = {}
    shapes = []
    declared = None
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, sep, value = rest.partition(" = ")
            if not sep:
                raise CheckpointError(f"bad metadata line {line!r}")
            meta[key] = value
        elif kind == "array":
            name, _, dims = rest.partition(" ")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            shapes.append((name, shape))
        elif kind == "payload":
            declared = int(rest)
        else:
            raise CheckpointError(f"unknown manifest line {line!r}")
    count = sum(int(np.prod(s)) for _, s in shapes)
    if declared is None or declared != count:
        raise CheckpointError("payload count does not match array table")
    if len(payload) < count * 8:
        raise CheckpointError(f"checkpoint truncated: expected {count * 8} payload bytes, found {len(payload)}")
    if len(payload) > count * 8:
        raise CheckpointError(f"checkpoint has {len(payload) - count * 8} trailing bytes")
    flat = np.frombuffer(payload, dtype=_DTYPE).astype(np.float64)
    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arrays[name] = flat[offset:offset + n].reshape(shape).copy()
        offset += n
    return Checkpoint(arrays, meta, VERSION)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def save_checkpoint(model: Model, meta: Optional[Dict[str, str]], path) -> Checkpoint:
    ckpt = from_model(model, meta)
    write_checkpoint(ckpt, path)
    return ckpt


def load_checkpoint(path, model: Optional[Model] = None) -> Model:
    """Read ``path``; load into ``model`` if given, else build a matching DeskNet."""
    ckpt = read_checkpoint(path)
    if model is None:
        return to_model(ckpt)
    load_into(model, ckpt)
    return model


def strip_aux(ckpt: Checkpoint) -> Checkpoint:
    """Drop every auxiliary-route array, leaving a K=1 checkpoint."""
    if ckpt.num_routes < 2:
        raise CheckpointError("checkpoint is already stripped (no auxiliary BN routes)")
    arrays = {n: a.copy() for n, a in ckpt.arrays.items() if (route_of(n) or 0) == 0}
    meta = dict(ckpt.meta)
    meta["K"] = "1"
    meta["stripped_from_K"] = str(ckpt.num_routes)
    return Checkpoint(arrays, meta, ckpt.version)
