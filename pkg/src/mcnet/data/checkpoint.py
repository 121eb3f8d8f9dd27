"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"MCNC" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | dtype tag u8 (0=f32, 1=f64)
               | rank u32 | dims u32 * rank | payload (little-endian)

Model checkpoints store the model config under ``config/``, parameters under
``param/``, and optionally optimizer moments under ``optim/`` and the step
counter as ``train/step``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from ..config import ModelConfig

MAGIC = b"MCNC"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}
_U32_MAX = 2 ** 32 - 1


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def encode_entries(entries: Iterable[tuple[str, np.ndarray]]) -> bytes:
    entries = list(entries)
    names = [n for n, _ in entries]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise CheckpointError(f"name collision: {sorted(dup)}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        if any(d > _U32_MAX for d in arr.shape):
            raise CheckpointError(f"{name}: dimension overflow in shape {arr.shape}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_entries(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = r.unpack("<I")
        name = r.take(length).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dtype = _DTYPES[tag].newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(_DTYPES[tag])
        if name in out:
            raise CheckpointError(f"name collision: {name}")
        out[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save_tensors(path: str | Path, entries: Iterable[tuple[str, np.ndarray]]) -> None:
    data = encode_entries(entries)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_entries(Path(path).read_bytes())


def config_entries(config: ModelConfig) -> list[tuple[str, np.ndarray]]:
    return [(f"config/{f.name}", np.asarray(float(getattr(config, f.name)))) for f in fields(config)]


def config_from_entries(entries: dict[str, np.ndarray]) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        key = f"config/{f.name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint lacks {key}")
        v = float(entries[key])
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        values[f.name] = bool(v) if kind == "bool" else int(v) if kind == "int" else v
    return ModelConfig(**values)


@dataclass
class TrainState:
    step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(model, path: str | Path, state: TrainState | None = None) -> None:
    entries = config_entries(model.config)
    entries += [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    if state is not None:
        entries.append(("train/step", np.asarray(float(state.step))))
        entries += [(f"optim/{k}", v) for k, v in state.moments.items()]
    save_tensors(path, entries)


def load_parameters(model, entries: dict[str, np.ndarray]) -> None:
    """Copy ``param/*`` entries into ``model``, checking names and shapes."""
    params = dict(model.named_parameters())
    stored = {k[len("param/"):] for k in entries if k.startswith("param/")}
    missing = sorted(set(params) - stored)
    extra = sorted(stored - set(params))
    for name, p in params.items():
        if name not in stored:
            continue
        arr = entries[f"param/{name}"]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        p.data = entries[f"param/{name}"].astype(p.dtype, copy=True)


def load_checkpoint(path: str | Path, dtype=None):
    """Rebuild the model stored at ``path``; returns ``(model, TrainState)``.

    ``dtype`` defaults to the stored parameter precision.
    """
    from ..model import MCNet

    entries = load_tensors(path)
    config = config_from_entries(entries)
    if dtype is None:
        dtype = next((v.dtype for k, v in entries.items() if k.startswith("param/")), np.float32)
    model = MCNet(config, dtype=dtype)
    load_parameters(model, entries)
    state = TrainState(
        step=int(entries["train/step"]) if "train/step" in entries else 0,
        moments={k[len("optim/"):]: v for k, v in entries.items() if k.startswith("optim/")},
    )
    return model, state
