"""
Binary checkpoint format (little-endian):

    b"MBCK" | u32 version | u32 arch length | arch (utf-8)
    | u32 parameterized layer count | u32 record count
    | records: u32 name length, name, u8 item size (4 or 8), u32 ndim, ndim x u32 dims, raw values
"""
import io
import os
import struct
from pathlib import Path

import numpy as np

import config
from arch.grammar import parse
from engine.errors import CheckpointError
from engine.model import Model, build_model
from engine.rng import derive_stream

VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _layer_count(model: Model) -> int:
    return sum(1 for layer in model.layers if layer.parameters())


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    arch = (model.arch or "").encode("utf-8")
    params = model.parameters()
    buf.write(config.CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<II", _layer_count(model), len(params)))
    for param in params:
        name = param.name.encode("utf-8")
        value = param.value
        dtype = _DTYPES[value.dtype.itemsize]
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BI", value.dtype.itemsize, value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype=dtype).tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> Path:
    """Write atomically: temporary sibling, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)
    return path


def _read(buf: io.BytesIO, size: int, source: str) -> bytes:
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError(f"{source}: truncated checkpoint")
    return data


def read_checkpoint(source) -> tuple:
    """Return (arch, layer_count, {name: array}) from a path or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw, label = bytes(source), "<bytes>"
    else:
        label = str(source)
        try:
            raw = Path(source).read_bytes()
        except OSError as e:
            raise CheckpointError(f"{label}: {e}") from e
    buf = io.BytesIO(raw)
    if _read(buf, 4, label) != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{label}: not a checkpoint (bad magic)")
    version, arch_len = struct.unpack("<II", _read(buf, 8, label))
    if version != VERSION:
        raise CheckpointError(f"{label}: unsupported checkpoint version {version}")
    arch = _read(buf, arch_len, label).decode("utf-8")
    layer_count, n_records = struct.unpack("<II", _read(buf, 8, label))
    state = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<I", _read(buf, 4, label))
        name = _read(buf, name_len, label).decode("utf-8")
        itemsize, ndim = struct.unpack("<BI", _read(buf, 5, label))
        if itemsize not in _DTYPES:
            raise CheckpointError(f"{label}: {name} has unsupported item size {itemsize}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim, label))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(_read(buf, count * itemsize, label), dtype=_DTYPES[itemsize])
        state[name] = values.reshape(shape).astype(_DTYPES[itemsize].newbyteorder("="))
    if buf.read(1):
        raise CheckpointError(f"{label}: trailing bytes after last record")
    return arch, layer_count, state


def load_checkpoint(source, model: Model = None) -> Model:
    """Load into an existing model, or rebuild the model from the stored architecture."""
    arch, layer_count, state = read_checkpoint(source)
    if model is None:
        if not arch:
            raise CheckpointError("checkpoint has no architecture; pass a model to load into")
        itemsize = next(iter(state.values())).dtype.itemsize if state else 4
        model = build_model(parse(arch), derive_stream(0, "checkpoint"), precision=itemsize * 8)
    if _layer_count(model) != layer_count:
        raise CheckpointError(f"checkpoint has {layer_count} layers, model has {_layer_count(model)}")
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    model.arch = model.arch or arch
    return model
