"""Binary checkpoint format (little-endian).

Layout::

    b"DKNC"  u32 version
    u32 n    config JSON (n bytes, UTF-8)
    u32 count, then per tensor:
        u16 name length, name, u8 ndim, u32 dims..., float32 data
    u64 adam step, u32 count, then per parameter: name entry as above for m, then v
    u32 n    metadata JSON

Parameters and batch-norm buffers share the tensor table; buffer names end
in ``running_mean`` / ``running_var``. Everything is stored as float32 so a
float32 model round-trips bit-exactly.
"""

import io
import json
import struct

import numpy as np

from dkn.errors import (BadMagicError, ConfigMismatchError, TruncatedCheckpointError,
                        UnsupportedVersionError)
from dkn.model import ModelConfig, build_model

MAGIC = b"DKNC"
VERSION = 1


def _pack_tensor(buf, name, array):
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(array, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(a.tobytes())


def _pack_json(buf, obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def encode_checkpoint(model, state=None, metadata=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _pack_json(buf, model.config.to_dict())
    tensors = {k: p.data for k, p in model.parameters().items()}
    tensors.update(model.buffers())
    buf.write(struct.pack("<I", len(tensors)))
    for name, a in tensors.items():
        _pack_tensor(buf, name, a)
    step = state.step if state is not None else 0
    moments = state.m if state is not None else {}
    buf.write(struct.pack("<QI", step, len(moments)))
    for name in moments:
        _pack_tensor(buf, name, state.m[name])
        _pack_tensor(buf, name, state.v[name])
    _pack_json(buf, metadata or {})
    return buf.getvalue()


def save_checkpoint(model, state, path, metadata=None):
    data = encode_checkpoint(model, state, metadata)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(bytes(self.take(n)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadMagicError(f"corrupt JSON block: {exc}") from None

    def tensor(self):
        (n,) = self.unpack("<H")
        name = bytes(self.take(n)).decode("utf-8", errors="replace")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, a.astype(np.float32)


def decode_checkpoint(data, expected_variant=None):
    """``(model, AdamState, metadata)`` from checkpoint bytes."""
    from dkn.training import AdamState

    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise BadMagicError("not a DKN checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, supported {VERSION}")
    config_dict = r.json()
    try:
        config = ModelConfig.from_dict(config_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigMismatchError(f"invalid model config in checkpoint: {exc}") from None
    if expected_variant is not None and config.variant != expected_variant:
        raise ConfigMismatchError(
            f"checkpoint holds a {config.variant} model, expected {expected_variant}"
        )
    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))
    step, n_moments = r.unpack("<QI")
    state = AdamState(step=step)
    for _ in range(n_moments):
        name, m = r.tensor()
        _, v = r.tensor()
        state.m[name] = m
        state.v[name] = v
    metadata = r.json()

    model = build_model(config, dtype=np.float32)
    buffer_names = set(model.buffers())
    params = {k: v for k, v in tensors.items() if k not in buffer_names}
    buffers = {k: v for k, v in tensors.items() if k in buffer_names}
    if set(params) != set(model.parameters()):
        raise ConfigMismatchError("checkpoint tensors do not match its model config")
    model.load_state(params, buffers)
    return model, state, metadata


def load_checkpoint(path, expected_variant=None):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), expected_variant)
