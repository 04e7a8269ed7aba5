"""Flat binary checkpoint container for a model and, optionally, its Adam state.

Everything little-endian::

    b"RWFC" | version u32 | config_len u32 | config JSON (utf-8, sorted keys)
    b"PARM" | count u32 | count x entry
        entry = name_len u16 | name utf-8 | trainable u8 | ndim u8 | dims u32 x ndim
                | float32 data (row-major)
    [ b"OPTS" | step u32 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | count u32
      | count x ( name_len u16 | name | t u32 | ndim u8 | dims u32 x ndim
                  | m float32 data | v float32 data ) ]

Parameters appear in declaration order, so two checkpoints of the same
architecture can be diffed byte-for-byte. Values are stored as 32-bit floats
regardless of the model's compute precision.
"""

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .backbone import Model, ModelConfig
from .numerics import AdamMoments
from .training import OptState

MAGIC = b"RWFC"
VERSION = 1


def _write_name(buf, name):
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _write_shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def _write_f32(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(model: Model, opt: OptState = None) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    buf.write(b"PARM" + struct.pack("<I", len(model.params)))
    for name, val in model.params.items():
        _write_name(buf, name)
        buf.write(struct.pack("<B", name in model.trainable))
        _write_shape(buf, val.shape)
        _write_f32(buf, val)
    if opt is not None:
        buf.write(b"OPTS" + struct.pack("<I4dI", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps,
                                        len(opt.moments)))
        for name, mom in opt.moments.items():
            _write_name(buf, name)
            buf.write(struct.pack("<I", mom.t))
            _write_shape(buf, mom.m.shape)
            _write_f32(buf, mom.m)
            _write_f32(buf, mom.v)
    return buf.getvalue()


def save_checkpoint(path, model: Model, opt: OptState = None):
    Path(path).write_bytes(checkpoint_bytes(model, opt))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise ValueError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def name(self):
        (n,) = self.unpack("H")
        return self.take(n).decode()

    def shape(self):
        (nd,) = self.unpack("B")
        return self.unpack(f"{nd}I") if nd else ()

    def f32(self, shape):
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)


def load_checkpoint(path):
    """Returns ``(model, opt_state_or_None)``."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    version, cfg_len = r.unpack("II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(json.loads(r.take(cfg_len)))
    dt = np.dtype(config.dtype)
    if r.take(4) != b"PARM":
        raise ValueError(f"{path}: missing parameter section")
    (count,) = r.unpack("I")
    params, trainable = OrderedDict(), set()
    for _ in range(count):
        name = r.name()
        (flag,) = r.unpack("B")
        shape = r.shape()
        params[name] = r.f32(shape).astype(dt)
        if flag:
            trainable.add(name)
    model = Model(config, params, trainable)
    opt = None
    if r.pos < len(r.raw):
        if r.take(4) != b"OPTS":
            raise ValueError(f"{path}: unknown trailing section")
        step, lr, b1, b2, eps, n = r.unpack("I4dI")
        opt = OptState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        for _ in range(n):
            name = r.name()
            (t,) = r.unpack("I")
            shape = r.shape()
            m = r.f32(shape).astype(dt)
            v = r.f32(shape).astype(dt)
            opt.moments[name] = AdamMoments(m, v, t)
    if r.pos != len(r.raw):
        raise ValueError(f"{path}: trailing bytes")
    return model, opt
