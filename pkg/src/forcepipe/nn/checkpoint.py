"""Versioned little-endian binary checkpoints.

Layout::

    magic    4 bytes  b"FPCK"
    version  u32
    n_layers u32
    per layer:
        tag      u16
        n_arrays u16
        per array: name_len u16, name utf-8, ndim u16, dims u32 * ndim, float64 data
    has_opt  u8
    if has_opt:
        step u64, lr, beta1, beta2, eps, l2_coeff as f64
        n u32, then n first moments and n second moments (ndim, dims, data)

Arrays stored per layer are its trainable parameters followed by buffers
(e.g. batch-norm running statistics).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from forcepipe.errors import CheckpointError
from forcepipe.nn.optim import OptimizerState

MAGIC = b"FPCK"
VERSION = 1


def _write_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<H", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_array(buf):
    (ndim,) = struct.unpack("<H", _read_exact(buf, 2))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def dumps(layers, opt: OptimizerState | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(layers)))
    for layer in layers:
        arrays = {**layer.params, **layer.buffers}
        buf.write(struct.pack("<HH", layer.tag, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            _write_array(buf, arr)
    buf.write(struct.pack("<B", opt is not None))
    if opt is not None:
        buf.write(struct.pack("<Q", opt.step))
        buf.write(struct.pack("<5d", opt.lr, opt.beta1, opt.beta2, opt.eps, opt.l2_coeff))
        buf.write(struct.pack("<I", len(opt.m)))
        for arr in (*opt.m, *opt.v):
            _write_array(buf, arr)
    return buf.getvalue()


def loads(data: bytes, layers) -> OptimizerState | None:
    """Fill ``layers`` (already built with the right architecture) from ``data``."""
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("not a forcepipe checkpoint (bad magic)")
    version, n_layers = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n_layers != len(layers):
        raise CheckpointError(f"checkpoint has {n_layers} layers, model has {len(layers)}")
    for layer in layers:
        tag, n_arrays = struct.unpack("<HH", _read_exact(buf, 4))
        if tag != layer.tag:
            raise CheckpointError(f"layer type tag {tag} does not match {type(layer).__name__}")
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
            name = _read_exact(buf, name_len).decode("utf-8")
            arr = _read_array(buf)
            target = layer.params if name in layer.params else layer.buffers
            if name not in target or target[name].shape != arr.shape:
                raise CheckpointError(f"{type(layer).__name__}.{name}: unexpected array {arr.shape}")
            target[name] = arr
    (has_opt,) = struct.unpack("<B", _read_exact(buf, 1))
    if not has_opt:
        return None
    (step,) = struct.unpack("<Q", _read_exact(buf, 8))
    lr, b1, b2, eps, l2 = struct.unpack("<5d", _read_exact(buf, 40))
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    moments = [_read_array(buf) for _ in range(2 * n)]
    return OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, l2_coeff=l2, step=step,
                          m=moments[:n], v=moments[n:])


def save(path, layers, opt: OptimizerState | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(layers, opt))
    return path


def load(path, layers) -> OptimizerState | None:
    return loads(Path(path).read_bytes(), layers)
