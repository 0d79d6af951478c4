"""Binary checkpoint format.

Layout (little-endian)::

    magic  b"RMTLCKPT"   version u32   meta_len u32   meta (utf-8 json)
    n_params u32
    per param: name_len u16, name, ndim u8, dims u32*ndim, float64 values
    adam: has_state u8, then t u64, lr/beta1/beta2/eps f64,
          per param (same order): has_moments u8, m values, v values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .optim import AdamState
from .tensor import Tensor

MAGIC = b"RMTLCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def _write_array(buf: list[bytes], arr: np.ndarray) -> None:
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, params: Mapping[str, Tensor], state: AdamState | None = None,
                    meta: dict | None = None) -> None:
    buf = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        nb = name.encode()
        buf += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
    buf.append(struct.pack("<B", state is not None))
    if state is not None:
        buf.append(struct.pack("<Q4d", state.t, state.lr, state.beta1, state.beta2, state.eps))
        for name in params:
            has = name in state.m
            buf.append(struct.pack("<B", has))
            if has:
                _write_array(buf, state.m[name])
                _write_array(buf, state.v[name])
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], AdamState | None, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    def read_array(shape):
        nonlocal pos
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        return arr

    (version,) = read("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = read("<I")
    meta = json.loads(data[pos:pos + meta_len])
    pos += meta_len
    (count,) = read("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = data[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I")
        params[name] = read_array(shape)
    (has_state,) = read("<B")
    state = None
    if has_state:
        t, lr, b1, b2, eps = read("<Q4d")
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
        for name, arr in params.items():
            (has,) = read("<B")
            if has:
                state.m[name] = read_array(arr.shape)
                state.v[name] = read_array(arr.shape)
    return params, state, meta
