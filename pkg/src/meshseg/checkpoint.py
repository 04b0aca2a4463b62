"""Flat binary checkpoints for model parameters and optimizer state.

Layout (all integers little-endian unsigned, floats little-endian float64):

    magic   8 bytes  b"MSEGCKP1"
    version u32      (currently 1)
    C       u32      class count
    K       u32      KNN neighbor count
    variant u32 length + utf-8 bytes (canonical variant name)
    params  u32 count, then per entry:
            u32 name length, name utf-8, u32 rank, rank * u32 dims,
            raw float64 data (row-major)
    buffers u32 count, same entry encoding (batch-norm running stats)
    adam    u8 flag; if 1: u64 step count, then params-style blocks for the
            first-moment and second-moment buffers (same count/order as
            params)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractViolation
from .layers import SegmentationNet
from .optim import AdamState

MAGIC = b"MSEGCKP1"
VERSION = 1


def _write_array(f, name, arr):
    name_b = name.encode()
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    arr = np.asarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ContractViolation("truncated checkpoint file")
    return data


def _read_array(f):
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode()
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(dims)
    return name, arr.astype(np.float64)


def save_checkpoint(path, model: SegmentationNet, adam: AdamState = None):
    params = model.named_parameters()
    buffers = model.named_buffers()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, model.n_classes, model.K))
        var_b = model.variant.encode()
        f.write(struct.pack("<I", len(var_b)))
        f.write(var_b)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            _write_array(f, name, p.data)
        f.write(struct.pack("<I", len(buffers)))
        for name, b in buffers.items():
            _write_array(f, name, b)
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", adam.step))
            for name in params:
                _write_array(f, name, adam.m[name])
            for name in params:
                _write_array(f, name, adam.v[name])


def load_checkpoint(path):
    """Rebuild the model (and AdamState if stored) from a checkpoint."""
    with open(path, "rb") as f:
        if _read_exact(f, 8) != MAGIC:
            raise ContractViolation("not a meshseg checkpoint (bad magic)")
        version, n_classes, K = struct.unpack("<III", _read_exact(f, 12))
        if version != VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        (vlen,) = struct.unpack("<I", _read_exact(f, 4))
        variant = _read_exact(f, vlen).decode()

        model = SegmentationNet(n_classes, K=K, variant=variant,
                                rng=np.random.default_rng(0))
        params = model.named_parameters()
        buffers = model.named_buffers()

        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
        seen = set()
        for _ in range(n_params):
            name, arr = _read_array(f)
            if name not in params:
                raise ContractViolation(f"unknown parameter {name!r}")
            if params[name].data.shape != arr.shape:
                raise ContractViolation(f"shape mismatch for {name!r}")
            params[name].data = arr
            seen.add(name)
        if seen != set(params):
            raise ContractViolation("checkpoint is missing parameters")

        (n_buf,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(n_buf):
            name, arr = _read_array(f)
            if name not in buffers:
                raise ContractViolation(f"unknown buffer {name!r}")
            buffers[name][...] = arr

        (flag,) = struct.unpack("<B", _read_exact(f, 1))
        adam = None
        if flag:
            adam = AdamState(params)
            (adam.step,) = struct.unpack("<Q", _read_exact(f, 8))
            for store in (adam.m, adam.v):
                for _ in range(n_params):
                    name, arr = _read_array(f)
                    store[name] = arr
    return model, adam
