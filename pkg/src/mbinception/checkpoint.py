"""Checkpoint files.

Layout::

    8 bytes   magic b"MBICKPT\\0"
    4 bytes   format version, u32 little-endian
    8 bytes   header length L, u64 little-endian
    L bytes   UTF-8 JSON header (graph description, tensor names, metadata)
    ...       tensors in header order, each in the tensor binary format
"""

import io
import json
import os
import struct

import numpy as np

from .errors import DataError
from .graph import from_description
from .optim import make_optimizer
from .tensor import read_tensor, write_tensor

MAGIC = b"MBICKPT\0"
FORMAT_VERSION = 1


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=True)


def atomic_write(path, data):
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, model, optimizer=None, meta=None):
    params = list(model.store.params)
    buffers = list(model.store.buffers)
    opt_arrays = optimizer.state_arrays() if optimizer is not None else {}
    header = {
        "graph": model.describe(),
        "dtype": np.dtype(next(iter(model.store.params.values())).dtype).name,
        "params": params,
        "buffers": buffers,
        "optimizer": None
        if optimizer is None
        else {"name": optimizer.name, "hyper": optimizer.hyperparameters(), "state": list(opt_arrays)},
        "meta": meta or {},
    }
    blob = dumps_json(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for name in params:
        write_tensor(buf, model.store.params[name])
    for name in buffers:
        write_tensor(buf, model.store.buffers[name])
    for name in opt_arrays:
        write_tensor(buf, opt_arrays[name])
    atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, optimizer_or_None, meta)``."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint: {exc.strerror}", path=path) from None
    with fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError("not a checkpoint file (bad magic)", path=path, offset=0)
        version, length = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}", path=path, offset=8)
        header = json.loads(fh.read(length).decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        model = from_description(header["graph"], dtype=dtype)
        try:
            for name in header["params"]:
                model.store.params[name] = read_tensor(fh).astype(dtype)
            for name in header["buffers"]:
                model.store.buffers[name] = read_tensor(fh).astype(dtype)
            optimizer = None
            if header["optimizer"] is not None:
                spec = header["optimizer"]
                optimizer = make_optimizer(spec["name"], **spec["hyper"])
                arrays = {name: read_tensor(fh) for name in spec["state"]}
                optimizer.load_state_arrays({k: v.astype(dtype) if not k.endswith("#t") else v
                                             for k, v in arrays.items()})
        except EOFError as exc:
            raise DataError(f"truncated checkpoint: {exc}", path=path, offset=fh.tell()) from None
    return model, optimizer, header["meta"]
