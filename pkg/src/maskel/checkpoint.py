"""Versioned single-file container for named arrays.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"MSKLCKPT"
    offset 8   uint32    format version
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    ...        padding   zero bytes up to an 8-byte boundary
    payload              raw array bytes, each array 8-byte aligned

The JSON header holds ``stage`` (e.g. ``"diffusion"``), ``meta`` (creation
metadata, configuration and schedule snapshots) and ``arrays``: a list of
``{"name", "shape", "dtype", "offset", "nbytes"}`` where ``dtype`` is an
explicit little-endian numpy type string such as ``"<f4"`` and ``offset`` is
relative to the start of the payload.
"""

import json
import struct

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MSKLCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


def _pad(n, align=8):
    return (-n) % align


def save_arrays(path, arrays, stage, meta=None):
    """Write ``arrays`` (name -> array-like) to ``path``."""
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dtype = arr.dtype.str
        if dtype not in _ALLOWED:
            raise CheckpointError(f"array {name!r}: unsupported dtype {dtype}")
        data = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))
    header = json.dumps({"stage": stage, "meta": meta or {}, "arrays": index},
                        sort_keys=True).encode("utf-8")
    head = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header
    head += b"\0" * _pad(len(head))
    with open(path, "wb") as fh:
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_PREFIX.size)
        if len(raw) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(raw)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except ValueError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
    start = _PREFIX.size + hlen
    header["_payload_start"] = start + _pad(start)
    return header


def load_arrays(path, stage=None):
    """Return ``(arrays, header)``; checks ``stage`` when given."""
    header = read_header(path)
    if stage is not None and header["stage"] != stage:
        raise CheckpointError(f"{path}: stage {header['stage']!r}, expected {stage!r}")
    arrays = {}
    with open(path, "rb") as fh:
        for item in header["arrays"]:
            fh.seek(header["_payload_start"] + item["offset"])
            data = fh.read(item["nbytes"])
            if len(data) != item["nbytes"]:
                raise CheckpointError(f"{path}: truncated payload for {item['name']!r}")
            arr = np.frombuffer(data, dtype=np.dtype(item["dtype"])).reshape(item["shape"])
            arrays[item["name"]] = arr.copy()
    return arrays, header


def save_module(path, modules, stage, meta=None):
    """Save one or more ``nn.Module`` state dicts, prefixing names by key."""
    arrays = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = value
    save_arrays(path, arrays, stage, meta)


def load_state(arrays, prefix, dtype=None):
    """Extract the state dict stored under ``prefix`` as tensors."""
    state = {}
    for name, arr in arrays.items():
        if name.startswith(prefix + "."):
            t = torch.from_numpy(np.asarray(arr, order="C"))
            if dtype is not None and t.is_floating_point():
                t = t.to(dtype)
            state[name[len(prefix) + 1:]] = t
    return state
