"""Checkpoint file format.

One binary file holds every named tensor as [name_len u32][utf-8 name]
[ndim u32][dims u32 ...][float32 little-endian payload], in saved order.  A
sibling ``<path>.manifest`` text file lists ``name shape`` per line so a
checkpoint can be inspected without parsing the binary.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VXCK"


def save_checkpoint(named, path):
    """Write tensors to ``path``.  ``named`` is a dict name -> Tensor/ndarray
    or an object with ``named_parameters()``."""
    if hasattr(named, "named_parameters"):
        items = [(n, p.data) for n, p in named.named_parameters()]
    else:
        items = [(n, getattr(v, "data", v)) for n, v in named.items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes())
    with open(str(path) + ".manifest", "w") as fh:
        for name, arr in items:
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            fh.write(f"{name} {shape}\n")


def load_checkpoint(path):
    """Read a checkpoint back as an ordered dict name -> float64 ndarray."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = 1
            for d in shape:
                n *= d
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            out[name] = data.reshape(shape)
    return out


def load_into(module, source, strict=True):
    """Copy values from ``source`` (path or dict) into a module by name.

    With ``strict=False`` only the intersection of names is copied (used for
    initializing the synthesis text encoder from a pre-trained one); returns
    the list of copied names.
    """
    if isinstance(source, (str, bytes)):
        source = load_checkpoint(source)
    params = dict(module.named_parameters())
    copied = []
    for name, arr in source.items():
        if name not in params:
            if strict:
                raise KeyError(f"checkpoint tensor {name!r} has no target parameter")
            continue
        p = params[name]
        if p.data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{p.data.shape} vs {arr.shape}")
        p.data = arr.astype(np.float64)
        copied.append(name)
    if strict:
        missing = [n for n in params if n not in source]
        if missing:
            raise KeyError(f"checkpoint missing parameters: {missing[:5]}")
    return copied
