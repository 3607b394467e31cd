"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"PROGNET\\0"
    version    u32      FORMAT_VERSION
    body_len   u64      number of body bytes that follow
    body       header_len u32, header JSON (utf-8, sorted keys),
               n_tensors u32, then per tensor:
                   name_len u16, name utf-8, dtype 3 bytes b"<f8",
                   ndim u8, ndim x u32 extents, row-major payload
    digest     32 bytes SHA-256 of every preceding byte

The header records layer specs, observation shape, action count and, per
column, its seed, adapter gate initialisation, frozen flag and task label.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .network import AdapterBank, Column, LayerSpec, ProgressiveNetwork, _freeze

MAGIC = b"PROGNET\0"
FORMAT_VERSION = 1
_DTYPE = b"<f8"


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def to_bytes(net: ProgressiveNetwork) -> bytes:
    header = {
        "obs_shape": list(net.obs_shape),
        "n_actions": net.n_actions,
        "layers": [s.to_dict() for s in net.layer_specs],
        "columns": [{"index": c.index, "seed": c.seed, "alpha_init": c.alpha_init,
                     "frozen": c.frozen, "task": c.task} for c in net.columns],
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(hjson)), hjson]
    tensors = []
    for c in net.columns:
        tensors += [(f"c{c.index}/{n}", a) for n, a in c.params.items()]
        tensors += [(f"c{c.index}/{n}", a) for n, a in net.adapters.of(c.index).items()]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, _DTYPE, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    body = b"".join(parts)
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(body))
    return head + body + hashlib.sha256(head + body).digest()


def checkpoint_save(net: ProgressiveNetwork, path) -> None:
    data = to_bytes(net)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError("checkpoint body ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ProgressiveNetwork:
    fixed = len(MAGIC) + 12
    if len(data) < fixed:
        raise TruncatedCheckpointError(f"file is only {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a prognet checkpoint (bad magic)")
    version, body_len = struct.unpack("<IQ", data[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if len(data) < fixed + body_len + 32:
        raise TruncatedCheckpointError(
            f"expected {fixed + body_len + 32} bytes, file has {len(data)}")
    end = fixed + body_len
    if len(data) != end + 32 or hashlib.sha256(data[:end]).digest() != data[end:]:
        raise ChecksumError("checkpoint digest does not match its contents")

    r = _Reader(data[fixed:end])
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        if r.take(3) != _DTYPE:
            raise CheckpointError(f"tensor {name}: unsupported dtype")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    net = ProgressiveNetwork([LayerSpec.from_dict(d) for d in header["layers"]],
                             header["n_actions"], tuple(header["obs_shape"]))
    net.adapters = AdapterBank()
    for cinfo in header["columns"]:
        k = cinfo["index"]
        own, lat = net.column_shapes(k)
        try:
            params = {name: arrays.pop(f"c{k}/{name}") for name, *_ in own}
            adapters = {name: arrays.pop(f"c{k}/{name}") for name, *_ in lat}
        except KeyError as e:
            raise CheckpointError(f"missing tensor {e.args[0]}") from None
        for name, shape, *_ in own + lat:
            got = params.get(name, adapters.get(name))
            if got.shape != shape:
                raise CheckpointError(f"tensor c{k}/{name} has shape {got.shape}, expected {shape}")
        col = Column(k, cinfo["seed"], cinfo["alpha_init"], params, cinfo["frozen"], cinfo["task"])
        net.columns.append(col)
        if adapters:
            net.adapters.by_column[k] = adapters
        if col.frozen:
            _freeze(params.values())
            _freeze(adapters.values())
    if arrays:
        raise CheckpointError(f"unexpected tensors: {sorted(arrays)}")
    return net


def checkpoint_load(path) -> ProgressiveNetwork:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def file_digest(path) -> str:
    with open(path, "rb") as f:
        return f.read()[-32:].hex()
