"""CASP container for separator (and optional adversary) parameters.

Layout, little-endian::

    magic       4s   b"CASP"
    version     u16  1
    reserved    u16  0
    header_len  u32
    header      JSON (utf-8): spec, tensor names and shapes, extra metadata
    payload     float64 tensors in header order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from casep.separator.model import SeparatorParams, SeparatorSpec

MAGIC = b"CASP"
VERSION = 1
_PREFIX = struct.Struct("<4sHHI")


class FormatError(ValueError):
    pass


def to_bytes(sep: SeparatorParams, adversary_params: dict[str, np.ndarray] | None = None,
             meta: dict | None = None) -> bytes:
    tensors = [("sep/" + k, sep.params[k]) for k in sorted(sep.params)]
    for k in sorted(adversary_params or {}):
        tensors.append(("adv/" + k, adversary_params[k]))
    header = {"spec": sep.spec.to_dict(), "tensors": [[k, list(v.shape)] for k, v in tensors],
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in tensors)
    return _PREFIX.pack(MAGIC, VERSION, 0, len(hb)) + hb + body


def from_bytes(buf: bytes) -> tuple[SeparatorParams, dict[str, np.ndarray], dict]:
    """Returns (separator, adversary params, meta)."""
    if len(buf) < _PREFIX.size:
        raise FormatError("truncated checkpoint")
    magic, version, _, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    offset = _PREFIX.size + hlen
    sep_params, adv_params = {}, {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(buf):
            raise FormatError("truncated payload")
        arr = np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        group, key = name.split("/", 1)
        (sep_params if group == "sep" else adv_params)[key] = arr
    if offset != len(buf):
        raise FormatError("trailing bytes after payload")
    spec = SeparatorSpec(**header["spec"])
    return SeparatorParams(spec, sep_params), adv_params, header.get("meta", {})


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, sep: SeparatorParams, adversary_params=None, meta=None) -> None:
    atomic_write(path, to_bytes(sep, adversary_params, meta))


def load(path) -> tuple[SeparatorParams, dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())
