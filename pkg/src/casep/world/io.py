"""Flat binary ("CAW1") and CSV serialization of labeled datasets.

Layout, all little-endian::

    magic   4s   b"CAW1"
    version u16  1
    domain  u16  0 = X, 1 = Y
    d_w, obs_dim, d_c_true, s_cols   u32 each
    count   u64
    payload count rows of float64:
        latent[d_w] obs[obs_dim] c_true[d_c_true] s_true[s_cols] attr_common attr_salient
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from casep.world.generate import X, Y, LabeledDataset, _Truths

MAGIC = b"CAW1"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIQ")


class FormatError(ValueError):
    pass


def to_bytes(ds: LabeledDataset) -> bytes:
    t = ds._truths
    n = len(ds)
    header = _HEADER.pack(MAGIC, VERSION, 0 if ds.domain == X else 1, ds.latents.shape[1],
                          ds.observations.shape[1], t.c_true.shape[1], t.s_true.shape[1], n)
    rows = np.concatenate([ds.latents, ds.observations, t.c_true, t.s_true,
                           t.attr_common[:, None].astype(np.float64),
                           t.attr_salient[:, None].astype(np.float64)], axis=1)
    return header + np.ascontiguousarray(rows, dtype="<f8").tobytes()


def from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, domain, d_w, obs_dim, d_c, s_cols, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    width = d_w + obs_dim + d_c + s_cols + 2
    payload = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    if payload.size != n * width:
        raise FormatError(f"payload has {payload.size} values, expected {n * width}")
    rows = payload.reshape(n, width).astype(np.float64)
    cuts = np.cumsum([d_w, obs_dim, d_c, s_cols, 1])
    w, o, c, s, ac, asal = np.split(rows, cuts, axis=1)
    truths = _Truths(c, s, ac[:, 0].astype(np.int64), asal[:, 0].astype(np.int64))
    return LabeledDataset(w, o, X if domain == 0 else Y, truths)


def save(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> LabeledDataset:
    return from_bytes(Path(path).read_bytes())


def save_csv(ds: LabeledDataset, path, limit: int | None = None) -> None:
    """Human-readable dump: one row per sample, truths included."""
    t = ds._truths
    n = len(ds) if limit is None else min(limit, len(ds))
    cols = ([f"w_{i}" for i in range(ds.latents.shape[1])]
            + [f"obs_{i}" for i in range(ds.observations.shape[1])]
            + [f"c_true_{i}" for i in range(t.c_true.shape[1])]
            + [f"s_true_{i}" for i in range(t.s_true.shape[1])]
            + ["attr_common", "attr_salient"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain"] + cols)
        for i in range(n):
            vals = np.concatenate([ds.latents[i], ds.observations[i], t.c_true[i], t.s_true[i]])
            writer.writerow([ds.domain] + [repr(float(v)) for v in vals]
                            + [int(t.attr_common[i]), int(t.attr_salient[i])])
