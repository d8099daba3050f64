"""Dataset generation and file ingestion.

Formats: the in-repo two-class Gaussian blobs generator, CSV with the label
in the first column, and idx (big-endian header, unsigned-byte payload) for
image datasets.
"""

import struct

import numpy as np

from pathlib import Path

from .errors import DataError
from .seeding import seeded_rng

__all__ = [
    "make_blobs",
    "save_csv",
    "load_csv",
    "load_idx",
    "load_idx_images",
    "load_idx_labels",
]


def make_blobs(n, seed, std=1.0, separation=3.0, dim=2):
    """Two Gaussian classes at Euclidean distance ``separation``.

    Deterministic in ``seed``; returns shuffled ``(X, y)`` with integer
    labels 0/1 split as evenly as ``n`` allows.
    """
    if n < 2:
        raise DataError("need at least two samples")
    rng = seeded_rng(seed)
    center = np.full(dim, separation / (2.0 * np.sqrt(dim)))
    half = n // 2
    x0 = rng.standard_normal((half, dim)) * std - center
    x1 = rng.standard_normal((n - half, dim)) * std + center
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def _format_value(value):
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return repr(value)


def save_csv(path, features, labels):
    """Write label-first CSV; floats are formatted so they round-trip exactly."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, d) with one label per row")
    with open(path, "w", encoding="ascii") as fh:
        for label, row in zip(labels, features):
            fh.write(_format_value(label))
            for value in row:
                fh.write("," + _format_value(value))
            fh.write("\n")


def load_csv(path):
    """Read label-first CSV into ``(features, labels)`` float64 arrays."""
    rows = []
    labels = []
    width = None
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected a label and at least one feature")
            try:
                values = [float(part) for part in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            labels.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows), np.array(labels)


def load_idx(path):
    """Parse an idx file (00 00 <type> <ndim>, big-endian u32 dims, payload).

    Only the unsigned-byte type code 0x08 is supported; returns the raw
    uint8 array in its stored shape.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataError(f"{path}: truncated idx header")
    if data[0] != 0 or data[1] != 0:
        raise DataError(f"{path}: bad idx magic {data[:4].hex()}")
    type_code, ndim = data[2], data[3]
    if type_code != 0x08:
        raise DataError(f"{path}: unsupported idx type code 0x{type_code:02x}")
    if ndim < 1:
        raise DataError(f"{path}: idx files need at least one dimension")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DataError(f"{path}: truncated idx dimension header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    payload = data[header_end:]
    if len(payload) != count:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def load_idx_images(path):
    """Images as flattened float64 rows normalized to [0, 1], plus item shape."""
    arr = load_idx(path)
    if arr.ndim < 2:
        raise DataError(f"{path}: expected at least 2-D image data")
    n = arr.shape[0]
    return arr.reshape(n, -1).astype(np.float64) / 255.0, arr.shape[1:]


def load_idx_labels(path):
    """Label vector from a 1-D idx file."""
    arr = load_idx(path)
    if arr.ndim != 1:
        raise DataError(f"{path}: expected 1-D label data")
    return arr.astype(np.int64)
