"""Binary model serialization.

Layout (all integers little-endian unsigned 32-bit unless noted):

    magic   4 bytes  b"RGPM"
    version u32      currently 1
    n       u32      number of layers
    then per layer a kind tag (u32):
      1 = linear: p u32, d u32, weight p*d float64 row-major, bias p float64
      2 = conv:   p u32, d u32, k u32, stride u32, padding u32,
                  kernel p*d*k*k float64 row-major, bias p float64
      3 = relu:    no payload
      4 = flatten: no payload
"""

import struct

import numpy as np

from .errors import DataError
from .nn import ConvLayer, FlattenLayer, LinearLayer, Network, ReluLayer

MAGIC = b"RGPM"
VERSION = 1
_LINEAR, _CONV, _RELU, _FLATTEN = 1, 2, 3, 4

__all__ = ["save_model", "load_model", "MAGIC", "VERSION"]


def _array_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_model(path, net):
    """Write a network to ``path``; byte-identical for identical weights."""
    chunks = [struct.pack("<4sII", MAGIC, VERSION, len(net.layers))]
    for layer in net.layers:
        if isinstance(layer, LinearLayer):
            p, d = layer.weight.shape
            chunks.append(struct.pack("<III", _LINEAR, p, d))
            chunks.append(_array_bytes(layer.weight))
            chunks.append(_array_bytes(layer.bias))
        elif isinstance(layer, ConvLayer):
            p, d, k, _ = layer.kernel.shape
            chunks.append(struct.pack("<IIIIII", _CONV, p, d, k,
                                      layer.stride, layer.padding))
            chunks.append(_array_bytes(layer.kernel))
            chunks.append(_array_bytes(layer.bias))
        elif isinstance(layer, ReluLayer):
            chunks.append(struct.pack("<I", _RELU))
        elif isinstance(layer, FlattenLayer):
            chunks.append(struct.pack("<I", _FLATTEN))
        else:
            raise ValueError(f"cannot serialize layer type {type(layer).__name__}")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DataError(f"{self.path}: truncated model file")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def floats(self, count):
        size = 8 * count
        if self.pos + size > len(self.data):
            raise DataError(f"{self.path}: truncated model file")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos)
        self.pos += size
        return arr.astype(np.float64)


def load_model(path):
    """Read a network written by :func:`save_model`."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    magic, version, n_layers = reader.take("<4sII")
    if magic != MAGIC:
        raise DataError(f"{path}: not a model file (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    layers = []
    for _ in range(n_layers):
        (kind,) = reader.take("<I")
        if kind == _LINEAR:
            p, d = reader.take("<II")
            weight = reader.floats(p * d).reshape(p, d)
            bias = reader.floats(p)
            layers.append(LinearLayer(weight, bias))
        elif kind == _CONV:
            p, d, k, stride, padding = reader.take("<IIIII")
            kernel = reader.floats(p * d * k * k).reshape(p, d, k, k)
            bias = reader.floats(p)
            layers.append(ConvLayer(kernel, bias, stride=stride, padding=padding))
        elif kind == _RELU:
            layers.append(ReluLayer())
        elif kind == _FLATTEN:
            layers.append(FlattenLayer())
        else:
            raise DataError(f"{path}: unknown layer kind {kind}")
    if reader.pos != len(reader.data):
        raise DataError(f"{path}: trailing bytes after the last layer")
    return Network(layers)
