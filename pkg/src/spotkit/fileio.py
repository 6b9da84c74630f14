"""Binary containers for datasets and model checkpoints.

All integers and floats are little-endian; every file ends with a 64-bit
FNV-1a checksum of all preceding bytes. Arrays are float64 in memory and
float32 on disk.

Dataset (``SPOTDS01``)::

    magic[8] u32 count
    count x { u32 H, u32 W, f32[H*W] image, u32 n, n x f32[4] (cx, cy, amp, sigma) }
    u64 checksum

Checkpoint (``SPOTNN01``)::

    magic[8] u8 arch (1 spotnet, 2 convnet) u32 layers
    spotnet layer: u32 kh, u32 kw, f32[kh*kw] C, f32[kh*kw] S, f32 theta
    convnet layer: u32 kh, u32 kw, u32 c_out, f32[c_out*c_in*kh*kw] w, f32[c_out] b
    u64 checksum

A convnet layer's ``c_in`` is 1 for the first layer and the previous
layer's ``c_out`` afterwards.
"""

import struct
from pathlib import Path

import numpy as np

from .convnet import ConvNetModel
from .errors import CorruptionError, FormatError, InvalidArgumentError
from .spotnet import SpotNetModel
from .synth import Dataset

DATASET_MAGIC = b"SPOTDS01"
CHECKPOINT_MAGIC = b"SPOTNN01"
ARCH_TAGS = {"spotnet": 1, "convnet": 2}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data):
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at byte offset {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def _seal(body):
    return body + struct.pack("<Q", fnv1a64(body))


def _open(data, magic, what):
    if len(data) < len(magic) + 8:
        raise FormatError(f"{what}: file too short ({len(data)} bytes)")
    if data[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
    body = data[:-8]
    stored = struct.unpack("<Q", data[-8:])[0]
    actual = fnv1a64(body)
    if stored != actual:
        raise CorruptionError(f"{what}: checksum mismatch (stored {stored:#018x}, "
                              f"computed {actual:#018x})")
    reader = _Reader(body, what)
    reader.take(len(magic))
    return reader


def _finish(reader):
    if reader.pos != len(reader.buf):
        raise FormatError(f"{reader.what}: {len(reader.buf) - reader.pos} unexpected bytes "
                          f"at byte offset {reader.pos}")


# -- datasets ---------------------------------------------------------------

def dataset_bytes(dataset):
    parts = [DATASET_MAGIC, struct.pack("<I", len(dataset))]
    for img, spots in zip(dataset.images, dataset.spots):
        img = np.asarray(img)
        if img.ndim != 2 or min(img.shape) < 8:
            raise InvalidArgumentError(f"images must be 2-D and at least 8x8, got {img.shape}")
        spots = np.asarray(spots, dtype=np.float64).reshape(-1, 4)
        parts.append(struct.pack("<II", *img.shape))
        parts.append(_f32(img))
        parts.append(struct.pack("<I", len(spots)))
        parts.append(_f32(spots))
    return _seal(b"".join(parts))


def parse_dataset(data, what="dataset"):
    r = _open(bytes(data), DATASET_MAGIC, what)
    count = r.u32()
    images, spots = [], []
    for _ in range(count):
        h, w = r.u32(), r.u32()
        if h < 8 or w < 8:
            raise FormatError(f"{what}: image of {h}x{w} at byte offset {r.pos - 8} is below 8x8")
        images.append(r.f32(h * w).reshape(h, w))
        n = r.u32()
        spots.append(r.f32(4 * n).reshape(n, 4))
    _finish(r)
    return Dataset(images, spots)


def write_dataset(path, dataset):
    Path(path).write_bytes(dataset_bytes(dataset))


def read_dataset(path):
    return parse_dataset(Path(path).read_bytes(), what=str(path))


# -- checkpoints ------------------------------------------------------------

def checkpoint_bytes(model):
    arch = getattr(model, "arch", None)
    if arch not in ARCH_TAGS:
        raise InvalidArgumentError(f"unknown model architecture {arch!r}")
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", ARCH_TAGS[arch], model.layers)]
    if arch == "spotnet":
        for C, S, theta in zip(model.C, model.S, model.theta):
            parts.append(struct.pack("<II", *C.shape))
            parts += [_f32(C), _f32(S), _f32([theta])]
    else:
        for w, b in zip(model.weights, model.biases):
            parts.append(struct.pack("<III", w.shape[2], w.shape[3], w.shape[0]))
            parts += [_f32(w), _f32(b)]
    return _seal(b"".join(parts))


def parse_checkpoint(data, what="checkpoint"):
    r = _open(bytes(data), CHECKPOINT_MAGIC, what)
    tag = r.u8()
    layers = r.u32()
    if tag == ARCH_TAGS["spotnet"]:
        C, S, theta = [], [], []
        for _ in range(layers):
            kh, kw = r.u32(), r.u32()
            C.append(r.f32(kh * kw).reshape(kh, kw))
            S.append(r.f32(kh * kw).reshape(kh, kw))
            theta.append(r.f32(1)[0])
        _finish(r)
        try:
            return SpotNetModel(C=np.stack(C), S=np.stack(S), theta=np.array(theta))
        except (ValueError, InvalidArgumentError) as exc:
            raise FormatError(f"{what}: inconsistent spotnet layers ({exc})") from None
    if tag == ARCH_TAGS["convnet"]:
        weights, biases = [], []
        c_in = 1
        for _ in range(layers):
            kh, kw, c_out = r.u32(), r.u32(), r.u32()
            weights.append(r.f32(c_out * c_in * kh * kw).reshape(c_out, c_in, kh, kw))
            biases.append(r.f32(c_out))
            c_in = c_out
        _finish(r)
        try:
            return ConvNetModel(weights, biases)
        except InvalidArgumentError as exc:
            raise FormatError(f"{what}: inconsistent convnet layers ({exc})") from None
    raise FormatError(f"{what}: unknown architecture tag {tag}")


def write_checkpoint(path, model):
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes(), what=str(path))


def quantize(model):
    """Round every parameter to float32 so the model survives a disk round trip."""
    params = {k: np.asarray(v, dtype=np.float32).astype(np.float64)
              for k, v in model.parameters().items()}
    return model.with_parameters(params)
