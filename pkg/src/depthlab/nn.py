"""Parameters, layer modules and checkpoint serialisation."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, matmul

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DLCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class Parameter(Tensor):
    """A trainable leaf tensor. Its name is the attribute path inside the owning module."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
        self.name = name


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype).copy()
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {buf.shape}")
            buf[...] = value
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.tracked = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_parameters(model: Module) -> int:
    """Trainable element count; batch-norm running statistics are not included."""
    return int(sum(p.size for p in model.parameters()))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        # He-normal for ReLU stacks
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.running_var = np.ones(channels, dtype=get_default_dtype())
        self.momentum = momentum
        self.eps = eps
        self.tracked = False

    def forward(self, x: Tensor) -> Tensor:
        if not self.training and not self.tracked:
            logger.warning("batch_norm in eval mode before any statistics were recorded; using mean 0, var 1")
            self.tracked = True
        if self.training:
            self.tracked = True
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 init_scale: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = init_scale / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class ConvBlock(Module):
    """3x3 conv, batch norm, ReLU. The conv has no bias: batch norm would cancel it."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, rng=None):
        self.conv = Conv2d(in_channels, out_channels, 3, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).relu()


# -- checkpoints ------------------------------------------------------------

def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Binary layout: magic, u32 header length, JSON header, float32 little-endian payload."""
    names = sorted(arrays)
    entries, offset = [], 0
    for name in names:
        arr = np.asarray(arrays[name])
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"format_version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes() for n in names)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + payload


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a depthlab checkpoint (bad magic)")
    start = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack("<I", raw[start : start + 4])
    header = json.loads(raw[start + 4 : start + 4 + length].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = np.frombuffer(raw[start + 4 + length :], dtype="<f4")
    arrays = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = payload[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(arrays, meta))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
