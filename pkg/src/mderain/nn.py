"""Parameters, layers, the Adam optimizer and the checkpoint container."""

import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from mderain import tensor as T
from mderain.tensor import Tensor

CHECKPOINT_MAGIC = b"MDRN"
CHECKPOINT_VERSION = 1


class Param(Tensor):
    """A learnable leaf tensor with a stable name used for checkpointing."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data), requires_grad=True, name=name)


class Module:
    """Container that discovers Params and sub-Modules from its attributes."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _walk(value, name):
    if isinstance(value, Param):
        value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def uniform_fan_in(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel=3, stride=1, dilation=1, padding=0, bias=True):
        fan_in = kernel * kernel * cin
        self.weight = Param(uniform_fan_in(rng, (kernel, kernel, cin, cout), fan_in))
        self.bias = Param(uniform_fan_in(rng, (cout,), fan_in)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class Linear(Module):
    def __init__(self, rng, din, dout, bias=True):
        self.weight = Param(uniform_fan_in(rng, (din, dout), din))
        self.bias = Param(uniform_fan_in(rng, (dout,), din)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Param(np.ones(dim, dtype=np.float32))
        self.bias = Param(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


# ---------------------------------------------------------------- optimisation


def step_lr(base_lr, epoch, every=45, gamma=0.5):
    """Learning rate for a 0-based epoch under step decay."""
    return base_lr * gamma ** (epoch // every)


class Adam:
    def __init__(self, params, lr=4e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def state(self):
        out = {"t": self.t}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state(self, state):
        self.t = int(state["t"])
        for i, p in enumerate(self.params):
            self.m[i] = np.asarray(state[f"adam.m.{p.name}"], dtype=p.dtype).copy()
            self.v[i] = np.asarray(state[f"adam.v.{p.name}"], dtype=p.dtype).copy()


# ---------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config, arrays, meta=None):
    """Write ``arrays`` (name -> array) as little-endian float32 records.

    Layout: b"MDRN", u32 version, u32 header length, UTF-8 JSON header
    ({"config": ..., "meta": ..., "count": n}), then per record: u16 name
    length, name, u8 ndim, u32 dims, float32 payload.
    """
    header = json.dumps({"config": config, "meta": meta or {}, "count": len(arrays)}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(config, arrays, meta)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an MDRN checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(data[pos : pos + hlen].decode())
    pos += hlen
    arrays = {}
    for _ in range(header["count"]):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after {header['count']} records")
    return header["config"], arrays, header["meta"]
