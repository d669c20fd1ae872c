"""Client-side small model: encoder, adapter generator and classification head."""
from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor, ops
from .autodiff import blob
from .autodiff.tensor import ShapeError, as_tensor
from .nn import Linear

ARCHS = ("mlp", "tinyconv")


def unit_features(e: Tensor) -> Tensor:
    """Parameter-free layer norm scaled so every feature row has unit L2 norm.

    Keeps the generator's input on a fixed scale, so adapter magnitudes
    cannot grow just because the encoder's output does.
    """
    d = e.shape[-1]
    return ops.mul(ops.layernorm(e, Tensor(np.ones(d)), Tensor(np.zeros(d))), 1.0 / np.sqrt(d))


class MLPEncoder:
    arch = "mlp"

    def __init__(self, in_shape: tuple[int, int, int], d_E: int, rng: np.random.Generator, hidden: int = 128):
        self.in_shape = tuple(in_shape)
        n_in = int(np.prod(in_shape))
        self.fc1 = Linear(n_in, hidden, rng, name="enc.fc1")
        self.proj = Linear(hidden, d_E, rng, name="enc.proj")
        self.d_E = d_E

    def __call__(self, x: np.ndarray) -> Tensor:
        x = _check_images(self.in_shape, x)
        flat = Tensor(x.reshape(x.shape[0], -1))
        return unit_features(self.proj(ops.relu(self.fc1(flat))))

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.proj.parameters()


def _conv_index(size: int, k: int, stride: int) -> tuple[np.ndarray, int]:
    """Flat pixel indices of every k*k window of a size*size grid (valid padding)."""
    out = (size - k) // stride + 1
    rows = []
    for i in range(out):
        for j in range(out):
            r, c = i * stride, j * stride
            rows.append([(r + a) * size + (c + b) for a in range(k) for b in range(k)])
    return np.asarray(rows, dtype=np.intp), out


class TinyConvEncoder:
    """Two strided 3x3 convolutions (im2col via row gather) and a projection."""

    arch = "tinyconv"

    def __init__(self, in_shape: tuple[int, int, int], d_E: int, rng: np.random.Generator,
                 channels: tuple[int, int] = (8, 16)):
        self.in_shape = tuple(in_shape)
        c0, size, _ = in_shape
        c1, c2 = channels
        self.idx1, s1 = _conv_index(size, 3, 2)
        self.idx2, s2 = _conv_index(s1, 3, 2)
        self.s1 = s1
        self.conv1 = Linear(c0 * 9, c1, rng, name="enc.conv1")
        self.conv2 = Linear(c1 * 9, c2, rng, name="enc.conv2")
        self.proj = Linear(c2 * s2 * s2, d_E, rng, name="enc.proj")
        self.d_E = d_E

    def __call__(self, x: np.ndarray) -> Tensor:
        x = _check_images(self.in_shape, x)
        n, c = x.shape[:2]
        cols = x.reshape(n, c, -1)[:, :, self.idx1]                          # (n, c, P1, 9)
        cols = Tensor(cols.transpose(0, 2, 1, 3).reshape(n, len(self.idx1), c * 9))
        h = ops.relu(self.conv1(cols))                                      # (n, P1, c1)
        c1 = h.shape[-1]
        h = ops.take(ops.transpose(h, (0, 2, 1)), self.idx2, axis=2)        # (n, c1, P2, 9)
        h = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (n, len(self.idx2), c1 * 9))
        h = ops.relu(self.conv2(h))                                         # (n, P2, c2)
        return unit_features(self.proj(ops.reshape(h, (n, -1))))

    def parameters(self) -> list[Tensor]:
        return self.conv1.parameters() + self.conv2.parameters() + self.proj.parameters()


def _check_images(in_shape, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(in_shape):
        raise ShapeError("encode", x.shape, (-1,) + tuple(in_shape))
    return x


class ParameterGenerator:
    """Affine map from encoder features to flat low-rank adapter parameters."""

    def __init__(self, d_E: int, out_size: int, rng: np.random.Generator | None = None,
                 std: float = 1e-3, seed: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.seed = seed
        self.linear = Linear(d_E, out_size, rng, std=std, name="generator")

    @property
    def d_E(self) -> int:
        return self.linear.n_in

    @property
    def out_size(self) -> int:
        return self.linear.n_out

    @property
    def weight(self) -> Tensor:
        return self.linear.weight

    @property
    def bias(self) -> Tensor:
        return self.linear.bias

    def __call__(self, E) -> Tensor:
        E = as_tensor(E)
        if E.shape[-1] != self.d_E:
            raise ShapeError("generate_params", E.shape, (self.d_E,))
        return self.linear(E)

    def parameters(self) -> list[Tensor]:
        return self.linear.parameters()

    def apply_np(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.weight.data + self.bias.data

    def load_arrays(self, weight: np.ndarray, bias: np.ndarray) -> None:
        if weight.shape != self.weight.shape or bias.shape != self.bias.shape:
            raise ShapeError("generator load", weight.shape, self.weight.shape)
        self.weight.data = np.array(weight, dtype=np.float64)
        self.bias.data = np.array(bias, dtype=np.float64)
        self.weight.grad = self.bias.grad = None

    @classmethod
    def from_arrays(cls, weight: np.ndarray, bias: np.ndarray, seed: int | None = None) -> "ParameterGenerator":
        gen = cls(weight.shape[0], weight.shape[1], rng=np.random.default_rng(0), std=0.0, seed=seed)
        gen.load_arrays(weight, bias)
        return gen

    def manifest(self) -> dict:
        return {"d_E": self.d_E, "W_size": self.out_size, "seed": self.seed}

    def to_bytes(self) -> bytes:
        """Manifest header followed by the weight and bias records."""
        head = json.dumps(self.manifest(), sort_keys=True).encode()
        return struct.pack("<Q", len(head)) + head + blob.to_bytes(self.weight) + blob.to_bytes(self.bias)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParameterGenerator":
        (n,) = struct.unpack_from("<Q", buf, 0)
        manifest = json.loads(buf[8:8 + n])
        weight, off = blob.from_bytes(buf, 8 + n)
        bias, _ = blob.from_bytes(buf, off)
        return cls.from_arrays(weight, bias, seed=manifest.get("seed"))


class ClassifierHead:
    """Linear head whose output rows grow as new classes arrive."""

    def __init__(self, n_in: int, rng: np.random.Generator, n_classes: int = 0):
        self.n_in = n_in
        self.weight = Tensor(np.zeros((n_in, 0)), requires_grad=True, name="head.weight")
        self.bias = Tensor(np.zeros(0), requires_grad=True, name="head.bias")
        if n_classes:
            self.grow(n_classes, rng)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def grow(self, n_new: int, rng: np.random.Generator) -> None:
        w_new = rng.normal(0.0, 1.0 / np.sqrt(self.n_in), (self.n_in, n_new))
        self.weight.data = np.concatenate([self.weight.data, w_new], axis=1)
        self.bias.data = np.concatenate([self.bias.data, np.zeros(n_new)])
        self.weight.grad = self.bias.grad = None

    def __call__(self, f) -> Tensor:
        return ops.matmul(as_tensor(f), self.weight) + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def make_encoder(arch: str, in_shape, d_E: int, rng: np.random.Generator):
    if arch == "mlp":
        return MLPEncoder(in_shape, d_E, rng)
    if arch == "tinyconv":
        return TinyConvEncoder(in_shape, d_E, rng)
    raise ValueError(f"unknown encoder architecture {arch!r}; expected one of {ARCHS}")


def init_small_model(arch: str, seed: int, in_shape, d_E: int, lora_size: int, head_in: int,
                     generator_std: float = 1e-3):
    """Fresh (encoder, generator, head) triple; the head starts with no classes."""
    if arch not in ARCHS:
        raise ValueError(f"unknown encoder architecture {arch!r}; expected one of {ARCHS}")
    rng = np.random.default_rng(seed)
    encoder = make_encoder(arch, in_shape, d_E, rng)
    generator = ParameterGenerator(d_E, lora_size, rng=rng, std=generator_std, seed=seed)
    head = ClassifierHead(head_in, rng)
    return encoder, generator, head


def encode(encoder, x: np.ndarray) -> Tensor:
    return encoder(x)


def generate_params(generator: ParameterGenerator, E) -> Tensor:
    return generator(E)
