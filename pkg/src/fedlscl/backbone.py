"""Toy frozen vision transformer with per-sample low-rank adapters on one block."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, backward, no_grad, ops
from .autodiff import blob
from .autodiff.tensor import ShapeError, as_tensor
from .nn import Linear, digest


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 2
    mlp_ratio: int = 2
    adapted_block: int = 3
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0 <= self.adapted_block < self.num_blocks:
            raise ValueError(f"adapted_block must lie in [0, {self.num_blocks})")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim,
               self.num_heads, self.mlp_ratio, self.lora_rank) < 1:
            raise ValueError("backbone dimensions must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    @property
    def lora_size(self) -> int:
        # A_q, B_q, A_v, B_v
        return 2 * 2 * self.lora_rank * self.embed_dim

    def param_count(self) -> int:
        d, h = self.embed_dim, self.mlp_ratio * self.embed_dim
        block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
        return (self.patch_dim * d + d) + d + self.num_tokens * d + self.num_blocks * block + 2 * d


def _weight_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    shapes = {
        "patch.weight": (cfg.patch_dim, d),
        "patch.bias": (d,),
        "cls": (d,),
        "pos": (cfg.num_tokens, d),
    }
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "q.weight": (d, d), p + "q.bias": (d,),
            p + "k.weight": (d, d), p + "k.bias": (d,),
            p + "v.weight": (d, d), p + "v.bias": (d,),
            p + "o.weight": (d, d), p + "o.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "fc1.weight": (d, h), p + "fc1.bias": (h,),
            p + "fc2.weight": (h, d), p + "fc2.bias": (d,),
        })
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def _init_weights(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in _weight_shapes(cfg).items():
        if name.endswith(".gain"):
            out[name] = np.ones(shape)
        elif name.endswith(".bias"):
            out[name] = np.zeros(shape)
        elif name in ("cls", "pos"):
            out[name] = rng.normal(0.0, 0.02, shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return out


class FrozenBackbone:
    """Read-only transformer weights. Arrays are flagged non-writeable."""

    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray]):
        expected = _weight_shapes(config)
        if set(weights) != set(expected):
            raise ValueError("weight names do not match the backbone config")
        self.config = config
        self.weights: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.array(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"backbone weight {name}", arr.shape, shape)
            arr.flags.writeable = False
            self.weights[name] = Tensor.__new__(Tensor)
            t = self.weights[name]
            t.data, t.grad, t.requires_grad, t.is_leaf, t.name = arr, None, False, True, name

    def num_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    def checksum(self) -> str:
        return digest(self.weights[n].data for n in sorted(self.weights))

    def save(self, path: str | Path) -> None:
        manifest = {
            "config": asdict(self.config),
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in self.weights.items()],
        }
        head = json.dumps(manifest).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for t in self.weights.values():
                blob.save(t, fh)

    @classmethod
    def load(cls, path: str | Path) -> "FrozenBackbone":
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            manifest = json.loads(fh.read(n))
            weights = {entry["name"]: blob.load(fh) for entry in manifest["tensors"]}
        return cls(BackboneConfig(**manifest["config"]), weights)


def patchify(cfg: BackboneConfig, x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) images to (B, num_patches, patch_dim)."""
    x = np.asarray(x, dtype=np.float64)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError("backbone input", x.shape, (-1,) + want)
    b, p, g = x.shape[0], cfg.patch_size, cfg.image_size // cfg.patch_size
    x = x.reshape(b, cfg.channels, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, cfg.patch_dim)


def split_lora(cfg: BackboneConfig, W: Tensor) -> dict[str, Tensor]:
    """(B, lora_size) flat adapters to per-sample factor matrices."""
    r, d = cfg.lora_rank, cfg.embed_dim
    if W.ndim != 2 or W.shape[1] != cfg.lora_size:
        raise ShapeError("lora params", W.shape, (-1, cfg.lora_size))
    n = W.shape[0]
    size = r * d
    return {
        "A_q": ops.reshape(W[:, 0:size], (n, r, d)),
        "B_q": ops.reshape(W[:, size:2 * size], (n, d, r)),
        "A_v": ops.reshape(W[:, 2 * size:3 * size], (n, r, d)),
        "B_v": ops.reshape(W[:, 3 * size:4 * size], (n, d, r)),
    }


def adapter_delta(cfg: BackboneConfig, W: np.ndarray, proj: str = "q") -> np.ndarray:
    """Dense (d, d) weight update for one sample's flat adapter, in ``x @ delta`` form."""
    parts = split_lora(cfg, Tensor(np.asarray(W).reshape(1, -1)))
    A, B = parts[f"A_{proj}"].data[0], parts[f"B_{proj}"].data[0]
    return cfg.lora_scale * (B @ A).T


def _attention(cfg: BackboneConfig, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    n, t, d = q.shape
    h = cfg.num_heads
    dh = d // h

    def heads(z):
        return ops.transpose(ops.reshape(z, (n, t, h, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ops.matmul(qh, ops.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    ctx = ops.matmul(ops.softmax(scores), vh)
    return ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, t, d))


def _block(cfg: BackboneConfig, w: dict[str, Tensor], b: int, x: Tensor, lora: dict | None) -> Tensor:
    p = f"blocks.{b}."
    xn = ops.layernorm(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
    q = ops.matmul(xn, w[p + "q.weight"]) + w[p + "q.bias"]
    k = ops.matmul(xn, w[p + "k.weight"]) + w[p + "k.bias"]
    v = ops.matmul(xn, w[p + "v.weight"]) + w[p + "v.bias"]
    if lora is not None:
        s = cfg.lora_scale
        q = q + ops.bmm(ops.bmm(xn, ops.swapaxes(lora["A_q"], -1, -2)), ops.swapaxes(lora["B_q"], -1, -2)) * s
        v = v + ops.bmm(ops.bmm(xn, ops.swapaxes(lora["A_v"], -1, -2)), ops.swapaxes(lora["B_v"], -1, -2)) * s
    att = ops.matmul(_attention(cfg, q, k, v), w[p + "o.weight"]) + w[p + "o.bias"]
    x = x + att
    xn = ops.layernorm(x, w[p + "ln2.gain"], w[p + "ln2.bias"])
    hidden = ops.gelu(ops.matmul(xn, w[p + "fc1.weight"]) + w[p + "fc1.bias"])
    return x + ops.matmul(hidden, w[p + "fc2.weight"]) + w[p + "fc2.bias"]


def _forward(cfg: BackboneConfig, w: dict[str, Tensor], x: np.ndarray, W: Tensor | None) -> Tensor:
    patches = Tensor(patchify(cfg, x))
    n = patches.shape[0]
    lora = None
    if W is not None:
        if W.shape[0] != n:
            raise ShapeError("lora batch", W.shape, (n, cfg.lora_size))
        lora = split_lora(cfg, W)
    tokens = ops.matmul(patches, w["patch.weight"]) + w["patch.bias"]
    cls = ops.reshape(w["cls"], (1, 1, cfg.embed_dim))
    cls = ops.concat([cls] * n, axis=0) if n > 1 else cls
    h = ops.concat([cls, tokens], axis=1) + w["pos"]
    for b in range(cfg.num_blocks):
        h = _block(cfg, w, b, h, lora if b == cfg.adapted_block else None)
    h = ops.layernorm(h, w["norm.gain"], w["norm.bias"])
    return h[:, 0, :]


def forward_frozen(bb: FrozenBackbone, x: np.ndarray) -> Tensor:
    """Class-token features (B, d) with no adapter."""
    return _forward(bb.config, bb.weights, x, None)


def forward_adapted(bb: FrozenBackbone, x: np.ndarray, W: Tensor) -> Tensor:
    """Batched adapted forward: sample ``i`` uses adapter row ``W[i]``."""
    return _forward(bb.config, bb.weights, x, as_tensor(W))


def forward_with_adapter(bb: FrozenBackbone, x: np.ndarray, W: Tensor) -> Tensor:
    """Single image (C, H, W) with one flat adapter vector; returns a (d,) feature."""
    W = as_tensor(W)
    if W.shape != (bb.config.lora_size,):
        raise ShapeError("forward_with_adapter", W.shape, (bb.config.lora_size,))
    out = forward_adapted(bb, np.asarray(x)[None], ops.reshape(W, (1, -1)))
    return ops.reshape(out, (bb.config.embed_dim,))


def build_frozen_backbone(config: BackboneConfig, seed: int, pretrain: tuple[np.ndarray, np.ndarray] | None = None,
                          steps: int = 300, batch_size: int = 32, lr: float = 3e-3) -> FrozenBackbone:
    """Seeded init, optionally followed by a short supervised warm-up on ``pretrain``
    (images, labels) drawn from classes no client ever sees. The result is frozen."""
    rng = np.random.default_rng(seed)
    weights = _init_weights(config, rng)
    if pretrain is not None and steps > 0:
        weights = _pretrain(config, weights, pretrain, rng, steps, batch_size, lr)
    return FrozenBackbone(config, weights)


def _pretrain(cfg, weights, data, rng, steps, batch_size, lr):
    images, labels = data
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1
    w = {k: Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
    head = Linear(cfg.embed_dim, n_classes, rng, name="pretrain_head")
    opt = Adam(list(w.values()) + head.parameters(), lr=lr)
    for _ in range(steps):
        idx = rng.choice(len(labels), size=min(batch_size, len(labels)), replace=False)
        loss = ops.cross_entropy(head(_forward(cfg, w, images[idx], None)), labels[idx])
        backward(loss)
        opt.step()
    return {k: t.data.copy() for k, t in w.items()}


def pretrain_accuracy(bb: FrozenBackbone, images: np.ndarray, labels: np.ndarray) -> float:
    """Nearest-class-mean accuracy on frozen features; a cheap quality probe."""
    with no_grad():
        feats = forward_frozen(bb, images).data
    classes = np.unique(labels)
    means = np.stack([feats[labels == c].mean(0) for c in classes])
    pred = classes[np.argmin(((feats[:, None, :] - means[None]) ** 2).sum(-1), axis=1)]
    return float((pred == labels).mean())
