"""Per-client protocol: collaborative training, continual fine-tuning, replay buffer, upload."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, backward, no_grad, ops
from .autodiff import blob
from .autodiff.tensor import NumericError
from .backbone import FrozenBackbone, forward_adapted
from .config import HyperParams
from .data import SyntheticDataset, TaskSpec
from .hypernet import ParameterGenerator, init_small_model
from .nn import digest, frozen_copy

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


@dataclass
class BufferEntry:
    index: int
    label: int
    score: float
    image: np.ndarray = field(repr=False)


class ReplayBuffer:
    """Class-balanced store of the M lowest-loss training samples per class."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: dict[int, list[BufferEntry]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def put(self, label: int, entries: list[BufferEntry]) -> None:
        if len(entries) > self.capacity:
            raise ValueError(f"class {label}: {len(entries)} entries exceed capacity {self.capacity}")
        self.entries[label] = list(entries)

    def items(self, classes=None) -> list[BufferEntry]:
        """Entries ordered by class id, then insertion order."""
        keep = self.classes() if classes is None else [c for c in self.classes() if c in set(classes)]
        return [e for c in keep for e in self.entries[c]]


@dataclass
class FeatureSet:
    features: np.ndarray
    client_id: int
    task_index: int

    @property
    def rows(self) -> int:
        return self.features.shape[0]


class ClientState:
    def __init__(self, client_id: int, arch: str, seed: int, dataset: SyntheticDataset, lora_size: int,
                 backbone_dim: int, hp: HyperParams, collab: bool = True):
        self.client_id = client_id
        self.arch = arch
        self.seed = seed
        self.dataset = dataset
        self.hp = hp
        self.collab = collab
        in_shape = dataset.train_x.shape[1:]
        head_in = backbone_dim if collab else hp.d_E
        self.encoder, self.generator, self.head = init_small_model(
            arch, seed, in_shape, hp.d_E, lora_size, head_in, generator_std=hp.generator_std)
        self.encoder_prev = None
        self.generator_prev: ParameterGenerator | None = None
        self.received: ParameterGenerator | None = None
        self.buffer = ReplayBuffer(hp.buffer_per_class)
        self.class_map: dict[int, int] = {}
        self.class_task: dict[int, int] = {}
        self.rng = np.random.default_rng([seed, 17])

    def begin_task(self, task: TaskSpec) -> None:
        """Extend the class map and head for the task's classes."""
        new = [c for c in task.classes if c not in self.class_map]
        for c in new:
            self.class_map[c] = len(self.class_map)
            self.class_task[c] = task.index
        if new:
            self.head.grow(len(new), self.rng)

    def trainable(self) -> list:
        params = self.encoder.parameters() + self.head.parameters()
        return params + self.generator.parameters() if self.collab else params

    def local_labels(self, labels: np.ndarray) -> np.ndarray:
        try:
            return np.array([self.class_map[int(c)] for c in labels], dtype=np.intp)
        except KeyError as exc:
            raise ProtocolError(f"client {self.client_id}: label {exc.args[0]} outside class map") from None

    def forward(self, bb: FrozenBackbone | None, x: np.ndarray):
        """Logits plus the intermediate (E, W); W is None without collaboration."""
        E = self.encoder(x)
        if not self.collab:
            return self.head(E), E, None
        W = self.generator(E)
        return self.head(forward_adapted(bb, x, W)), E, W

    def private_digest(self) -> str:
        return digest(p.data for p in self.encoder.parameters() + self.head.parameters())


def _batches(rng: np.random.Generator, n: int, size: int):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _check_loss(loss, cs: ClientState, stage: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"client {cs.client_id} {stage}: non-finite loss")
    return value


def train_stage1(cs: ClientState, bb: FrozenBackbone | None, task: TaskSpec, hp: HyperParams,
                 epochs: int | None = None) -> dict:
    """Cross-entropy through the adapter-modulated frozen backbone."""
    if len(task.train_idx) == 0:
        # possible when a Dirichlet split leaves this client no samples of its task's classes
        log.warning("client %d task %d: no local training data, stage 1 skipped", cs.client_id, task.index)
        return {"losses": [], "epoch_means": [float("nan")]}
    x_all = cs.dataset.train_x[task.train_idx]
    y_all = cs.local_labels(cs.dataset.train_y[task.train_idx])
    opt = Adam(cs.trainable(), lr=hp.lr)
    losses, epoch_means = [], []
    for _ in range(hp.stage1_epochs if epochs is None else epochs):
        batch_losses = []
        for idx in _batches(cs.rng, len(y_all), hp.batch_size):
            logits, _, _ = cs.forward(bb, x_all[idx])
            loss = ops.cross_entropy(logits, y_all[idx])
            batch_losses.append(_check_loss(loss, cs, "stage1"))
            backward(loss)
            opt.step()
        losses.extend(batch_losses)
        epoch_means.append(float(np.mean(batch_losses)))
    return {"losses": losses, "epoch_means": epoch_means}


def old_buffer_items(cs: ClientState, task_index: int) -> list[BufferEntry]:
    """Buffered samples of classes learned before ``task_index``."""
    old = [c for c, t in cs.class_task.items() if t < task_index]
    return cs.buffer.items(old)


def stage2_loss(cs: ClientState, bb: FrozenBackbone | None, x: np.ndarray, y: np.ndarray, hp: HyperParams,
                distill: bool = True):
    """Replay cross-entropy plus feature/adapter consistency against the frozen snapshots.

    Returns ``(total, ce, feature_term, adapter_term)``; the last two are floats.
    """
    logits, E, W = cs.forward(bb, x)
    ce = ops.cross_entropy(logits, y)
    if not distill:
        return ce, ce.item(), 0.0, 0.0
    with no_grad():
        E_prev = cs.encoder_prev(x)
        W_prev = cs.generator_prev(E_prev) if cs.collab else None
    per_sample = ops.sq_l2(E, E_prev) * hp.lambda_E
    feat = float(((E.data - E_prev.data) ** 2).sum(-1).mean())
    adapt = 0.0
    if W is not None:
        per_sample = per_sample + ops.sq_l2(W, W_prev) * hp.lambda_W
        adapt = float(((W.data - W_prev.data) ** 2).sum(-1).mean())
    return ce + ops.mean(per_sample), ce.item(), feat, adapt


def train_stage2(cs: ClientState, bb: FrozenBackbone | None, hp: HyperParams, task_index: int,
                 distill: bool = True, epochs: int | None = None) -> dict:
    """Continual fine-tuning on buffered samples of earlier tasks."""
    items = old_buffer_items(cs, task_index)
    if not items:
        log.info("client %d task %d: empty buffer, stage 2 skipped", cs.client_id, task_index)
        return {"skipped": True, "losses": [], "ce": [], "feature": [], "adapter": []}
    if distill and (cs.encoder_prev is None or (cs.collab and cs.generator_prev is None)):
        raise ProtocolError(f"client {cs.client_id}: stage 2 needs snapshots from the previous task")
    x_all = np.stack([e.image for e in items])
    y_all = cs.local_labels(np.array([e.label for e in items]))
    opt = Adam(cs.trainable(), lr=hp.lr)
    out = {"skipped": False, "losses": [], "ce": [], "feature": [], "adapter": []}
    for _ in range(hp.stage2_epochs if epochs is None else epochs):
        for idx in _batches(cs.rng, len(y_all), hp.batch_size):
            total, ce, feat, adapt = stage2_loss(cs, bb, x_all[idx], y_all[idx], hp, distill=distill)
            out["losses"].append(_check_loss(total, cs, "stage2"))
            out["ce"].append(ce)
            out["feature"].append(feat)
            out["adapter"].append(adapt)
            backward(total)
            opt.step()
    return out


def sample_losses(cs: ClientState, bb: FrozenBackbone | None, x: np.ndarray, labels: np.ndarray,
                  chunk: int = 64) -> np.ndarray:
    y = cs.local_labels(labels)
    out = []
    with no_grad():
        for start in range(0, len(y), chunk):
            logits, _, _ = cs.forward(bb, x[start:start + chunk])
            out.append(ops.cross_entropy(logits, y[start:start + chunk], reduction="none").data)
    return np.concatenate(out) if out else np.zeros(0)


def select_lowest(losses: np.ndarray, indices: np.ndarray, m: int) -> np.ndarray:
    """Positions of the ``m`` smallest losses; ties go to the smaller dataset index."""
    order = np.lexsort((indices, losses))
    return order[:m]


def update_buffer(cs: ClientState, bb: FrozenBackbone | None, task: TaskSpec, M: int | None = None) -> dict:
    """Re-select the M lowest-loss training samples of every class in ``task``."""
    M = cs.hp.buffer_per_class if M is None else M
    ds = cs.dataset
    counts = {}
    for c in task.classes:
        idx = task.train_idx[ds.train_y[task.train_idx] == c]
        losses = sample_losses(cs, bb, ds.train_x[idx], ds.train_y[idx])
        keep = select_lowest(losses, idx, M)
        cs.buffer.put(c, [BufferEntry(int(idx[k]), int(c), float(losses[k]), ds.train_x[idx[k]].copy())
                          for k in keep])
        counts[c] = len(keep)
    return counts


def construct_feature_set(cs: ClientState, task_index: int) -> FeatureSet:
    items = cs.buffer.items()
    if not items:
        return FeatureSet(np.zeros((0, cs.hp.d_E)), cs.client_id, task_index)
    with no_grad():
        feats = cs.encoder(np.stack([e.image for e in items])).data.copy()
    return FeatureSet(feats, cs.client_id, task_index)


def receive(cs: ClientState, generator: ParameterGenerator) -> None:
    """Install the server-returned personalized generator."""
    cs.received = ParameterGenerator.from_arrays(generator.weight.data, generator.bias.data, seed=generator.seed)
    cs.generator.load_arrays(generator.weight.data, generator.bias.data)


def snapshot_for_next_task(cs: ClientState) -> None:
    cs.encoder_prev = frozen_copy(cs.encoder)
    source = cs.received if cs.received is not None else cs.generator
    cs.generator_prev = frozen_copy(source)


def evaluate_client(cs: ClientState, bb: FrozenBackbone | None, tasks: list[TaskSpec]) -> list[dict]:
    """Per-task accuracy on held-out test splits, with per-sample prediction logs."""
    ds = cs.dataset
    inverse = {row: c for c, row in cs.class_map.items()}
    out = []
    for task in tasks:
        labels = ds.test_y[task.test_idx]
        unseen = set(int(c) for c in labels) - set(cs.class_map)
        if unseen:
            raise ProtocolError(f"client {cs.client_id}: test classes {sorted(unseen)} never trained")
        x = ds.test_x[task.test_idx]
        preds, losses = [], []
        with no_grad():
            for start in range(0, len(labels), 64):
                logits, _, _ = cs.forward(bb, x[start:start + 64])
                preds.append(logits.data.argmax(axis=1))
                losses.append(ops.cross_entropy(logits, cs.local_labels(labels[start:start + 64]),
                                                reduction="none").data)
        pred_global = np.array([inverse[int(r)] for r in np.concatenate(preds)], dtype=int) if len(labels) else \
            np.zeros(0, dtype=int)
        correct = int((pred_global == labels).sum())
        out.append({
            "task": task.index,
            "correct": correct,
            "count": int(len(labels)),
            "accuracy": correct / len(labels) if len(labels) else float("nan"),
            "loss": float(np.concatenate(losses).mean()) if losses else float("nan"),
            "predicted": pred_global.tolist(),
            "true": labels.astype(int).tolist(),
        })
    return out


# -- upload payload ---------------------------------------------------------

UPLOAD_BLOBS = ("generator.weight", "generator.bias", "feature_set")


@dataclass(frozen=True)
class Upload:
    client_id: int
    task_index: int
    generator: ParameterGenerator
    features: FeatureSet


def encode_upload(client_id: int, task_index: int, generator: ParameterGenerator, fs: FeatureSet) -> bytes:
    """JSON envelope, then the three tensor records in ``UPLOAD_BLOBS`` order."""
    envelope = {
        "client_id": int(client_id),
        "task_index": int(task_index),
        "generator_manifest": generator.manifest(),
        "feature_set_dims": [int(d) for d in fs.features.shape],
    }
    head = json.dumps(envelope, sort_keys=True).encode()
    return (struct.pack("<Q", len(head)) + head + blob.to_bytes(generator.weight)
            + blob.to_bytes(generator.bias) + blob.to_bytes(fs.features))


def decode_upload(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    (n,) = struct.unpack_from("<Q", buf, 0)
    envelope = json.loads(buf[8:8 + n])
    tensors, off = {}, 8 + n
    for name in UPLOAD_BLOBS:
        tensors[name], off = blob.from_bytes(buf, off)
    if off != len(buf):
        raise ProtocolError(f"upload has {len(buf) - off} trailing bytes")
    return envelope, tensors


def parse_upload(buf: bytes) -> Upload:
    envelope, t = decode_upload(buf)
    gen = ParameterGenerator.from_arrays(t["generator.weight"], t["generator.bias"],
                                         seed=envelope["generator_manifest"].get("seed"))
    fs = FeatureSet(t["feature_set"], envelope["client_id"], envelope["task_index"])
    return Upload(envelope["client_id"], envelope["task_index"], gen, fs)


def upload_sizes(buf: bytes) -> dict:
    envelope, t = decode_upload(buf)
    gen = sum(len(blob.to_bytes(t[k])) for k in UPLOAD_BLOBS[:2])
    feat = len(blob.to_bytes(t["feature_set"]))
    return {"generator": gen, "feature_set": feat, "envelope": len(buf) - gen - feat, "total": len(buf)}
