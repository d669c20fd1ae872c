"""Synthetic motif-set image classes and the federated class/sample partition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, FederationConfig


def make_parts(rng: np.random.Generator, num_parts: int, channels: int, size: int) -> np.ndarray:
    """Smooth random ``size``x``size`` motifs with unit peak amplitude."""
    raw = rng.normal(size=(num_parts, channels, size + 2, size + 2))
    smooth = (raw[..., 1:-1, 1:-1] + raw[..., :-2, 1:-1] + raw[..., 2:, 1:-1]
              + raw[..., 1:-1, :-2] + raw[..., 1:-1, 2:]) / 5.0
    peak = np.abs(smooth).reshape(num_parts, -1).max(axis=1)
    return smooth / peak[:, None, None, None]


def make_recipes(rng: np.random.Generator, n_classes: int, num_parts: int, per_class: int,
                 exclude: set[tuple[int, ...]] = frozenset()) -> list[tuple[int, ...]]:
    """Distinct motif sets, one per class, avoiding any set in ``exclude``."""
    seen = set(exclude)
    out = []
    for _ in range(100 * n_classes + 100):
        if len(out) == n_classes:
            return out
        recipe = tuple(sorted(int(k) for k in rng.choice(num_parts, size=per_class, replace=False)))
        if recipe not in seen:
            seen.add(recipe)
            out.append(recipe)
    raise ValueError(f"cannot draw {n_classes} distinct motif sets from {num_parts} motifs")


def render(parts: np.ndarray, recipe: tuple[int, ...], image_size: int, cells: np.ndarray | None = None,
           gains: np.ndarray | None = None) -> np.ndarray:
    """Place each motif of ``recipe`` on a grid cell (default: the first cells in order)."""
    _, c, p, _ = parts.shape
    g = image_size // p
    cells = np.arange(len(recipe)) if cells is None else cells
    gains = np.ones(len(recipe)) if gains is None else gains
    img = np.zeros((c, image_size, image_size))
    for k, cell, a in zip(recipe, cells, gains):
        i, j = divmod(int(cell), g)
        img[:, i * p:(i + 1) * p, j * p:(j + 1) * p] += a * parts[k]
    return img


def place_motifs(rng: np.random.Generator, layout: np.ndarray, g2: int, keep: float) -> np.ndarray:
    """Each motif keeps its layout cell with probability ``keep``; the rest move to random free cells."""
    cells = np.array(layout)
    moved = rng.random(len(cells)) >= keep
    if moved.any():
        free = np.setdiff1d(np.arange(g2), cells[~moved])
        cells[moved] = rng.choice(free, size=int(moved.sum()), replace=False)
    return cells


def sample_class(rng: np.random.Generator, parts: np.ndarray, recipe: tuple[int, ...], n: int, image_size: int,
                 noise: float, layout: np.ndarray | None = None, keep: float = 0.0) -> np.ndarray:
    """Motifs with a random gain on distinct cells, plus white noise.

    Without a ``layout`` every cell is random; with one, each motif stays on
    its layout cell with probability ``keep``.
    """
    g2 = (image_size // parts.shape[-1]) ** 2
    layout = np.arange(len(recipe)) if layout is None else np.asarray(layout)
    out = np.empty((n, parts.shape[1], image_size, image_size))
    for s in range(n):
        cells = place_motifs(rng, layout, g2, keep)
        out[s] = render(parts, recipe, image_size, cells, rng.uniform(0.8, 1.2, len(recipe)))
    return out + noise * rng.normal(size=out.shape)


@dataclass
class SyntheticDataset:
    """Client-class samples. ``prototypes`` is each class's canonical (unshifted) rendering."""

    recipes: list[tuple[int, ...]]
    layouts: np.ndarray
    prototypes: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    noise: float
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.prototypes)

    def class_train_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.train_y == c)

    def class_test_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.test_y == c)


def world_parts(cfg: FederationConfig) -> np.ndarray:
    """Motif bank shared by the pretraining pool and every client class."""
    rng = np.random.default_rng([cfg.data.backbone_seed, 7])
    return make_parts(rng, cfg.data.num_parts, cfg.backbone.channels, cfg.backbone.patch_size)


def _pool_recipes(cfg: FederationConfig) -> list[tuple[int, ...]]:
    rng = np.random.default_rng([cfg.data.backbone_seed, 11])
    return make_recipes(rng, cfg.data.pretrain_classes, cfg.data.num_parts, cfg.data.motifs_per_class)


def pretrain_pool(cfg: FederationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Held-out classes used only to warm up the frozen backbone."""
    rng = np.random.default_rng([cfg.data.backbone_seed, 13])
    parts, d = world_parts(cfg), cfg.data
    xs = [sample_class(rng, parts, r, d.pretrain_per_class, cfg.backbone.image_size, d.noise)
          for r in _pool_recipes(cfg)]
    ys = [np.full(d.pretrain_per_class, c) for c in range(len(xs))]
    return np.concatenate(xs), np.concatenate(ys)


def make_dataset(cfg: FederationConfig, n_classes: int, seed: int) -> SyntheticDataset:
    """Client classes: motif sets disjoint from the pretraining pool's, each with a preferred layout."""
    rng = np.random.default_rng([seed, 3])
    parts, d, size = world_parts(cfg), cfg.data, cfg.backbone.image_size
    g2 = (size // cfg.backbone.patch_size) ** 2
    recipes = make_recipes(rng, n_classes, d.num_parts, d.motifs_per_class, exclude=set(_pool_recipes(cfg)))
    layouts = np.stack([rng.choice(g2, size=d.motifs_per_class, replace=False) for _ in recipes])
    train = [sample_class(rng, parts, r, d.train_per_class, size, d.noise, lay, d.layout_prob)
             for r, lay in zip(recipes, layouts)]
    test = [sample_class(rng, parts, r, d.test_per_class, size, d.noise, lay, d.layout_prob)
            for r, lay in zip(recipes, layouts)]
    return SyntheticDataset(
        recipes=recipes,
        layouts=layouts,
        prototypes=np.stack([render(parts, r, size, lay) for r, lay in zip(recipes, layouts)]),
        train_x=np.concatenate(train),
        train_y=np.repeat(np.arange(n_classes), d.train_per_class),
        test_x=np.concatenate(test),
        test_y=np.repeat(np.arange(n_classes), d.test_per_class),
        noise=d.noise,
        seed=seed,
    )


@dataclass
class ClassPartition:
    private: list[list[int]]
    public: list[int]
    beta: float
    # client -> class -> sample indices (train / test)
    train_samples: list[dict[int, np.ndarray]] = field(default_factory=list)
    test_samples: list[dict[int, np.ndarray]] = field(default_factory=list)


@dataclass(frozen=True)
class TaskSpec:
    client_id: int
    index: int
    classes: tuple[int, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray


def required_classes(cfg: FederationConfig) -> int:
    per_client = cfg.num_tasks * cfg.classes_per_task
    if cfg.num_public > per_client:
        raise ConfigError(
            f"num_public={cfg.num_public} exceeds the {per_client} classes each client handles")
    return cfg.num_public + cfg.num_clients * (per_client - cfg.num_public)


def dirichlet_split(rng: np.random.Generator, indices: np.ndarray, k: int, beta: float) -> list[np.ndarray]:
    """Disjoint split of ``indices`` into ``k`` parts with Dirichlet(beta) shares."""
    shares = rng.dirichlet(np.full(k, beta))
    idx = rng.permutation(indices)
    cuts = (np.cumsum(shares)[:-1] * len(idx)).round().astype(int)
    return [np.sort(part) for part in np.split(idx, cuts)]


def partition_classes(cfg: FederationConfig, ds: SyntheticDataset, seed: int) -> ClassPartition:
    need = required_classes(cfg)
    if ds.num_classes < need:
        raise ConfigError(f"partition needs {need} classes, dataset has {ds.num_classes}")
    rng = np.random.default_rng([seed, 5])
    order = rng.permutation(need)
    public = sorted(int(c) for c in order[:cfg.num_public])
    n_priv = cfg.num_tasks * cfg.classes_per_task - cfg.num_public
    private = [sorted(int(c) for c in order[cfg.num_public + i * n_priv: cfg.num_public + (i + 1) * n_priv])
               for i in range(cfg.num_clients)]
    part = ClassPartition(private=private, public=public, beta=cfg.dirichlet_beta)
    part.train_samples = [{} for _ in range(cfg.num_clients)]
    part.test_samples = [{} for _ in range(cfg.num_clients)]
    for i, classes in enumerate(private):
        for c in classes:
            part.train_samples[i][c] = ds.class_train_indices(c)
            part.test_samples[i][c] = ds.class_test_indices(c)
    for c in public:
        for store, source in ((part.train_samples, ds.class_train_indices(c)),
                              (part.test_samples, ds.class_test_indices(c))):
            for i, chunk in enumerate(dirichlet_split(rng, source, cfg.num_clients, cfg.dirichlet_beta)):
                store[i][c] = chunk
    return part


def build_task_streams(cfg: FederationConfig, part: ClassPartition, seed: int) -> list[list[TaskSpec]]:
    rng = np.random.default_rng([seed, 9])
    streams = []
    for i in range(cfg.num_clients):
        classes = [int(c) for c in rng.permutation(part.private[i] + part.public)]
        tasks = []
        for n in range(cfg.num_tasks):
            chunk = tuple(sorted(classes[n * cfg.classes_per_task:(n + 1) * cfg.classes_per_task]))
            tasks.append(TaskSpec(
                client_id=i,
                index=n + 1,
                classes=chunk,
                train_idx=np.concatenate([part.train_samples[i][c] for c in chunk]),
                test_idx=np.concatenate([part.test_samples[i][c] for c in chunk]),
            ))
        streams.append(tasks)
    return streams
