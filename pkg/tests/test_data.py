import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlscl.config import ConfigError, reference_config
from fedlscl.data import (_pool_recipes, build_task_streams, dirichlet_split, make_dataset, make_recipes,
                          partition_classes, place_motifs, pretrain_pool, required_classes)


def test_required_class_count():
    cfg = reference_config(num_clients=3, num_tasks=2, classes_per_task=2, num_public=0)
    assert required_classes(cfg) == 12
    assert required_classes(cfg.replace(num_public=2)) == 2 + 3 * 2
    with pytest.raises(ConfigError):
        required_classes(cfg.replace(num_public=5))


def test_dataset_classes_are_distinct_and_finite():
    cfg = reference_config()
    ds = make_dataset(cfg, 18, seed=42)
    assert len(set(ds.recipes)) == 18
    assert not set(ds.recipes) & set(_pool_recipes(cfg))
    flat = ds.prototypes.reshape(18, -1)
    assert all(not np.array_equal(flat[i], flat[j]) for i in range(18) for j in range(i))
    assert np.isfinite(ds.train_x).all() and np.isfinite(ds.test_x).all()
    train_rows = {r.tobytes() for r in ds.train_x}
    assert not any(r.tobytes() in train_rows for r in ds.test_x)
    assert np.bincount(ds.train_y).tolist() == [cfg.data.train_per_class] * 18


def test_pretrain_pool_is_fixed_by_backbone_seed():
    cfg = reference_config()
    (x1, y1), (x2, y2) = pretrain_pool(cfg), pretrain_pool(cfg)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert len(np.unique(y1)) == cfg.data.pretrain_classes


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_motif_cells_stay_distinct(seed, keep):
    rng = np.random.default_rng(seed)
    layout = rng.choice(16, size=3, replace=False)
    cells = place_motifs(rng, layout, 16, keep)
    assert len(set(cells.tolist())) == 3 and cells.min() >= 0 and cells.max() < 16
    assert np.array_equal(place_motifs(rng, layout, 16, 1.0), layout)


def test_recipe_exhaustion_is_reported():
    with pytest.raises(ValueError):
        make_recipes(np.random.default_rng(0), 5, 3, 3)


@pytest.mark.parametrize("num_public", [0, 2])
@pytest.mark.parametrize("seed", [42, 1999])
def test_partition_is_disjoint(num_public, seed):
    cfg = reference_config(num_public=num_public)
    ds = make_dataset(cfg, required_classes(cfg), seed)
    part = partition_classes(cfg, ds, seed)
    flat = [c for p in part.private for c in p]
    assert len(flat) == len(set(flat)) and not set(flat) & set(part.public)
    for c in part.public:
        chunks = [part.train_samples[i][c] for i in range(cfg.num_clients)]
        joined = np.concatenate(chunks)
        assert len(joined) == len(set(joined.tolist())) == cfg.data.train_per_class
    streams = build_task_streams(cfg, part, seed)
    for i, tasks in enumerate(streams):
        assert len(tasks) == cfg.num_tasks
        seen = [c for t in tasks for c in t.classes]
        assert len(seen) == len(set(seen)) == cfg.num_tasks * cfg.classes_per_task
        assert all(len(t.classes) == cfg.classes_per_task for t in tasks)
        for t in tasks:
            # a public class may get no samples from the Dirichlet split
            assert set(ds.train_y[t.train_idx]) <= set(t.classes)


def test_partition_needs_enough_classes():
    cfg = reference_config()
    ds = make_dataset(cfg, 4, 42)
    with pytest.raises(ConfigError):
        partition_classes(cfg, ds, 42)


def test_near_uniform_dirichlet_is_balanced():
    idx = np.arange(300)
    for seed in range(10):
        parts = dirichlet_split(np.random.default_rng(seed), idx, 3, 1e6)
        sizes = np.array([len(p) for p in parts])
        assert sizes.sum() == 300
        assert np.abs(sizes - 100).max() <= 10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.05, 10.0))
def test_dirichlet_split_partitions_indices(seed, k, beta):
    idx = np.arange(50)
    parts = dirichlet_split(np.random.default_rng(seed), idx, k, beta)
    assert len(parts) == k
    assert sorted(np.concatenate(parts).tolist()) == idx.tolist()


def test_same_seed_same_streams():
    cfg = reference_config(num_public=2)
    ds = make_dataset(cfg, required_classes(cfg), 7)
    a = build_task_streams(cfg, partition_classes(cfg, ds, 7), 7)
    b = build_task_streams(cfg, partition_classes(cfg, ds, 7), 7)
    for ta, tb in zip(sum(a, []), sum(b, [])):
        assert ta.classes == tb.classes
        assert np.array_equal(ta.train_idx, tb.train_idx) and np.array_equal(ta.test_idx, tb.test_idx)
