"""Builds client task streams and runs the full task/round protocol."""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import client as C
from .backbone import BackboneConfig, FrozenBackbone, build_frozen_backbone
from .config import DataConfig, FederationConfig
from .data import (ClassPartition, SyntheticDataset, TaskSpec, build_task_streams, make_dataset,
                   partition_classes, pretrain_pool, required_classes)
from .metrics import (ResultBundle, aggregate_bundles, compute_accuracy_matrix, metrics_csv,
                      payload_accounting)
from .server import ServerRoundState, ablation_aggregate_uniform, run_aggregation_round

log = logging.getLogger(__name__)

ROUND_PATTERN = re.compile(r"^Stage1 (Stage2 )?UpdateBuffer ConstructFeatureSet Upload Receive$")


@dataclass
class Federation:
    config: FederationConfig
    seed: int
    dataset: SyntheticDataset
    partition: ClassPartition
    streams: list[list[TaskSpec]]
    clients: list[C.ClientState]


# data fields that never reach the warm-up pool
_CLIENT_ONLY_DATA = ("train_per_class", "test_per_class", "layout_prob")


def _cache_dir() -> Path | None:
    value = os.environ.get("FEDLSCL_CACHE", str(Path.home() / ".cache" / "fedlscl"))
    return None if value in ("", "0", "off") else Path(value)


@functools.lru_cache(maxsize=8)
def shared_backbone(backbone: BackboneConfig, data: DataConfig) -> FrozenBackbone:
    """The one frozen backbone every client (and every experiment seed) uses.

    Warm-up is deterministic, so the checkpoint is cached on disk under
    ``$FEDLSCL_CACHE`` (set it to ``off`` to disable).
    """
    warmup = {k: v for k, v in asdict(data).items() if k not in _CLIENT_ONLY_DATA}
    key = hashlib.sha256(json.dumps([asdict(backbone), warmup], sort_keys=True).encode()).hexdigest()[:16]
    cache = _cache_dir()
    path = cache / f"backbone-{key}.bin" if cache else None
    if path is not None and path.exists():
        return FrozenBackbone.load(path)
    cfg = FederationConfig(backbone=backbone, data=data)
    bb = build_frozen_backbone(backbone, data.backbone_seed, pretrain=pretrain_pool(cfg),
                               steps=data.pretrain_steps)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        bb.save(tmp)
        os.replace(tmp, path)
    return bb


def client_seed(seed: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, client]).generate_state(1)[0])


def build_federation(cfg: FederationConfig, seed: int | None = None) -> Federation:
    seed = cfg.seeds[0] if seed is None else seed
    ds = make_dataset(cfg, required_classes(cfg), seed)
    part = partition_classes(cfg, ds, seed)
    streams = build_task_streams(cfg, part, seed)
    clients = [
        C.ClientState(i, cfg.encoder_for(i), client_seed(seed, i), ds, cfg.backbone.lora_size,
                      cfg.backbone.embed_dim, cfg.hyper, collab=cfg.ablation.collab)
        for i in range(cfg.num_clients)
    ]
    return Federation(cfg, seed, ds, part, streams, clients)


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def run_experiment(cfg: FederationConfig, seed: int | None = None, backbone: FrozenBackbone | None = None,
                   client_order: list[int] | None = None, diagnostics: bool = False) -> ResultBundle:
    """One seed of the protocol. ``client_order`` only permutes scheduling."""
    t_start = time.perf_counter()
    fed = build_federation(cfg, seed)
    bb = backbone if backbone is not None else shared_backbone(cfg.backbone, cfg.data)
    hash_before = bb.checksum()
    hp, ab = cfg.hyper, cfg.ablation
    order = list(range(cfg.num_clients)) if client_order is None else list(client_order)
    events: list[dict] = []
    round_losses, server_reports = [], []

    def emit(kind: str, **fields):
        events.append({"event": kind, **fields})

    for n in range(1, cfg.num_tasks + 1):
        for cs in fed.clients:
            cs.begin_task(fed.streams[cs.client_id][n - 1])
        for r in range(1, cfg.rounds_per_task + 1):
            payloads = {}
            for i in order:
                cs, task = fed.clients[i], fed.streams[i][n - 1]
                where = dict(client=i, task=n, round=r)
                try:
                    s1 = C.train_stage1(cs, bb, task, hp)
                    emit("Stage1", **where, loss=s1["epoch_means"][-1])
                    s2 = {"skipped": True, "losses": []}
                    if ab.smcf and n > 1:
                        s2 = C.train_stage2(cs, bb, hp, n)
                        if not s2["skipped"]:
                            emit("Stage2", **where, loss=_mean(s2["losses"]), ce=_mean(s2["ce"]),
                                 feature=_mean(s2["feature"]), adapter=_mean(s2["adapter"]))
                    counts = C.update_buffer(cs, bb, task)
                    emit("UpdateBuffer", **where, buffer_size=len(cs.buffer),
                         counts={str(k): v for k, v in counts.items()})
                    round_losses.append({**where, "stage1": s1["epoch_means"],
                                         "stage2": _mean(s2["losses"])})
                    if ab.collab:
                        fs = C.construct_feature_set(cs, n)
                        emit("ConstructFeatureSet", **where, rows=fs.rows)
                        payloads[i] = C.encode_upload(i, n, cs.generator, fs)
                        sizes = C.upload_sizes(payloads[i])
                        emit("Upload", **where, feature_set_dims=list(fs.features.shape),
                             generator_bytes=sizes["generator"], feature_set_bytes=sizes["feature_set"],
                             total_bytes=sizes["total"])
                except Exception as exc:
                    raise type(exc)(f"[client {i} task {n} round {r}] {exc}") from exc
            if ab.collab:
                state = ServerRoundState(task_index=n, lam=hp.server_lambda)
                for i in sorted(payloads):
                    state.add(C.parse_upload(payloads[i]))
                if ab.o2d:
                    fused, report = run_aggregation_round(state, solver=hp.o2d_solver, diagnostics=diagnostics)
                else:
                    avg = ablation_aggregate_uniform(state.uploads.values())
                    fused = {i: avg for i in state.uploads}
                    report = {"task": n, "uniform": True}
                report["round"] = r
                server_reports.append(report)
                for i in order:
                    C.receive(fed.clients[i], fused[i])
                    emit("Receive", client=i, task=n, round=r)
        for cs in fed.clients:
            C.snapshot_for_next_task(cs)
            emit("Snapshot", client=cs.client_id, task=n)
        for cs in fed.clients:
            for res in C.evaluate_client(cs, bb, fed.streams[cs.client_id][:n]):
                emit("Evaluate", client=cs.client_id, after_task=n, eval_task=res["task"],
                     correct=res["correct"], count=res["count"], loss=res["loss"],
                     predicted=res["predicted"], true=res["true"])

    # scheduling order must not leak into the log
    events.sort(key=_event_sort_key)
    matrices = [compute_accuracy_matrix(events, i, cfg.num_tasks) for i in range(cfg.num_clients)]
    return ResultBundle(
        seed=fed.seed,
        config=cfg.to_dict(),
        config_hash=cfg.digest(),
        matrices=matrices,
        events=events,
        round_losses=sorted(round_losses, key=lambda d: (d["task"], d["round"], d["client"])),
        server_reports=server_reports,
        payload_bytes=payload_accounting(events),
        backbone_hash=(hash_before, bb.checksum()),
        wall_time=time.perf_counter() - t_start,
    )


_PHASE = {"Stage1": 0, "Stage2": 1, "UpdateBuffer": 2, "ConstructFeatureSet": 3, "Upload": 4, "Receive": 5,
          "Snapshot": 6, "Evaluate": 7}


def _event_sort_key(ev: dict):
    task = ev.get("task", ev.get("after_task"))
    rnd = ev.get("round", 10**9)
    return (task, rnd, _PHASE[ev["event"]] // 5, ev["client"], _PHASE[ev["event"]], ev.get("eval_task", 0))


def round_sequences(events: list[dict]) -> dict[tuple[int, int, int], str]:
    """Space-joined event names per (client, task, round)."""
    seqs: dict[tuple[int, int, int], list[str]] = {}
    for ev in events:
        if "round" in ev:
            seqs.setdefault((ev["client"], ev["task"], ev["round"]), []).append(ev["event"])
    return {k: " ".join(v) for k, v in seqs.items()}


def run_seed_sweep(cfg: FederationConfig, seeds=None, **kw) -> tuple[list[ResultBundle], dict]:
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("seed sweep needs at least one seed")
    bundles = [run_experiment(cfg, s, **kw) for s in seeds]
    return bundles, aggregate_bundles(bundles)


def write_outputs(bundles: list[ResultBundle], out_dir: str | Path, summary: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for b in bundles for r in b.metrics_rows()]
    (out / "metrics.csv").write_text(metrics_csv(rows))
    results = [b.summary() for b in bundles]
    (out / "results.json").write_text(json.dumps(results if len(results) > 1 else results[0], indent=2))
    with open(out / "events.jsonl", "w") as fh:
        for b in bundles:
            for ev in b.events:
                fh.write(json.dumps({"seed": b.seed, **ev}, sort_keys=True) + "\n")
    if summary is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
