"""Accuracy matrices, forgetting, the continual objective and payload accounting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff.blob import header_nbytes


class IncompleteRunError(RuntimeError):
    pass


@dataclass
class AccuracyMatrix:
    """``cells[n-1][t-1]`` is task-t accuracy after finishing task n (t <= n)."""

    client: int
    cells: list[list[float | None]]

    @property
    def num_tasks(self) -> int:
        return len(self.cells)

    def __getitem__(self, key: tuple[int, int]) -> float:
        n, t = key
        return self.cells[n - 1][t - 1]

    def row_means(self) -> list[float]:
        """Mean over tasks seen so far; tasks without test samples (NaN cells) are left out."""
        return [float(np.nanmean(row[:n + 1])) for n, row in enumerate(self.cells)]

    def final_mean(self) -> float:
        return self.row_means()[-1]

    def to_dict(self) -> dict:
        return {"client": self.client, "cells": self.cells, "row_means": self.row_means(),
                "final_mean": self.final_mean()}


def compute_accuracy_matrix(events: list[dict], client: int, num_tasks: int) -> AccuracyMatrix:
    cells: list[list[float | None]] = [[None] * num_tasks for _ in range(num_tasks)]
    for ev in events:
        if ev.get("event") == "Evaluate" and ev["client"] == client:
            n, t = ev["after_task"], ev["eval_task"]
            if 1 <= t <= n <= num_tasks:
                cells[n - 1][t - 1] = ev["correct"] / ev["count"] if ev["count"] else float("nan")
    for n in range(num_tasks):
        for t in range(n + 1):
            if cells[n][t] is None:
                raise IncompleteRunError(f"client {client}: no evaluation of task {t + 1} after task {n + 1}")
    return AccuracyMatrix(client, cells)


def compute_forgetting(A: AccuracyMatrix | list[list[float]]) -> list[float]:
    """``max_{n >= t} A[n][t] - A[N][t]`` for every task t before the last."""
    cells = A.cells if isinstance(A, AccuracyMatrix) else A
    N = len(cells)
    if N < 2:
        return []
    return [max(cells[n][t] for n in range(t, N)) - cells[N - 1][t] for t in range(N - 1)]


def continual_objective(events: list[dict], num_clients: int, after_task: int) -> dict:
    """Old-task and new-task cross-entropy per client after ``after_task``, plus their client mean."""
    old: dict[int, list[float]] = {c: [] for c in range(num_clients)}
    new: dict[int, float] = {}
    for ev in events:
        if ev.get("event") != "Evaluate" or ev["after_task"] != after_task:
            continue
        if ev["eval_task"] < after_task:
            old[ev["client"]].append(ev["loss"])
        else:
            new[ev["client"]] = ev["loss"]
    per_client = {
        c: {"old": float(np.mean(old[c])) if old[c] else 0.0, "new": new.get(c, float("nan"))}
        for c in range(num_clients)
    }
    total = float(np.mean([v["old"] + v["new"] for v in per_client.values()]))
    return {"clients": per_client, "F": total}


def feature_set_nbytes(rows: int, d_E: int) -> int:
    return header_nbytes(2) + 8 * rows * d_E


def generator_nbytes(d_E: int, out_size: int) -> int:
    return header_nbytes(2) + 8 * d_E * out_size + header_nbytes(1) + 8 * out_size


def payload_accounting(upload_events: list[dict]) -> dict[tuple[int, int, int], int]:
    """Upload bytes (generator + feature set) keyed by (task, round, client)."""
    out = {}
    for ev in upload_events:
        if ev.get("event") != "Upload":
            continue
        rows, d_E = ev["feature_set_dims"]
        if ev["feature_set_bytes"] != feature_set_nbytes(rows, d_E):
            raise AssertionError(f"feature-set size mismatch in {ev}")
        out[(ev["task"], ev["round"], ev["client"])] = ev["generator_bytes"] + ev["feature_set_bytes"]
    return out


METRICS_COLUMNS = ("seed", "client", "after_task", "eval_task", "accuracy")


def metrics_rows(seed: int, matrices: list[AccuracyMatrix]) -> list[tuple]:
    rows = []
    for A in matrices:
        for n in range(1, A.num_tasks + 1):
            for t in range(1, n + 1):
                rows.append((seed, A.client, n, t, A[n, t]))
    return rows


def metrics_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow(r[:4] + (repr(float(r[4])),))
    return buf.getvalue()


@dataclass
class ResultBundle:
    seed: int
    config: dict
    config_hash: str
    matrices: list[AccuracyMatrix]
    events: list[dict] = field(repr=False)
    round_losses: list[dict] = field(default_factory=list, repr=False)
    server_reports: list[dict] = field(default_factory=list, repr=False)
    payload_bytes: dict = field(default_factory=dict, repr=False)
    backbone_hash: tuple[str, str] = ("", "")
    wall_time: float = 0.0

    def final_mean(self) -> float:
        """Mean over clients of the final-row (back-test) accuracy."""
        return float(np.mean([A.final_mean() for A in self.matrices]))

    def forgetting(self) -> list[list[float]]:
        return [compute_forgetting(A) for A in self.matrices]

    def task1_forgetting(self) -> float:
        """Client-mean forgetting of the first task (0 for single-task runs)."""
        values = [f[0] for f in self.forgetting() if f]
        return float(np.mean(values)) if values else 0.0

    def metrics_rows(self) -> list[tuple]:
        return metrics_rows(self.seed, self.matrices)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "final_mean_accuracy": self.final_mean(),
            "accuracy": [A.to_dict() for A in self.matrices],
            "forgetting": self.forgetting(),
            "objective": [continual_objective(self.events, len(self.matrices), n)
                          for n in range(1, self.matrices[0].num_tasks + 1)],
            "round_losses": self.round_losses,
            "server_reports": self.server_reports,
            "payload_bytes": [{"task": k[0], "round": k[1], "client": k[2], "bytes": v}
                              for k, v in sorted(self.payload_bytes.items())],
            "backbone_hash": {"before": self.backbone_hash[0], "after": self.backbone_hash[1]},
            "wall_time": self.wall_time,
        }


def mean_std(values) -> tuple[float, float]:
    """Population mean and std; the std is computed on values shifted by the first one so identical runs give exactly 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size and np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(np.mean(v)), float(np.std(v - v[0]))


def _summary(values) -> dict:
    m, s = mean_std(values)
    return {"mean": m, "std": s, "values": list(values)}


def aggregate_bundles(bundles: list[ResultBundle]) -> dict:
    """Mean and standard deviation across seeds of every accuracy cell and summary scalar."""
    if not bundles:
        raise ValueError("no bundles to aggregate")
    rows = [b.metrics_rows() for b in bundles]
    keyed: dict[tuple, list[float]] = {}
    for run in rows:
        for seed, client, n, t, acc in run:
            keyed.setdefault((client, n, t), []).append(acc)
    cells = [dict(zip(("client", "after_task", "eval_task", "mean", "std"), (c, n, t, *mean_std(v))))
             for (c, n, t), v in sorted(keyed.items())]
    finals = [b.final_mean() for b in bundles]
    forget = [b.task1_forgetting() for b in bundles]
    return {
        "seeds": [b.seed for b in bundles],
        "final_mean_accuracy": _summary(finals),
        "forgetting_task1": _summary(forget),
        "cells": cells,
    }
