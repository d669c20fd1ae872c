"""Server-side fusion of linear adapter generators.

For student ``i`` the fused generator minimizes

    sum_{j != i} mean_{x in FS_j} ||phi(x) - phi_j(x)||^2 + lam * ||phi - phi_i||_F^2

where the regularizer is the Frobenius distance between the stacked
(weight; bias) parameters. Because ``phi`` is affine this is a ridge problem
shared by every output coordinate, so the closed form is exact.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, backward, ops
from .client import FeatureSet, ProtocolError, Upload
from .hypernet import ParameterGenerator

log = logging.getLogger(__name__)


def _stack(gen: ParameterGenerator) -> np.ndarray:
    return np.vstack([gen.weight.data, gen.bias.data[None, :]])


def _unstack(G: np.ndarray, seed=None) -> ParameterGenerator:
    return ParameterGenerator.from_arrays(G[:-1].copy(), G[-1].copy(), seed=seed)


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check(student: ParameterGenerator, teachers, feats) -> None:
    if len(teachers) != len(feats):
        raise ProtocolError(f"{len(teachers)} teachers but {len(feats)} feature sets")
    for t, fs in zip(teachers, feats):
        X = fs.features if isinstance(fs, FeatureSet) else np.asarray(fs)
        if t.weight.shape != student.weight.shape:
            raise ProtocolError(f"teacher shape {t.weight.shape} != student shape {student.weight.shape}")
        if X.ndim != 2 or X.shape[1] != student.d_E:
            raise ProtocolError(f"feature dim {X.shape} does not match generator input {student.d_E}")


def _features(fs) -> np.ndarray:
    return fs.features if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=np.float64)


def objective_terms(phi: ParameterGenerator, student: ParameterGenerator, teachers, feats,
                    lam: float) -> tuple[float, float]:
    """(distillation term, weighted regularizer term) of the fusion objective."""
    distill = 0.0
    for t, fs in zip(teachers, feats):
        X = _features(fs)
        if len(X):
            distill += float(((phi.apply_np(X) - t.apply_np(X)) ** 2).sum(axis=1).mean())
    reg = lam * float(((_stack(phi) - _stack(student)) ** 2).sum())
    return distill, reg


def o2d_closed_form(student: ParameterGenerator, teachers, feats, lam: float) -> ParameterGenerator:
    rows, targets = [], []
    for t, fs in zip(teachers, feats):
        X = _features(fs)
        if not len(X):
            continue
        w = 1.0 / np.sqrt(len(X))
        rows.append(w * _augment(X))
        targets.append(w * t.apply_np(X))
    G_i = _stack(student)
    if lam > 0:
        rows.append(np.sqrt(lam) * np.eye(G_i.shape[0]))
        targets.append(np.sqrt(lam) * G_i)
    if not rows:
        return _unstack(G_i, student.seed)
    G, *_ = np.linalg.lstsq(np.vstack(rows), np.vstack(targets), rcond=None)
    return _unstack(G, student.seed)


def o2d_iterative(student: ParameterGenerator, teachers, feats, lam: float, steps: int = 3000,
                  lr: float = 0.05) -> ParameterGenerator:
    """Adam on the same objective, with cosine-decayed step size."""
    G = Tensor(_stack(student).copy(), requires_grad=True)
    G_i = Tensor(_stack(student))
    data = [(Tensor(_augment(_features(fs))), Tensor(t.apply_np(_features(fs))))
            for t, fs in zip(teachers, feats) if len(_features(fs))]
    opt = Adam([G], lr=lr)
    for step in range(steps):
        opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        loss = ops.mul(ops.sum(ops.sq_l2(G, G_i)), lam)
        for X, Y in data:
            loss = loss + ops.mean(ops.sq_l2(ops.matmul(X, G), Y))
        backward(loss)
        opt.step()
    return _unstack(G.data, student.seed)


def o2d_distill(student: ParameterGenerator, teachers, feats, lam: float,
                solver: str = "closed_form", **solver_kw) -> ParameterGenerator:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _check(student, teachers, feats)
    if not teachers:
        log.info("no teachers; returning a copy of the student")
        return _unstack(_stack(student), student.seed)
    if solver == "closed_form":
        return o2d_closed_form(student, teachers, feats, lam)
    if solver == "iterative":
        return o2d_iterative(student, teachers, feats, lam, **solver_kw)
    raise ValueError(f"unknown solver {solver!r}")


def consensus_diagnostic(fused: ParameterGenerator, teachers, feats) -> list[dict]:
    """For every uploaded feature row: distance of the fused output to the mean
    teacher output, and whether it sits inside the teachers' bounding box."""
    report = []
    for j, fs in enumerate(feats):
        X = _features(fs)
        if not len(X):
            continue
        Z = np.stack([t.apply_np(X) for t in teachers])          # (teachers, rows, |W|)
        zbar = Z.mean(axis=0)
        out = fused.apply_np(X)
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        tol = 1e-9 * (1.0 + np.abs(Z).max())
        for r in range(len(X)):
            report.append({
                "source": j,
                "row": r,
                "dist_to_mean": float(np.linalg.norm(out[r] - zbar[r])),
                "in_box": bool(np.all(out[r] >= lo[r] - tol) and np.all(out[r] <= hi[r] + tol)),
            })
    return report


def pointwise_consensus(teacher_outputs: np.ndarray) -> np.ndarray:
    """Minimizer of sum_j ||z - z_j||^2 over z, found by solving the normal equation."""
    Z = np.asarray(teacher_outputs, dtype=np.float64)
    k = len(Z)
    # gradient 2 * sum_j (z - z_j) = 0  <=>  k z = sum_j z_j
    return np.linalg.solve(k * np.eye(Z.shape[1]), Z.sum(axis=0))


@dataclass
class ServerRoundState:
    task_index: int
    lam: float
    uploads: dict[int, Upload] = field(default_factory=dict)
    outputs: dict[int, ParameterGenerator] = field(default_factory=dict)

    def add(self, upload: Upload) -> None:
        if upload.client_id in self.uploads:
            raise ProtocolError(f"duplicate upload from client {upload.client_id}")
        self.uploads[upload.client_id] = upload


def run_aggregation_round(state: ServerRoundState, solver: str = "closed_form",
                          diagnostics: bool = False) -> tuple[dict[int, ParameterGenerator], dict]:
    """Personalized fusion for every uploader, each against the original uploads."""
    if not state.uploads:
        raise ProtocolError("aggregation round without uploads")
    report = {"task": state.task_index, "lambda": state.lam, "clients": {}}
    ids = sorted(state.uploads)
    fused = {}
    for i in ids:
        t0 = time.perf_counter()
        student = state.uploads[i].generator
        teachers = [state.uploads[j].generator for j in ids if j != i]
        feats = [state.uploads[j].features for j in ids if j != i]
        fused[i] = o2d_distill(student, teachers, feats, state.lam, solver=solver)
        distill, reg = objective_terms(fused[i], student, teachers, feats, state.lam)
        entry = {"distill": distill, "regularizer": reg, "seconds": time.perf_counter() - t0}
        if diagnostics and teachers:
            diag = consensus_diagnostic(fused[i], teachers, feats)
            entry["consensus_mean_dist"] = float(np.mean([d["dist_to_mean"] for d in diag])) if diag else 0.0
            entry["consensus_in_box"] = float(np.mean([d["in_box"] for d in diag])) if diag else 1.0
        report["clients"][i] = entry
    state.outputs = fused
    return fused, report


def ablation_aggregate_uniform(uploads) -> ParameterGenerator:
    """Element-wise mean of all uploaded generators."""
    gens = [u.generator if isinstance(u, Upload) else u for u in uploads]
    if not gens:
        raise ProtocolError("nothing to average")
    shape = gens[0].weight.shape
    if any(g.weight.shape != shape for g in gens):
        raise ProtocolError("generator shapes differ")
    return ParameterGenerator.from_arrays(np.mean([g.weight.data for g in gens], axis=0),
                                          np.mean([g.bias.data for g in gens], axis=0))
