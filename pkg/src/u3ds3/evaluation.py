"""Cluster-to-class matching and segmentation metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def confusion_matrix(pred, gt, n_classes):
    """S[i, j] = number of points predicted as cluster i with ground-truth class j."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if len(a) and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    return np.bincount(pred * n_classes + gt, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def _min_cost_assignment(cost):
    """Kuhn-Munkres with potentials on a square cost matrix; returns (col per row, total)."""
    n = len(cost)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[col] = row, 1-based, 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, n + 1):
        assign[match[j] - 1] = j - 1
    return assign, sum(cost[i][assign[i]] for i in range(n))


def hungarian(S):
    """Bijection f (as an array, f[i] = j) maximizing sum_i S[i, f(i)].

    Among optimal bijections the lexicographically smallest is returned.
    """
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("matching matrix must be square")
    n = S.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    exact = np.issubdtype(S.dtype, np.integer)
    vals = S.astype(np.int64 if exact else np.float64)

    def best(rows, cols):
        if not rows:
            return 0
        sub = (-vals[np.ix_(rows, cols)]).tolist()
        return -_min_cost_assignment(sub)[1]

    def equal(a, b):
        return a == b if exact else abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))

    target = best(list(range(n)), list(range(n)))
    f = np.empty(n, dtype=np.int64)
    free = list(range(n))
    gained = 0
    for i in range(n):
        rest = list(range(i + 1, n))
        for j in free:
            cols = [c for c in free if c != j]
            if equal(gained + vals[i, j] + best(rest, cols), target):
                f[i] = j
                gained += vals[i, j]
                free.remove(j)
                break
    return f


def match_matrix(S, f):
    """Rows moved so that predicted cluster i lands on row f(i)."""
    M = np.zeros_like(S)
    M[f] = S
    return M


@dataclass
class Metrics:
    oacc: float
    macc: float
    miou: float
    iou: np.ndarray
    recall: np.ndarray
    support: np.ndarray


def metrics(M):
    """oAcc, mAcc and mIoU of a matched matrix (rows: prediction, columns: ground truth).

    Means run over classes that have ground-truth points.
    """
    M = np.asarray(M, dtype=np.float64)
    total = M.sum()
    if total == 0:
        raise ValueError("no points to evaluate")
    tp = np.diag(M)
    gt = M.sum(axis=0)
    pr = M.sum(axis=1)
    support = gt > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support, tp / gt, 0.0)
        union = pr + gt - tp
        iou = np.where(union > 0, tp / union, 0.0)
    return Metrics(
        oacc=float(tp.sum() / total),
        macc=float(recall[support].mean()),
        miou=float(iou[support].mean()),
        iou=iou,
        recall=recall,
        support=support,
    )


@dataclass
class Report:
    confusion: np.ndarray
    mapping: np.ndarray
    metrics: Metrics
    epoch: int | None = None

    @property
    def miou(self):
        return self.metrics.miou

    def csv_header(self):
        return ["epoch", "oAcc", "mAcc", "mIoU"] + [f"IoU_{k}" for k in range(len(self.mapping))]

    def csv_row(self):
        m = self.metrics
        epoch = "" if self.epoch is None else self.epoch
        return [epoch, f"{m.oacc:.6f}", f"{m.macc:.6f}", f"{m.miou:.6f}"] + [f"{v:.6f}" for v in m.iou]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()

    def to_text(self):
        m = self.metrics
        lines = [f"oAcc {m.oacc:.4f}  mAcc {m.macc:.4f}  mIoU {m.miou:.4f}",
                 "cluster -> class: " + ", ".join(f"{i}->{j}" for i, j in enumerate(self.mapping))]
        for k, (v, s) in enumerate(zip(m.iou, m.support)):
            lines.append(f"  class {k}: IoU {v:.4f}" + ("" if s else " (no ground truth)"))
        return "\n".join(lines)


def evaluate(pred, gt, n_classes, epoch=None) -> Report:
    """Dataset-level confusion, Hungarian matching, then metrics."""
    S = confusion_matrix(pred, gt, n_classes)
    f = hungarian(S)
    return Report(S, f, metrics(match_matrix(S, f)), epoch)
