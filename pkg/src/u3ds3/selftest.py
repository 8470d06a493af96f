"""Fast invariant checks for a healthy install (a few seconds)."""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import checkpoint
from .clustering import assign_labels, l2_normalize
from .evaluation import evaluate, hungarian, metrics
from .network import NetworkConfig, NetworkParams, backward, forward
from .superpoint import SuperpointPartition, merge_superpoints
from .trainer import cluster_loss
from .voxel import FlipSpec, devoxelize, flip, voxelize


def check_voxel_mean(rng):
    x = rng.random((500, 12))
    c = rng.random((500, 3))
    g = voxelize(x, c, 8)
    total = (g.data * g.counts[..., None]).reshape(-1, 12).sum(axis=0)
    assert np.allclose(total, x.sum(axis=0), atol=1e-6), "cell sums differ from point sums"


def check_devoxelize(rng):
    r = 6
    grid = rng.random((r, r, r, 4))
    idx = rng.integers(0, r, size=(50, 3))
    out = devoxelize(grid, (idx + 0.5) / r)
    assert np.array_equal(out, grid[idx[:, 0], idx[:, 1], idx[:, 2]]), "cell centers not exact"


def check_flip(rng):
    g = rng.random((5, 5, 5, 2))
    for axes in ("x", "y", "z", "xy", "xyz"):
        spec = FlipSpec.parse(axes)
        assert np.array_equal(flip(flip(g, spec), spec), g), f"flip {axes} is not an involution"


def check_hungarian(rng):
    assert hungarian(np.array([[1, 5], [2, 1]])).tolist() == [1, 0]
    for _ in range(20):
        S = rng.integers(0, 20, size=(5, 5))
        best = max(sum(S[i, p[i]] for i in range(5)) for p in itertools.permutations(range(5)))
        f = hungarian(S)
        assert S[np.arange(5), f].sum() == best


def check_metrics(rng):
    m = metrics(np.array([[3, 1], [1, 3]]))
    assert (m.oacc, m.macc, m.miou) == (0.75, 0.75, 0.6)
    gt = rng.integers(0, 4, 300)
    perm = rng.permutation(4)
    assert evaluate(perm[gt], gt, 4).miou == 1.0


def check_cluster_loss(rng):
    mu = np.eye(3)[:2]
    loss, _ = cluster_loss(mu[:1], np.array([0]), mu)
    assert abs(loss - np.log1p(np.exp(-1.0))) < 1e-12
    loss, _ = cluster_loss(l2_normalize(rng.normal(size=(4, 3))), np.zeros(4, int), mu[:1])
    assert loss == 0.0


def check_assignment(rng):
    for _ in range(50):
        n, k, d = rng.integers(1, 20), rng.integers(1, 6), rng.integers(1, 5)
        f = rng.normal(size=(n, d))
        mu = rng.normal(size=(k, d))
        lab = assign_labels(f, np.zeros(n, int), mu)
        cost = ((f[:, None] - mu[None]) ** 2).sum(axis=(0, 2))
        assert lab[0] == cost.argmin() or np.isclose(cost[lab[0]], cost.min())


def check_merge(rng):
    n = 400
    coords = rng.random((n, 3))
    normals = l2_normalize(rng.normal(size=(n, 3)))
    part = SuperpointPartition.from_ids(rng.integers(0, 60, n), coords, normals)
    assert merge_superpoints(part, 40).count == min(40, part.count)


def check_gradient(rng):
    cfg = NetworkConfig(widths=(3, 4, 4), dtype="float64")
    params = NetworkParams.init(cfg, seed=1)
    x = rng.normal(size=(2, 4, 4, 4, 3))
    target = rng.normal(size=(2, 4, 4, 4, 4))

    def loss(p):
        out, _ = forward(p, x, "train", track_running=False)
        return float((out * target).sum())

    out, tape = forward(params, x, "train", track_running=False)
    grads, _ = backward(params, tape, target)
    key = "0.weight"
    h = 1e-4
    for flat in rng.choice(params[key].size, 5, replace=False):
        i = np.unravel_index(flat, params[key].shape)
        p = params.copy()
        p.tensors[key][i] += h
        up = loss(p)
        p.tensors[key][i] -= 2 * h
        num = (up - loss(p)) / (2 * h)
        err = abs(num - grads[key][i]) / max(abs(num), abs(grads[key][i]), 1e-6)
        assert err < 1e-3, f"gradient mismatch {err:.2e}"


def check_checkpoint(rng):
    t = {"a": rng.normal(size=(3, 2)), "b": np.arange(4)}
    data = checkpoint.dumps({"x": 1}, t)
    meta, back = checkpoint.loads(data)
    assert meta == {"x": 1} and all(np.array_equal(t[k], back[k]) for k in t)
    assert checkpoint.dumps(meta, back) == data


CHECKS = [check_voxel_mean, check_devoxelize, check_flip, check_hungarian, check_metrics,
          check_cluster_loss, check_assignment, check_merge, check_gradient, check_checkpoint]


def run(out=print) -> bool:
    ok = True
    rng = np.random.default_rng(0)
    for check in CHECKS:
        name = check.__name__.removeprefix("check_")
        t = time.perf_counter()
        try:
            check(rng)
            out(f"PASS {name} ({time.perf_counter() - t:.2f}s)")
        except AssertionError as e:
            ok = False
            out(f"FAIL {name}: {e}")
    return ok
