"""Superpoint-constrained pseudo-labels and streaming centroid maintenance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def l2_normalize(x, axis=-1, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), eps)


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (K, D), unit rows
    counts: np.ndarray  # (K,) running assignment counts
    pathway: int = 2

    @property
    def k(self):
        return len(self.centroids)

    def copy(self):
        return CentroidSet(self.centroids.copy(), self.counts.copy(), self.pathway)

    @classmethod
    def from_centroids(cls, centroids, pathway=2):
        c = l2_normalize(centroids)
        return cls(c, np.zeros(len(c), dtype=np.int64), pathway)


def superpoint_means(features, sp_ids):
    """Return (unique ids, inverse index, per-superpoint mean, per-superpoint size)."""
    uniq, inv = np.unique(sp_ids, return_inverse=True)
    inv = inv.reshape(-1)
    sizes = np.bincount(inv, minlength=len(uniq))
    sums = np.zeros((len(uniq), features.shape[1]), dtype=np.float64)
    np.add.at(sums, inv, features)
    return uniq, inv, sums / sizes[:, None], sizes


def nearest_centroid(x, centroids):
    """Index of the closest centroid in squared Euclidean distance, lowest index on ties."""
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def assign_labels(features, sp_ids, centroids):
    """Label each superpoint with the centroid minimizing its summed squared distance.

    Up to a label-independent term the summed cost is n * ||mu||^2 - 2 * mu . sum(x),
    evaluated from member sums without division so exact ties stay exact.
    Lowest centroid index wins on ties.
    """
    mu = centroids.centroids if isinstance(centroids, CentroidSet) else np.asarray(centroids)
    mu = np.asarray(mu, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    _, inv, means, sizes = superpoint_means(features, np.asarray(sp_ids))
    sums = np.zeros_like(means)
    np.add.at(sums, inv, features)
    # elementwise products, not BLAS, so identical centroids get bit-identical costs
    cost = sizes[:, None] * (mu ** 2).sum(axis=1)[None, :] - 2.0 * (sums[:, None, :] * mu[None]).sum(-1)
    return cost.argmin(axis=1)[inv]


def label_histogram(labels, k):
    return np.bincount(np.asarray(labels), minlength=k).astype(np.int64)


def minibatch_update(cs: CentroidSet, features, labels, perturb=0.0, rng=None):
    """Running-mean update of the assigned centroids, then re-projection to the unit sphere.

    Equivalent to applying mu += (x - mu) / count point by point in order.
    ``perturb`` adds Gaussian noise to touched centroids before normalizing.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    k, dim = cs.centroids.shape
    add = np.bincount(labels, minlength=k)
    sums = np.zeros((k, dim))
    np.add.at(sums, labels, features)
    touched = np.flatnonzero(add)
    n_old = cs.counts[touched].astype(np.float64)
    n_new = n_old + add[touched]
    mu = (cs.centroids[touched] * n_old[:, None] + sums[touched]) / n_new[:, None]
    if perturb > 0:
        if rng is None:
            raise ValueError("perturbation needs an rng")
        mu = mu + rng.normal(scale=perturb, size=mu.shape)
    cs.centroids[touched] = l2_normalize(mu)
    cs.counts[touched] += add[touched]
    return cs


def handle_degenerate(cs: CentroidSet, histogram, rng, sigma=1e-3):
    """Re-seed every empty cluster from the current largest one and split its count.

    Empty labels are processed in ascending order; the largest cluster is
    re-evaluated after each split. Returns (centroids, adjusted histogram).
    """
    hist = np.asarray(histogram, dtype=np.int64).copy()
    if hist.sum() == 0:
        raise ValueError("no features were assigned this epoch")
    for empty in np.flatnonzero(hist == 0):
        big = int(hist.argmax())
        noisy = cs.centroids[big] + rng.normal(scale=sigma, size=cs.centroids.shape[1])
        cs.centroids[empty] = l2_normalize(noisy)
        hist[empty] = hist[big] // 2
        hist[big] -= hist[empty]
        cnt = int(cs.counts[big])
        cs.counts[empty] = cnt // 2
        cs.counts[big] = cnt - cnt // 2
    return cs, hist


def class_weights(histogram, eps=1e-6):
    """Inverse square root of pseudo-label ratios, scaled to mean one."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.sum() <= 0:
        raise ValueError("empty histogram")
    raw = (hist / hist.sum() + eps) ** -0.5
    return raw / raw.mean()


def kmeans_pp(x, k, rng):
    """k-means++ seeding on rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("no points to seed from")
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.stack(centers)


def objective(features, labels, centroids):
    return float(((np.asarray(features) - centroids[labels]) ** 2).sum())


def lloyd(features, sp_ids, init_centroids, max_iter=100, on_assign=None):
    """Full-batch superpoint-constrained k-means with exact mean updates.

    Returns (labels, centroids, objective history). Empty clusters keep their
    previous centroid. ``on_assign(labels)`` is called after every assignment.
    """
    features = np.asarray(features, dtype=np.float64)
    mu = np.array(init_centroids, dtype=np.float64)
    labels = assign_labels(features, sp_ids, mu)
    if on_assign is not None:
        on_assign(labels)
    history = [objective(features, labels, mu)]
    for _ in range(max_iter):
        for k in range(len(mu)):
            members = labels == k
            if members.any():
                mu[k] = features[members].mean(axis=0)
        history.append(objective(features, labels, mu))
        new = assign_labels(features, sp_ids, mu)
        if on_assign is not None:
            on_assign(new)
        history.append(objective(features, new, mu))
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, mu, history
