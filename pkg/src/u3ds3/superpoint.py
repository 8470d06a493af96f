"""Geometric pre-segmentation: supervoxel growing, greedy merging, road plane."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud, orient_normals

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 40

_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) != (0, 0, 0)], dtype=np.int64)


@dataclass
class SuperpointPartition:
    sp_id: np.ndarray
    sp_sizes: np.ndarray
    sp_centroid: np.ndarray
    sp_normal_sum: np.ndarray

    @property
    def count(self):
        return len(self.sp_sizes)

    @classmethod
    def from_ids(cls, ids, coords, normals=None):
        """Compact arbitrary integer ids to 0..S-1 (ascending) and build aggregates."""
        uniq, inv = np.unique(np.asarray(ids), return_inverse=True)
        inv = inv.reshape(-1).astype(np.int64)
        s = len(uniq)
        sizes = np.bincount(inv, minlength=s)
        cent = np.zeros((s, 3))
        np.add.at(cent, inv, coords)
        cent /= sizes[:, None]
        nsum = np.zeros((s, 3))
        if normals is not None:
            np.add.at(nsum, inv, normals)
        return cls(inv, sizes, cent, nsum)


@dataclass
class Plane:
    normal: np.ndarray
    offset: float
    inlier_mask: np.ndarray

    def distance(self, coords):
        return np.abs(coords @ self.normal + self.offset)


# ---------------------------------------------------------------------------
# VCCS-style supervoxels


def _voxel_graph(keys):
    """CSR adjacency (26-connectivity) between occupied voxels given integer keys."""
    lo = keys.min(axis=0) - 1
    dims = keys.max(axis=0) - lo + 2
    lin = ((keys - lo) * np.array([dims[1] * dims[2], dims[2], 1])).sum(axis=1)
    order = np.argsort(lin)
    sorted_lin = lin[order]
    nbrs = []
    owners = []
    for off in _OFFSETS:
        q = ((keys + off - lo) * np.array([dims[1] * dims[2], dims[2], 1])).sum(axis=1)
        pos = np.searchsorted(sorted_lin, q)
        pos = np.minimum(pos, len(sorted_lin) - 1)
        hit = sorted_lin[pos] == q
        owners.append(np.flatnonzero(hit))
        nbrs.append(order[pos[hit]])
    owners = np.concatenate(owners)
    nbrs = np.concatenate(nbrs)
    srt = np.lexsort((nbrs, owners))
    owners, nbrs = owners[srt], nbrs[srt]
    indptr = np.searchsorted(owners, np.arange(len(keys) + 1))
    return indptr, nbrs


def vccs_superpoints(cloud: PointCloud, voxel_res: float = 0.03, seed_res: float = 0.5,
                     weights=(0.4, 0.2, 1.0)) -> SuperpointPartition:
    """Grow supervoxels from a regular seed lattice over the voxel adjacency graph.

    Voxels are claimed in order of the distance to the growing supervoxel's
    running mean (position, color, normal). Voxels unreachable from any seed
    start supervoxels of their own, so every point is covered.
    """
    if cloud.normals is None:
        raise ValueError("cloud has no normals; run estimate_normals first")
    if not voxel_res < seed_res:
        raise ValueError("voxel_res must be smaller than seed_res")
    w_s, w_c, w_n = weights
    coords = cloud.coords
    keys = np.floor(coords / voxel_res).astype(np.int64)
    ukeys, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    nv = len(ukeys)
    cnt = np.bincount(inv, minlength=nv).astype(np.float64)

    def vmean(a):
        out = np.zeros((nv, a.shape[1]))
        np.add.at(out, inv, a)
        return out / cnt[:, None]

    vpos = vmean(coords)
    vcol = vmean(cloud.colors) if cloud.colors is not None else np.zeros((nv, 3))
    vnrm = vmean(cloud.normals)
    vnrm /= np.maximum(np.linalg.norm(vnrm, axis=1, keepdims=True), 1e-12)
    indptr, nbrs = _voxel_graph(ukeys)

    # one seed per occupied seed cell: the voxel nearest the cell center
    skeys = np.floor(vpos / seed_res).astype(np.int64)
    centers = (skeys + 0.5) * seed_res
    dist = np.linalg.norm(vpos - centers, axis=1)
    order = np.lexsort((np.arange(nv), dist, skeys[:, 2], skeys[:, 1], skeys[:, 0]))
    first = np.ones(nv, dtype=bool)
    first[1:] = np.any(skeys[order][1:] != skeys[order][:-1], axis=1)
    seeds = list(order[first])

    label = np.full(nv, -1, dtype=np.int64)
    scale = 3.0 * seed_res

    sums_pos, sums_col, sums_nrm, sizes = [], [], [], []

    def distance(v, s):
        n = sizes[s]
        dp = np.linalg.norm(vpos[v] - sums_pos[s] / n) / scale
        dc = np.sum((vcol[v] - sums_col[s] / n) ** 2)
        mn = sums_nrm[s]
        mnorm = np.linalg.norm(mn)
        cos = abs(float(vnrm[v] @ mn) / mnorm) if mnorm > 1e-12 else 1.0
        return float(np.sqrt(w_s * dp * dp + w_c * dc + w_n * (1.0 - cos) ** 2))

    def claim(v, s):
        label[v] = s
        sums_pos[s] += vpos[v]
        sums_col[s] += vcol[v]
        sums_nrm[s] += vnrm[v]
        sizes[s] += 1

    def grow(start_seeds):
        heap = []
        for v in start_seeds:
            if label[v] >= 0:
                continue
            s = len(sizes)
            sums_pos.append(np.zeros(3))
            sums_col.append(np.zeros(3))
            sums_nrm.append(np.zeros(3))
            sizes.append(0)
            claim(v, s)
            for u in nbrs[indptr[v]:indptr[v + 1]]:
                if label[u] < 0:
                    heapq.heappush(heap, (distance(u, s), int(u), s))
        while heap:
            _, v, s = heapq.heappop(heap)
            if label[v] >= 0:
                continue
            claim(v, s)
            for u in nbrs[indptr[v]:indptr[v + 1]]:
                if label[u] < 0:
                    heapq.heappush(heap, (distance(u, s), int(u), s))

    grow(seeds)
    while (label < 0).any():
        grow([int(np.flatnonzero(label < 0)[0])])
    return SuperpointPartition.from_ids(label[inv], coords, cloud.normals)


# ---------------------------------------------------------------------------
# merging


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def merge_superpoints(part: SuperpointPartition, gamma: int = DEFAULT_GAMMA,
                      history: list | None = None) -> SuperpointPartition:
    """Greedily merge the smallest superpoint until ``gamma`` remain.

    The smallest superpoint (lowest id on ties) joins whichever of its two
    nearest superpoints (by centroid) has the more similar summed normal;
    equal similarity goes to the nearer one. Each step is appended to
    ``history`` as (source id, target id) in input numbering.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    sizes = part.sp_sizes.astype(np.int64).copy()
    cent = part.sp_centroid.astype(np.float64).copy()
    nsum = part.sp_normal_sum.astype(np.float64).copy()
    s0 = len(sizes)
    alive = np.ones(s0, dtype=bool)
    parent = np.arange(s0)
    remaining = s0
    big = np.iinfo(np.int64).max
    while remaining > gamma:
        i = int(np.argmin(np.where(alive, sizes, big)))
        others = np.flatnonzero(alive & (np.arange(s0) != i))
        d = np.linalg.norm(cent[others] - cent[i], axis=1)
        near = others[np.lexsort((others, d))[:2]]
        target = int(near[0])
        if len(near) == 2 and _cosine(nsum[i], nsum[near[1]]) > _cosine(nsum[i], nsum[near[0]]):
            target = int(near[1])
        total = sizes[i] + sizes[target]
        cent[target] = (cent[target] * sizes[target] + cent[i] * sizes[i]) / total
        sizes[target] = total
        nsum[target] += nsum[i]
        alive[i] = False
        parent[i] = target
        remaining -= 1
        if history is not None:
            history.append((i, target))

    # resolve merge chains, then compact
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    keep = np.flatnonzero(alive)
    remap = np.full(s0, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    return SuperpointPartition(remap[root[part.sp_id]], sizes[keep], cent[keep], nsum[keep])


# ---------------------------------------------------------------------------
# RANSAC road plane


def fit_plane_pca(points):
    """Least-squares plane through ``points``: (unit normal, offset)."""
    c = points.mean(axis=0)
    q = points - c
    _, vecs = np.linalg.eigh(q.T @ q)
    n = orient_normals(vecs[:, 0][None, :])[0]
    return n, -float(n @ c)


def ransac_plane(coords, iters: int = 200, thresh: float = 0.2, seed: int = 0) -> Plane:
    """Best-of-``iters`` three-point plane by inlier count, refit on its inliers.

    The returned mask is the inlier set of the winning hypothesis.
    """
    coords = np.asarray(coords.coords if isinstance(coords, PointCloud) else coords, dtype=np.float64)
    n = len(coords)
    if n < 3:
        raise ValueError("RANSAC needs at least 3 points")
    if iters < 1 or thresh <= 0:
        raise ValueError("iters must be >= 1 and thresh > 0")
    rng = np.random.default_rng(seed)
    best_count, best_mask = -1, None
    for _ in range(iters):
        a, b, c = coords[rng.choice(n, size=3, replace=False)]
        nrm = np.cross(b - a, c - a)
        length = np.linalg.norm(nrm)
        if length < 1e-12:
            continue
        nrm /= length
        mask = np.abs(coords @ nrm - nrm @ a) <= thresh
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        raise ValueError(f"all {iters} RANSAC hypotheses were degenerate (collinear samples)")
    normal, offset = fit_plane_pca(coords[best_mask])
    return Plane(normal, offset, best_mask)


# ---------------------------------------------------------------------------
# scene-level pipeline and file format


def compute_superpoints(cloud: PointCloud, gamma: int = DEFAULT_GAMMA, voxel_res: float = 0.03,
                        seed_res: float | None = None, road_ransac: bool = False, seed: int = 0,
                        ransac_iters: int = 200, ransac_thresh: float = 0.2,
                        weights=(0.4, 0.2, 1.0)) -> SuperpointPartition:
    """Supervoxels merged down to ``gamma``; in road mode the fitted plane is one superpoint."""
    if seed_res is None:
        seed_res = 2.0 if road_ransac else 0.5
    ids = np.zeros(len(cloud), dtype=np.int64)
    rest = np.arange(len(cloud))
    offset = 0
    if road_ransac:
        plane = ransac_plane(cloud.coords, ransac_iters, ransac_thresh, seed)
        rest = np.flatnonzero(~plane.inlier_mask)
        offset = 1  # road gets id 0
    if len(rest):
        sub = vccs_superpoints(cloud.subset(rest), voxel_res, seed_res, weights)
        ids[rest] = sub.sp_id + offset
    part = SuperpointPartition.from_ids(ids, cloud.coords, cloud.normals)
    log.info("%s: %d initial superpoints", cloud.scene_id, part.count)
    return merge_superpoints(part, gamma)


def save_sp(path, sp_id):
    np.savetxt(path, np.asarray(sp_id, dtype=np.int64), fmt="%d")


def load_sp(path, n_points=None):
    ids = np.loadtxt(Path(path), dtype=np.int64, ndmin=1)
    if n_points is not None and len(ids) != n_points:
        raise ValueError(f"superpoint file has {len(ids)} lines, cloud has {n_points} points")
    if len(ids) and ids.min() < 0:
        raise ValueError("superpoint ids must be non-negative")
    return ids
