"""Two-pathway clustering/training loop and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .clustering import (CentroidSet, assign_labels, class_weights, handle_degenerate,
                         kmeans_pp, l2_normalize, label_histogram, minibatch_update)
from .config import Config
from .evaluation import evaluate
from .network import (NetworkConfig, NetworkParams, backward, forward, network_from_tensors,
                      network_tensors, sgd_step)
from .pointcloud import PointCloud, cover_blocks, estimate_normals, grid_downsample, sample_blocks
from .superpoint import compute_superpoints
from .voxel import (ColorJitter, FlipSpec, color_jitter, devoxelize, devoxelize_backward,
                    flip_batch, trilinear_matrix, voxelize)

log = logging.getLogger(__name__)

P1, P2 = 0, 1  # pathway indices


@dataclass
class Scene:
    cloud: PointCloud
    sp_ids: np.ndarray


@dataclass
class TrainState:
    params: NetworkParams
    config: Config
    rng: np.random.Generator
    centroids: list = field(default_factory=lambda: [None, None])
    histograms: list = field(default_factory=lambda: [None, None])
    weights: list = field(default_factory=lambda: [None, None])
    epoch: int = 0

    @property
    def inference_pathway(self):
        return P2


def network_config(cfg: Config, **overrides):
    return NetworkConfig(widths=cfg.widths, kernel=cfg.kernel, **overrides)


def init_state(cfg: Config, params=None) -> TrainState:
    cfg.validate_for_training()
    ss = np.random.SeedSequence(cfg.seed)
    net_seed, rng_seed = ss.spawn(2)
    if params is None:
        params = NetworkParams.init(network_config(cfg), seed=net_seed)
    k = cfg.classes
    return TrainState(params, cfg, np.random.default_rng(rng_seed),
                      weights=[np.ones(k), np.ones(k)])


def derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data preparation


def prepare_scene(cloud: PointCloud, cfg: Config) -> Scene:
    """Downsample, estimate normals when missing, compute merged superpoints."""
    cloud = grid_downsample(cloud, cfg.cell)
    if cloud.normals is None:
        cloud = estimate_normals(cloud, cfg.normal_k)
    part = compute_superpoints(cloud, cfg.gamma, cfg.voxel_res, cfg.seed_res,
                               cfg.road_ransac, cfg.seed)
    return Scene(cloud, part.sp_id)


def training_blocks(scenes, cfg: Config):
    blocks = []
    for i, sc in enumerate(scenes):
        blocks += sample_blocks(sc.cloud, cfg.block, cfg.pts, derive_seed(cfg.seed, i), sc.sp_ids)
    if not blocks:
        raise ValueError("no training blocks (all tiles below the minimum point count)")
    return blocks


# ---------------------------------------------------------------------------
# pathways


@dataclass
class PathwayBatch:
    blocks: list
    flip: FlipSpec
    matrices: list
    features: list  # per pathway: (B*n, dim) unit rows, or None
    raw: list  # per pathway: devoxelized features before normalization
    tapes: list
    offsets: np.ndarray

    def block_slices(self):
        return [slice(self.offsets[i], self.offsets[i + 1]) for i in range(len(self.blocks))]


def pathway_forward(blocks, params, flip: FlipSpec, jitters1, jitters2, res, mode="train",
                    pathways=(P1, P2)) -> PathwayBatch:
    """Both pathways for a batch of blocks.

    Pathway 1 colors with ``jitters1`` and runs the network between a flip and
    its inverse; pathway 2 colors with ``jitters2`` only. Devoxelized outputs
    are L2-normalized per point.
    """
    mats = [trilinear_matrix(b.norm_coords, res) for b in blocks]
    offsets = np.concatenate([[0], np.cumsum([len(b.norm_coords) for b in blocks])])
    feats, raws, tapes = [None, None], [None, None], [None, None]
    for p in pathways:
        jit = jitters1 if p == P1 else jitters2
        grids = np.stack([voxelize(color_jitter(b.features, j), b.norm_coords, res).data
                          for b, j in zip(blocks, jit)]).astype(params.config.dtype)
        if p == P1:
            grids = flip_batch(grids, flip)
        out, tapes[p] = forward(params, grids, mode)
        if p == P1:
            out = flip_batch(out, flip)
        raw = np.concatenate([devoxelize(out[i], None, mats[i]) for i in range(len(blocks))])
        raws[p] = raw.astype(np.float64)
        feats[p] = l2_normalize(raws[p])
    return PathwayBatch(list(blocks), flip, mats, feats, raws, tapes, offsets)


def pathway_backward(params, batch: PathwayBatch, grads_feat, res):
    """Chain feature gradients through normalization, devoxelization, inverse flip and the network."""
    total = {}
    for p, g in enumerate(grads_feat):
        if g is None:
            continue
        u, raw = batch.features[p], batch.raw[p]
        norm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        g_raw = (g - (g * u).sum(axis=1, keepdims=True) * u) / norm
        grid_grads = np.stack([devoxelize_backward(g_raw[s], None, res, batch.matrices[i])
                               for i, s in enumerate(batch.block_slices())])
        grid_grads = grid_grads.astype(params.config.dtype)
        if p == P1:
            grid_grads = flip_batch(grid_grads, batch.flip)
        grads, _ = backward(params, batch.tapes[p], grid_grads)
        for k, v in grads.items():
            total[k] = total[k] + v if k in total else v
    return total


# ---------------------------------------------------------------------------
# losses


def cluster_loss(features, labels, centroids, weights=None):
    """Weighted mean of -log softmax over negative cosine distances to the centroids.

    Features and centroids are taken to be unit rows, so the cosine distance
    is 1 - f.mu. Centroids are constants. Returns (loss, d loss / d features).
    """
    f = np.asarray(features, dtype=np.float64)
    mu = centroids.centroids if isinstance(centroids, CentroidSet) else np.asarray(centroids, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(f)
    logits = f @ mu.T - 1.0
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    per_point = lse - logits[np.arange(n), labels]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    loss = float((w * per_point).sum() / n)
    probs = e / z
    probs[np.arange(n), labels] -= 1.0
    grad = (w[:, None] * probs) @ mu / n
    return loss, grad


def batch_labels(batch: PathwayBatch, p, cs: CentroidSet):
    """Pseudo-labels of one pathway's features, constrained per (block, superpoint)."""
    out = np.empty(batch.offsets[-1], dtype=np.int64)
    for blk, s in zip(batch.blocks, batch.block_slices()):
        out[s] = assign_labels(batch.features[p][s], blk.sp_ids, cs)
    return out


def two_pathway_loss(batch: PathwayBatch, labels1, labels2, cs1, cs2, weights1=None, weights2=None,
                     single_pathway=False):
    """Same-pathway plus cross-pathway cluster losses.

    Returns (L_final, terms, [grad f1', grad f2']). ``terms`` holds the four
    summands keyed "11", "22", "12", "21" (features, labels). With
    ``single_pathway`` only the pathway-2 term "22" is used.
    """
    f1, f2 = batch.features
    terms, grads = {}, [None, None]
    if single_pathway:
        terms["22"], grads[P2] = cluster_loss(f2, labels2, cs2, weights2)
        return terms["22"], terms, grads
    terms["11"], g11 = cluster_loss(f1, labels1, cs1, weights1)
    terms["22"], g22 = cluster_loss(f2, labels2, cs2, weights2)
    terms["12"], g12 = cluster_loss(f1, labels2, cs2, weights2)
    terms["21"], g21 = cluster_loss(f2, labels1, cs1, weights1)
    grads[P1] = g11 + g12
    grads[P2] = g22 + g21
    total = (terms["11"] + terms["22"]) + (terms["12"] + terms["21"])
    return total, terms, grads


# ---------------------------------------------------------------------------
# epoch


def _batches(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _sample_transforms(state: TrainState, n):
    cfg, rng = state.config, state.rng
    flip = FlipSpec((int(rng.integers(3)),))
    j1 = [ColorJitter.sample(rng, cfg.brightness, cfg.contrast) for _ in range(n)]
    j2 = [ColorJitter.sample(rng, cfg.brightness, cfg.contrast) for _ in range(n)]
    return flip, j1, j2


def _pathways(state):
    # the single-pathway ablation keeps the unflipped pathway that inference uses
    return (P2,) if state.config.single_pathway else (P1, P2)


def calibrate_batchnorm(state: TrainState, blocks):
    """Set running statistics to the cumulative average of batch statistics."""
    cfg = state.config
    for t, batch in enumerate(_batches(blocks, cfg.batch)):
        grids = np.stack([voxelize(b.features, b.norm_coords, cfg.res).data for b in batch])
        forward(state.params, grids.astype(state.params.config.dtype), "train", momentum=1.0 / (t + 1))


def init_centroids(state: TrainState, blocks):
    """k-means++ seeds from pathway features of the first ``init_batches`` batches."""
    cfg = state.config
    pools = {p: [] for p in _pathways(state)}
    for batch in _batches(blocks, cfg.batch)[:cfg.init_batches]:
        flip, j1, j2 = _sample_transforms(state, len(batch))
        pb = pathway_forward(batch, state.params, flip, j1, j2, cfg.res, "eval", _pathways(state))
        for p in pools:
            for s in pb.block_slices():
                f = pb.features[p][s]
                take = state.rng.choice(len(f), size=min(cfg.init_points, len(f)), replace=False)
                pools[p].append(f[np.sort(take)])
    for p, chunks in pools.items():
        seeds = kmeans_pp(np.concatenate(chunks), cfg.classes, state.rng)
        state.centroids[p] = CentroidSet.from_centroids(seeds, pathway=p + 1)


def cluster_phase(state: TrainState, blocks):
    """Stream all blocks in eval mode, assign labels and refine centroids per pathway."""
    cfg = state.config
    if state.centroids[_pathways(state)[0]] is None:
        init_centroids(state, blocks)
    k = cfg.classes
    hist = {p: np.zeros(k, dtype=np.int64) for p in _pathways(state)}
    for batch in _batches(blocks, cfg.batch):
        flip, j1, j2 = _sample_transforms(state, len(batch))
        pb = pathway_forward(batch, state.params, flip, j1, j2, cfg.res, "eval", _pathways(state))
        for p in _pathways(state):
            cs = state.centroids[p]
            for blk, s in zip(pb.blocks, pb.block_slices()):
                f = pb.features[p][s]
                lab = assign_labels(f, blk.sp_ids, cs)
                minibatch_update(cs, f, lab, cfg.perturb, state.rng)
                hist[p] += label_histogram(lab, k)
    new_weights = list(state.weights)
    for p, h in hist.items():
        state.centroids[p], h = handle_degenerate(state.centroids[p], h, state.rng, cfg.split_sigma)
        state.histograms[p] = h
        new_weights[p] = class_weights(h)
    return new_weights


def train_phase(state: TrainState, blocks):
    cfg = state.config
    order = state.rng.permutation(len(blocks))
    losses = []
    cs = state.centroids
    w = state.weights
    single = cfg.single_pathway
    for idx in _batches(order, cfg.batch):
        batch = [blocks[i] for i in idx]
        flip, j1, j2 = _sample_transforms(state, len(batch))
        pb = pathway_forward(batch, state.params, flip, j1, j2, cfg.res, "train", _pathways(state))
        l1 = None if single else batch_labels(pb, P1, cs[P1])
        l2 = batch_labels(pb, P2, cs[P2])
        loss, _, grads = two_pathway_loss(pb, l1, l2, cs[P1], cs[P2], w[P1], w[P2], single)
        pgrads = pathway_backward(state.params, pb, grads, cfg.res)
        sgd_step(state.params, pgrads, cfg.lr, cfg.wd)
        losses.append(loss)
    return float(np.mean(losses))


def run_epoch(state: TrainState, blocks):
    """One clustering phase followed by one training phase."""
    if not blocks:
        raise ValueError("no blocks to train on")
    if state.epoch == 0 and state.config.calibrate_bn:
        calibrate_batchnorm(state, blocks)
    new_weights = cluster_phase(state, blocks)
    loss = train_phase(state, blocks)
    state.weights = new_weights  # re-weighting takes effect from the next epoch
    state.epoch += 1
    log.info("epoch %d: loss %.5f, histogram %s", state.epoch, loss,
             state.histograms[state.inference_pathway].tolist())
    return loss


# ---------------------------------------------------------------------------
# inference


def scene_features(params, cloud: PointCloud, cfg: Config, sp_ids=None, seed=0):
    """Pathway-2 (untransformed) eval-mode features for every point of ``cloud``."""
    blocks = cover_blocks(cloud, cfg.block, cfg.pts, seed, sp_ids)
    out = np.zeros((len(cloud), params.config.widths[-1]))
    ident = [ColorJitter()] * cfg.batch
    for batch in _batches(blocks, cfg.batch):
        pb = pathway_forward(batch, params, FlipSpec(), ident, ident, cfg.res, "eval", (P2,))
        for blk, s in zip(batch, pb.block_slices()):
            out[blk.point_indices] = pb.features[P2][s]
    return out


def infer_labels(state: TrainState, cloud: PointCloud, sp_ids):
    """Per-point labels from the inference centroids with a scene-level superpoint constraint."""
    if cloud.normals is None:
        raise ValueError("cloud is not preprocessed (no normals); run preprocess first")
    cs = state.centroids[state.inference_pathway]
    if cs is None:
        raise ValueError("model has no centroids; train it first")
    sp_ids = np.asarray(sp_ids)
    if len(sp_ids) != len(cloud):
        raise ValueError("superpoint ids do not match the cloud")
    feats = scene_features(state.params, cloud, state.config, sp_ids, seed=state.config.seed)
    return assign_labels(feats, sp_ids, cs)


def evaluate_scenes(state: TrainState, scenes, epoch=None):
    pred = np.concatenate([infer_labels(state, sc.cloud, sc.sp_ids) for sc in scenes])
    gt = np.concatenate([sc.cloud.gt_labels for sc in scenes])
    return evaluate(pred, gt, state.config.classes, epoch)


def train(scenes, cfg: Config, evaluate_each_epoch=False, params=None):
    """Full training run. Returns (state, per-epoch reports)."""
    state = init_state(cfg, params)
    blocks = training_blocks(scenes, cfg)
    log.info("training on %d blocks from %d scenes", len(blocks), len(scenes))
    reports = []
    for _ in range(cfg.epochs):
        run_epoch(state, blocks)
        if evaluate_each_epoch:
            rep = evaluate_scenes(state, scenes, state.epoch)
            log.info("epoch %d: %s", state.epoch, rep.to_text().splitlines()[0])
            reports.append(rep)
    return state, reports


# ---------------------------------------------------------------------------
# checkpoints


def state_bytes(state: TrainState) -> bytes:
    meta = {
        "config": state.config.to_dict(),
        "network": state.params.config.to_dict(),
        "epoch": state.epoch,
        "rng": state.rng.bit_generator.state,
    }
    tensors = network_tensors(state.params)
    for p in (P1, P2):
        if state.centroids[p] is not None:
            tensors[f"centroids.{p + 1}"] = state.centroids[p].centroids
            tensors[f"counts.{p + 1}"] = state.centroids[p].counts
        if state.histograms[p] is not None:
            tensors[f"histogram.{p + 1}"] = state.histograms[p]
        tensors[f"weights.{p + 1}"] = state.weights[p]
    return checkpoint.dumps(meta, tensors)


def save_state(path, state):
    with open(path, "wb") as fh:
        fh.write(state_bytes(state))


def state_from_bytes(data) -> TrainState:
    meta, tensors = checkpoint.loads(data)
    cfg = Config.from_dict(meta["config"])
    net = meta["network"]
    params = network_from_tensors(NetworkConfig(**{**net, "widths": tuple(net["widths"])}), tensors)
    bitgen = np.random.PCG64()
    bitgen.state = meta["rng"]
    state = TrainState(params, cfg, np.random.Generator(bitgen), epoch=meta["epoch"])
    for p in (P1, P2):
        if f"centroids.{p + 1}" in tensors:
            state.centroids[p] = CentroidSet(tensors[f"centroids.{p + 1}"], tensors[f"counts.{p + 1}"], p + 1)
        state.histograms[p] = tensors.get(f"histogram.{p + 1}")
        state.weights[p] = tensors[f"weights.{p + 1}"]
    return state


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
