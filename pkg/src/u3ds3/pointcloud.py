"""Point cloud containers, ASCII PLY I/O, preprocessing and block sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

BLOCK_POINTS = 4096
MIN_TILE_POINTS = 64
N_FEATURES = 12


class PlyError(ValueError):
    """Raised for malformed PLY input. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class PointCloud:
    coords: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    gt_labels: np.ndarray | None = None
    scene_id: str = "scene"

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) == 0:
            raise ValueError(f"coords must be (N, 3) with N > 0, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords contain non-finite values")
        n = len(self.coords)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise ValueError("colors must be (N, 3)")
            if self.colors.min() < 0.0 or self.colors.max() > 1.0:
                raise ValueError("colors must lie in [0, 1]")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError("normals must be (N, 3)")
            if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")
        if self.gt_labels is not None:
            self.gt_labels = np.ascontiguousarray(self.gt_labels, dtype=np.int64)
            if self.gt_labels.shape != (n,):
                raise ValueError("gt_labels must be (N,)")
            if self.gt_labels.min() < 0:
                raise ValueError("gt_labels must be non-negative")

    def __len__(self):
        return len(self.coords)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.coords[idx], pick(self.colors), pick(self.normals),
                          pick(self.gt_labels), self.scene_id)


@dataclass
class Block:
    point_indices: np.ndarray
    features: np.ndarray
    norm_coords: np.ndarray
    sp_ids: np.ndarray
    gt_labels: np.ndarray | None = None
    scene_id: str = "scene"


@dataclass
class SceneSpec:
    """Parameters for a synthetic room.

    Objects are placed on the floor. Class ids: floor 0, walls 1, then one id
    per object kind that is present, in the order boxes, spheres, cylinders.
    """

    extent: tuple[float, float, float] = (3.0, 3.0, 1.5)
    n_boxes: int = 2
    n_spheres: int = 2
    n_cylinders: int = 0
    palette: tuple[tuple[float, float, float], ...] = (
        (0.55, 0.45, 0.35),
        (0.85, 0.85, 0.80),
        (0.80, 0.15, 0.15),
        (0.15, 0.35, 0.85),
        (0.20, 0.75, 0.25),
    )
    density: float = 1000.0
    noise: float = 0.005
    color_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.noise < 0 or self.color_noise < 0:
            raise ValueError("noise must be non-negative")
        if len(self.palette) < self.n_classes:
            raise ValueError(f"palette has {len(self.palette)} colors, need {self.n_classes}")

    @property
    def object_kinds(self):
        counts = {"box": self.n_boxes, "sphere": self.n_spheres, "cylinder": self.n_cylinders}
        return [k for k, c in counts.items() if c > 0]

    @property
    def n_classes(self):
        return 2 + len(self.object_kinds)

    @classmethod
    def from_file(cls, path):
        """Read a ``key = value`` file. Tuples are comma separated."""
        kw = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "extent":
                kw[key] = tuple(float(v) for v in value.split(","))
            elif key == "palette":
                vals = [float(v) for v in value.replace(";", ",").split(",")]
                kw[key] = tuple(tuple(vals[i:i + 3]) for i in range(0, len(vals), 3))
            elif key in ("n_boxes", "n_spheres", "n_cylinders", "seed"):
                kw[key] = int(value)
            elif key in ("density", "noise", "color_noise"):
                kw[key] = float(value)
            else:
                raise ValueError(f"unknown scene spec key {key!r}")
        return cls(**kw)


# ---------------------------------------------------------------------------
# PLY


_PLY_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}
_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint",
              "int8", "uint8", "int16", "uint16", "int32", "uint32"}


def load_ply(path) -> PointCloud:
    """Parse an ASCII PLY file with a vertex element.

    Colors stored as integer types are rescaled from 0..255 to [0, 1].
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError("missing 'ply' magic", 1)

    elements = []  # (name, count, [(prop, type)])
    fmt = None
    lineno = 1
    header_end = None
    for lineno in range(2, len(lines) + 1):
        tokens = lines[lineno - 1].split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise PlyError("malformed format line", lineno)
            fmt = tokens[1]
            if fmt != "ascii":
                raise PlyError(f"unsupported PLY format {fmt!r} (ascii only)", lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyError("malformed element line", lineno)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before any element", lineno)
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyError("malformed list property", lineno)
                elements[-1][2].append((tokens[4], "list"))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise PlyError(f"malformed property line {lines[lineno - 1]!r}", lineno)
                elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            header_end = lineno
            break
        else:
            raise PlyError(f"unexpected header keyword {tokens[0]!r}", lineno)
    if header_end is None:
        raise PlyError("missing end_header", lineno)
    if fmt is None:
        raise PlyError("missing format line", header_end)

    body = lines[header_end:]
    cursor = 0
    vertex = None
    for name, count, props in elements:
        rows = body[cursor:cursor + count]
        if name == "vertex":
            if len(rows) < count or any(not r.strip() for r in rows):
                raise PlyError(
                    f"vertex count mismatch: header declares {count}, found "
                    f"{sum(1 for r in rows if r.strip())}", header_end + cursor + len(rows) + 1)
            vertex = (props, rows, header_end + cursor + 1)
        cursor += count
    if vertex is None:
        raise PlyError("no vertex element", header_end)
    trailing = [r for r in body[cursor:] if r.strip()]
    if trailing:
        raise PlyError("vertex count mismatch: extra rows after declared elements",
                       header_end + cursor + 1)

    props, rows, first_line = vertex
    names = [p for p, _ in props]
    if any(t == "list" for _, t in props):
        raise PlyError("list properties on vertex are not supported", first_line)
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}", header_end)
    data = np.empty((len(rows), len(names)), dtype=np.float64)
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != len(names):
            raise PlyError(f"expected {len(names)} values, got {len(parts)}", first_line + i)
        try:
            data[i] = [float(p) for p in parts]
        except ValueError:
            raise PlyError(f"non-numeric value in {row!r}", first_line + i) from None
    col = {n: data[:, j] for j, n in enumerate(names)}
    coords = np.stack([col["x"], col["y"], col["z"]], axis=1)
    bad = np.flatnonzero(~np.isfinite(coords).all(axis=1))
    if len(bad):
        raise PlyError("non-finite coordinate", first_line + int(bad[0]))

    colors = normals = labels = None
    types = dict(props)
    if all(c in col for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1)
        if types["red"] in _INT_TYPES:
            colors = colors / 255.0
        colors = np.clip(colors, 0.0, 1.0)
    if all(c in col for c in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
        nrm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(nrm > 0, normals / np.where(nrm > 0, nrm, 1.0), [0.0, 0.0, 1.0])
    if "label" in col:
        labels = col["label"].astype(np.int64)
    return PointCloud(coords, colors, normals, labels, scene_id=path.stem)


def write_ply(path, cloud: PointCloud, labels=None, colors=None):
    """Write ``cloud`` as ASCII PLY. ``labels``/``colors`` override the cloud's."""
    labels = cloud.gt_labels if labels is None else np.asarray(labels, dtype=np.int64)
    colors = cloud.colors if colors is None else np.asarray(colors, dtype=np.float64)
    n = len(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    cols = [cloud.coords]
    fmts = ["%.10g"] * 3
    if cloud.normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
        cols.append(cloud.normals)
        fmts += ["%.10g"] * 3
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        cols.append(np.rint(np.clip(colors, 0, 1) * 255.0))
        fmts += ["%d"] * 3
    if labels is not None:
        if labels.max(initial=0) > 255:
            raise ValueError("labels exceed uchar range")
        header.append("property uchar label")
        cols.append(labels[:, None])
        fmts.append("%d")
    header.append("end_header")
    table = np.concatenate([np.asarray(c, dtype=np.float64) for c in cols], axis=1)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, table, fmt=" ".join(fmts))


# ---------------------------------------------------------------------------
# preprocessing


def grid_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Keep one averaged point per occupied cell of a grid with pitch ``cell``."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    keys = np.floor(cloud.coords / cell).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = len(counts)

    def cell_mean(a):
        out = np.zeros((m, a.shape[1]))
        np.add.at(out, inv, a)
        return out / counts[:, None]

    coords = cell_mean(cloud.coords)
    colors = None if cloud.colors is None else np.clip(cell_mean(cloud.colors), 0.0, 1.0)
    normals = None
    if cloud.normals is not None:
        s = cell_mean(cloud.normals)
        nrm = np.linalg.norm(s, axis=1, keepdims=True)
        normals = np.where(nrm > 1e-12, s / np.maximum(nrm, 1e-12), [0.0, 0.0, 1.0])
    labels = None
    if cloud.gt_labels is not None:
        n_cls = int(cloud.gt_labels.max()) + 1
        hist = np.bincount(inv * n_cls + cloud.gt_labels, minlength=m * n_cls).reshape(m, n_cls)
        labels = hist.argmax(axis=1)  # first maximum = smallest class id
    return PointCloud(coords, colors, normals, labels, cloud.scene_id)


def orient_normals(normals):
    """Flip so z >= 0; on z ties use x >= 0, then y >= 0."""
    tol = 1e-12
    n = normals.copy()
    z, x, y = n[:, 2], n[:, 0], n[:, 1]
    flip = (z < -tol) | ((np.abs(z) <= tol) & ((x < -tol) | ((np.abs(x) <= tol) & (y < 0))))
    n[flip] *= -1.0
    return n


def pca_normals(coords, k):
    """Return (normals, n_degenerate) from covariance of the k nearest neighbours."""
    n = len(coords)
    if not (n > k >= 3):
        raise ValueError(f"need N > k >= 3, got N={n}, k={k}")
    _, nbr = cKDTree(coords).query(coords, k=k)
    normals = np.empty((n, 3))
    degenerate = 0
    chunk = 65536
    for s in range(0, n, chunk):
        pts = coords[nbr[s:s + chunk]]
        pts = pts - pts.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", pts, pts) / k
        _, vecs = np.linalg.eigh(cov)
        nv = vecs[:, :, 0]
        flat = np.trace(cov, axis1=1, axis2=2) <= 1e-20
        nv[flat] = (0.0, 0.0, 1.0)
        degenerate += int(flat.sum())
        normals[s:s + chunk] = nv
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return orient_normals(normals), degenerate


def estimate_normals(cloud: PointCloud, k: int = 20) -> PointCloud:
    normals, degenerate = pca_normals(cloud.coords, k)
    if degenerate:
        log.warning("%d points had a degenerate neighbourhood; normal set to +z", degenerate)
    return PointCloud(cloud.coords, cloud.colors, normals, cloud.gt_labels, cloud.scene_id)


def assemble_features(coords, colors, normals, scene_min, scene_max):
    """Build the (n, 12) feature matrix for one block.

    Columns: block-normalized xyz, RGB (zeros when absent), normal, scene-normalized xyz.
    """
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = hi - lo
    block = np.where(span > 0, (coords - lo) / np.where(span > 0, span, 1.0), 0.5)
    sspan = np.asarray(scene_max, dtype=np.float64) - np.asarray(scene_min, dtype=np.float64)
    scene = np.where(sspan > 0, (coords - scene_min) / np.where(sspan > 0, sspan, 1.0), 0.5)
    rgb = np.zeros_like(coords) if colors is None else colors
    feats = np.concatenate([block, rgb, normals, np.clip(scene, 0.0, 1.0)], axis=1)
    return feats


def tile_indices(coords, block_xy):
    """Assign each point to an xy tile; returns (tile id per point, tiles per axis)."""
    lo = coords[:, :2].min(axis=0)
    ext = coords[:, :2].max(axis=0) - lo
    n_tiles = np.maximum(1, np.ceil(ext / block_xy - 1e-9)).astype(np.int64)
    t = np.floor((coords[:, :2] - lo) / block_xy).astype(np.int64)
    t = np.minimum(t, n_tiles - 1)
    return t[:, 0] * n_tiles[1] + t[:, 1], n_tiles


def _make_block(cloud, idx, sp_ids, scene_min, scene_max):
    normals = cloud.normals[idx]
    colors = None if cloud.colors is None else cloud.colors[idx]
    feats = assemble_features(cloud.coords[idx], colors, normals, scene_min, scene_max)
    return Block(
        point_indices=idx,
        features=feats,
        norm_coords=feats[:, 0:3].copy(),
        sp_ids=np.zeros(len(idx), dtype=np.int64) if sp_ids is None else sp_ids[idx],
        gt_labels=None if cloud.gt_labels is None else cloud.gt_labels[idx],
        scene_id=cloud.scene_id,
    )


def _require_normals(cloud):
    if cloud.normals is None:
        log.info("estimating normals for %s", cloud.scene_id)
        cloud = estimate_normals(cloud)
    return cloud


def sample_blocks(cloud: PointCloud, block_xy: float = 1.5, pts: int = BLOCK_POINTS,
                  seed: int = 0, sp_ids=None, min_points: int = MIN_TILE_POINTS):
    """Tile the scene on the xy plane and draw one fixed-size block per tile.

    Tiles with fewer than ``min_points`` points are dropped. Tiles holding at
    least ``pts`` points are sampled without replacement; smaller tiles keep
    every point once and are topped up by sampling with replacement.
    """
    if cloud is None or len(cloud) == 0:
        raise ValueError("cannot sample blocks from an empty cloud")
    cloud = _require_normals(cloud)
    rng = np.random.default_rng(seed)
    tiles, n_tiles = tile_indices(cloud.coords, block_xy)
    smin, smax = cloud.coords.min(axis=0), cloud.coords.max(axis=0)
    blocks = []
    order = np.argsort(tiles, kind="stable")
    bounds = np.searchsorted(tiles[order], np.arange(n_tiles.prod() + 1))
    for t in range(int(n_tiles.prod())):
        members = order[bounds[t]:bounds[t + 1]]
        if len(members) < min_points:
            continue
        if len(members) >= pts:
            idx = rng.choice(members, size=pts, replace=False)
        else:
            extra = rng.choice(members, size=pts - len(members), replace=True)
            idx = rng.permutation(np.concatenate([members, extra]))
        blocks.append(_make_block(cloud, idx, sp_ids, smin, smax))
    return blocks


def cover_blocks(cloud: PointCloud, block_xy: float = 1.5, pts: int = BLOCK_POINTS,
                 seed: int = 0, sp_ids=None, min_points: int = 1):
    """Split every tile into as many blocks as needed so each point is seen once.

    Used at inference time, where every point needs a feature.
    """
    cloud = _require_normals(cloud)
    rng = np.random.default_rng(seed)
    tiles, n_tiles = tile_indices(cloud.coords, block_xy)
    smin, smax = cloud.coords.min(axis=0), cloud.coords.max(axis=0)
    blocks = []
    order = np.argsort(tiles, kind="stable")
    bounds = np.searchsorted(tiles[order], np.arange(n_tiles.prod() + 1))
    for t in range(int(n_tiles.prod())):
        members = rng.permutation(order[bounds[t]:bounds[t + 1]])
        if len(members) < min_points:
            continue
        n_chunks = math.ceil(len(members) / pts)
        for chunk in np.array_split(members, n_chunks):
            fill = rng.choice(chunk, size=pts - len(chunk), replace=True)
            blocks.append(_make_block(cloud, np.concatenate([chunk, fill]), sp_ids, smin, smax))
    return blocks


# ---------------------------------------------------------------------------
# synthetic scenes


def _sample_rect(rng, n, origin, u, v):
    a, b = rng.random(n), rng.random(n)
    return origin + a[:, None] * u + b[:, None] * v


def _box_surface(rng, density, center, size):
    """Five faces (no bottom) of an axis-aligned box standing on z=0."""
    sx, sy, sz = size
    x0, y0 = center[0] - sx / 2, center[1] - sy / 2
    faces = [
        ((x0, y0, sz), (sx, 0, 0), (0, sy, 0)),
        ((x0, y0, 0), (sx, 0, 0), (0, 0, sz)),
        ((x0, y0 + sy, 0), (sx, 0, 0), (0, 0, sz)),
        ((x0, y0, 0), (0, sy, 0), (0, 0, sz)),
        ((x0 + sx, y0, 0), (0, sy, 0), (0, 0, sz)),
    ]
    out = []
    for o, u, v in faces:
        u, v = np.asarray(u, float), np.asarray(v, float)
        area = np.linalg.norm(np.cross(u, v))
        out.append(_sample_rect(rng, rng.poisson(density * area), np.asarray(o, float), u, v))
    return np.concatenate(out)


def _sphere_surface(rng, density, center, radius):
    n = rng.poisson(density * 4 * math.pi * radius ** 2)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = center + radius * d
    return pts[pts[:, 2] >= 0]


def _cylinder_surface(rng, density, center, radius, height):
    n_side = rng.poisson(density * 2 * math.pi * radius * height)
    th = rng.random(n_side) * 2 * math.pi
    side = np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th),
                     rng.random(n_side) * height], axis=1)
    n_top = rng.poisson(density * math.pi * radius ** 2)
    r = radius * np.sqrt(rng.random(n_top))
    th = rng.random(n_top) * 2 * math.pi
    top = np.stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th),
                    np.full(n_top, height)], axis=1)
    return np.concatenate([side, top])


def gen_synthetic(spec: SceneSpec) -> PointCloud:
    """Sample a room (floor, four walls) with primitive objects standing on the floor."""
    rng = np.random.default_rng(spec.seed)
    lx, ly, lz = spec.extent
    parts, labels = [], []

    def add(points, cls):
        parts.append(points)
        labels.append(np.full(len(points), cls, dtype=np.int64))

    add(_sample_rect(rng, rng.poisson(spec.density * lx * ly), np.zeros(3),
                     np.array([lx, 0, 0.0]), np.array([0, ly, 0.0])), 0)
    walls = [
        (np.array([0, 0, 0.0]), np.array([lx, 0, 0.0])),
        (np.array([0, ly, 0.0]), np.array([lx, 0, 0.0])),
        (np.array([0, 0, 0.0]), np.array([0, ly, 0.0])),
        (np.array([lx, 0, 0.0]), np.array([0, ly, 0.0])),
    ]
    for origin, u in walls:
        area = np.linalg.norm(u) * lz
        add(_sample_rect(rng, rng.poisson(spec.density * area), origin, u,
                         np.array([0, 0, lz])), 1)

    placed = []  # (cx, cy, radius) footprints for rejection sampling
    margin = 0.15
    for cls, kind in enumerate(spec.object_kinds, start=2):
        count = {"box": spec.n_boxes, "sphere": spec.n_spheres, "cylinder": spec.n_cylinders}[kind]
        for _ in range(count):
            for _attempt in range(100):
                if kind == "box":
                    size = rng.uniform([0.3, 0.3, 0.3], [0.7, 0.7, 0.8])
                    rad = 0.5 * math.hypot(size[0], size[1])
                elif kind == "sphere":
                    rad = rng.uniform(0.15, 0.35)
                else:
                    rad = rng.uniform(0.1, 0.25)
                    height = rng.uniform(0.4, 1.0)
                lo_x, hi_x = rad + margin, lx - rad - margin
                lo_y, hi_y = rad + margin, ly - rad - margin
                if lo_x >= hi_x or lo_y >= hi_y:
                    continue
                cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
                if all(math.hypot(cx - px, cy - py) > rad + pr + 0.05 for px, py, pr in placed):
                    break
            else:
                log.warning("could not place %s without overlap; skipping", kind)
                continue
            placed.append((cx, cy, rad))
            if kind == "box":
                add(_box_surface(rng, spec.density, (cx, cy), size), cls)
            elif kind == "sphere":
                add(_sphere_surface(rng, spec.density, np.array([cx, cy, rad]), rad), cls)
            else:
                add(_cylinder_surface(rng, spec.density, (cx, cy), rad, height), cls)

    coords = np.concatenate(parts)
    gt = np.concatenate(labels)
    if spec.noise > 0:
        coords = coords + rng.normal(scale=spec.noise, size=coords.shape)
    palette = np.asarray(spec.palette, dtype=np.float64)
    colors = palette[gt]
    if spec.color_noise > 0:
        colors = colors + rng.normal(scale=spec.color_noise, size=colors.shape)
    colors = np.clip(colors, 0.0, 1.0)
    return PointCloud(coords, colors, None, gt, scene_id=f"synth_{spec.seed}")
