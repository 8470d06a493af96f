import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from u3ds3.pointcloud import (PlyError, PointCloud, SceneSpec, assemble_features, cover_blocks,
                              estimate_normals, gen_synthetic, grid_downsample, load_ply,
                              pca_normals, sample_blocks, tile_indices, write_ply)


def _write(tmp_path, text, name="c.ply"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEADER = "ply\nformat ascii 1.0\nelement vertex {n}\n{props}end_header\n"


def _ply(rows, props=("float x", "float y", "float z")):
    body = "".join(f"property {p}\n" for p in props)
    return HEADER.format(n=len(rows), props=body) + "".join(r + "\n" for r in rows)


# ---------------------------------------------------------------------------
# PLY


def test_xyz_only_file(tmp_path):
    cloud = load_ply(_write(tmp_path, _ply(["0 0 0", "1 0 0", "0 1 0"])))
    assert len(cloud) == 3
    assert cloud.colors is None and cloud.normals is None and cloud.gt_labels is None


def test_uchar_color_rescaled(tmp_path):
    props = ("float x", "float y", "float z", "uchar red", "uchar green", "uchar blue")
    cloud = load_ply(_write(tmp_path, _ply(["0 0 0 255 0 51"], props)))
    assert cloud.colors.tolist() == [[1.0, 0.0, 0.2]]


def test_float_colors_kept(tmp_path):
    props = ("float x", "float y", "float z", "float red", "float green", "float blue")
    cloud = load_ply(_write(tmp_path, _ply(["0 0 0 0.5 0.25 1"], props)))
    assert cloud.colors.tolist() == [[0.5, 0.25, 1.0]]


def test_short_body_reports_count_mismatch(tmp_path):
    text = HEADER.format(n=5, props="property float x\nproperty float y\nproperty float z\n")
    text += "0 0 0\n" * 4
    with pytest.raises(PlyError, match="vertex count mismatch"):
        load_ply(_write(tmp_path, text))


@pytest.mark.parametrize("text, line", [
    ("plx\n", 1),
    ("ply\nformat binary_little_endian 1.0\n", 2),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 0 abc\n", 8),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 0\n", 8),
])
def test_malformed_input_carries_line(tmp_path, text, line):
    with pytest.raises(PlyError) as err:
        load_ply(_write(tmp_path, text))
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    n = 50
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = rng.integers(0, 256, size=(n, 3)) / 255.0
    cloud = PointCloud(rng.random((n, 3)) * 10, colors, normals, rng.integers(0, 5, n))
    path = tmp_path / "rt.ply"
    write_ply(path, cloud)
    back = load_ply(path)
    np.testing.assert_allclose(back.coords, cloud.coords, rtol=1e-9)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-9)
    np.testing.assert_array_equal(back.colors, cloud.colors)
    np.testing.assert_array_equal(back.gt_labels, cloud.gt_labels)


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), colors=np.full((2, 3), 1.5))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.nan]]))


# ---------------------------------------------------------------------------
# downsampling


def test_same_cell_points_merge_to_midpoint():
    cloud = PointCloud(np.array([[0.005, 0.005, 0.005], [0.015, 0.005, 0.005]]))
    out = grid_downsample(cloud, 0.03)
    np.testing.assert_allclose(out.coords, [[0.01, 0.005, 0.005]])


def test_distant_points_unchanged():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out = grid_downsample(PointCloud(pts), 0.03)
    np.testing.assert_allclose(np.sort(out.coords, axis=0), pts)


def test_plane_cell_count_matches_enumeration():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.random((10_000, 2)), np.zeros(10_000)])
    out = grid_downsample(PointCloud(pts), 0.03)
    occupied = {(int(np.floor(x / 0.03)), int(np.floor(y / 0.03))) for x, y, _ in pts}
    assert len(out) == len(occupied)
    assert abs(len(out) - 1089) / 1089 < 0.1


def test_downsample_majority_label():
    pts = np.array([[0.001, 0, 0], [0.002, 0, 0], [0.003, 0, 0]])
    out = grid_downsample(PointCloud(pts, gt_labels=np.array([2, 1, 2])), 0.03)
    assert out.gt_labels.tolist() == [2]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(0.01, 0.5), st.integers(0, 10_000))
def test_downsample_one_point_per_cell(n, cell, seed):
    pts = np.random.default_rng(seed).random((n, 3)) * 2 - 1
    out = grid_downsample(PointCloud(pts), cell)
    keys = np.floor(pts / cell).astype(np.int64)
    assert len(out) == len(np.unique(keys, axis=0))
    assert len(np.unique(np.floor(out.coords / cell).astype(np.int64), axis=0)) == len(out)


# ---------------------------------------------------------------------------
# normals


def test_plane_normals():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.random((300, 2)), np.zeros(300)])
    normals, _ = pca_normals(pts, 10)
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (300, 1)), atol=1e-6)


def test_sign_rule_on_vertical_plane():
    rng = np.random.default_rng(2)
    pts = np.column_stack([np.zeros(200), rng.random((200, 2))])
    normals, _ = pca_normals(pts, 10)
    np.testing.assert_allclose(normals, np.tile([1.0, 0.0, 0.0], (200, 1)), atol=1e-6)


def test_sphere_normals_radial():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(5000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    normals, _ = pca_normals(pts, 20)
    cos = np.abs((normals * pts).sum(axis=1))
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0


def test_pca_normals_needs_enough_points():
    with pytest.raises(ValueError):
        pca_normals(np.zeros((5, 3)), 20)


# ---------------------------------------------------------------------------
# blocks and features


def _flat_cloud(n, extent, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.random((n, 2)) * extent, rng.random(n) * 0.1])
    return estimate_normals(PointCloud(pts, rng.random((n, 3))), 10)


def test_four_tiles_on_3m_square():
    cloud = _flat_cloud(20_000, 3.0)
    _, n_tiles = tile_indices(cloud.coords, 1.5)
    assert n_tiles.tolist() == [2, 2]
    assert len(sample_blocks(cloud, 1.5, 4096)) == 4


def test_full_tile_is_permutation():
    cloud = _flat_cloud(4096, 1.0)
    (blk,) = sample_blocks(cloud, 1.5, 4096)
    assert sorted(blk.point_indices.tolist()) == list(range(4096))


def test_small_tile_topped_up_with_its_own_points():
    cloud = _flat_cloud(100, 1.0)
    (blk,) = sample_blocks(cloud, 1.5, 4096)
    assert len(blk.point_indices) == 4096
    assert set(blk.point_indices.tolist()) == set(range(100))


def test_tiny_tiles_dropped():
    cloud = _flat_cloud(50, 1.0)
    assert sample_blocks(cloud, 1.5, 4096) == []


def test_cover_blocks_see_every_point():
    cloud = _flat_cloud(9000, 3.0)
    blocks = cover_blocks(cloud, 1.5, 1024)
    seen = np.concatenate([b.point_indices for b in blocks])
    assert set(seen.tolist()) == set(range(9000))
    assert all(len(b.point_indices) == 1024 for b in blocks)


def test_feature_columns():
    coords = np.array([[3.0, 0.0, 0.0], [3.75, 1.0, 1.5], [4.5, 2.0, 3.0]])
    normals = np.tile([0.0, 0.0, 1.0], (3, 1))
    f = assemble_features(coords, None, normals, [0.0, 0.0, 0.0], [4.5, 2.0, 3.0])
    assert f.shape == (3, 12)
    assert f[1, 0] == 0.5
    assert np.all(f[:, 3:6] == 0)
    assert f[2, 11] == 1.0


def test_block_features_in_unit_range():
    cloud = _flat_cloud(5000, 2.0)
    for blk in sample_blocks(cloud, 1.5, 2048):
        assert blk.features.shape == (2048, 12)
        assert blk.norm_coords.min() >= 0 and blk.norm_coords.max() <= 1
        assert blk.features[:, 9:].min() >= 0 and blk.features[:, 9:].max() <= 1


# ---------------------------------------------------------------------------
# synthetic scenes


def test_floor_density():
    spec = SceneSpec(extent=(4.0, 4.0, 1.0), n_boxes=0, n_spheres=0, density=1000, seed=5)
    cloud = gen_synthetic(spec)
    floor = (cloud.gt_labels == 0).sum()
    assert abs(floor - 16_000) / 16_000 < 0.02


def test_noiseless_floor_is_flat():
    cloud = gen_synthetic(SceneSpec(noise=0.0, seed=1))
    assert np.all(cloud.coords[cloud.gt_labels == 0, 2] == 0.0)


def test_synthetic_is_deterministic():
    a, b = gen_synthetic(SceneSpec(seed=9)), gen_synthetic(SceneSpec(seed=9))
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.colors, b.colors)
    assert np.array_equal(a.gt_labels, b.gt_labels)


def test_synthetic_classes_and_colors():
    spec = SceneSpec(n_boxes=1, n_spheres=1, n_cylinders=1, seed=2)
    cloud = gen_synthetic(spec)
    assert set(np.unique(cloud.gt_labels).tolist()) == set(range(spec.n_classes))
    assert cloud.colors.min() >= 0 and cloud.colors.max() <= 1


def test_scene_spec_file(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("extent = 2, 3, 1\nn_boxes = 1\nn_spheres = 0\nseed = 4\n")
    spec = SceneSpec.from_file(p)
    assert spec.extent == (2.0, 3.0, 1.0) and spec.n_classes == 3 and spec.seed == 4
