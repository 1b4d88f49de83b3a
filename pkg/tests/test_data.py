import math

import numpy as np
import pytest

from dpfa.data import (
    BACKGROUND_CLASSES,
    SCENE_CLASSES,
    LabeledCloud,
    ParseError,
    SceneSpec,
    SchemaError,
    block_members,
    cloud_from_array,
    cover_blocks,
    load_cloud,
    load_split,
    save_cloud,
    save_split,
    scene_surfaces,
    split_blocks,
    synthesize_dataset,
    synthesize_object,
    synthesize_scene,
)


def uniform_room(w, d, n, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, d, n), rng.uniform(0, 2.5, n)])
    return LabeledCloud(coords, rng.random((n, 3)), rng.integers(0, 3, n), ["a", "b", "c"])


def test_two_by_one_room_gives_two_blocks():
    blocks = split_blocks(uniform_room(2.0, 1.0, 5000), 1.0, 256, rng=0)
    assert len(blocks) == 2
    assert all(b.features.shape == (256, 9) for b in blocks)


def test_large_block_sampled_without_replacement():
    cloud = uniform_room(1.0, 1.0, 10000)
    (b,) = split_blocks(cloud, 1.0, 4096, rng=1)
    assert len(np.unique(b.indices)) == 4096


def test_small_block_sampled_with_replacement_covers_points():
    cloud = uniform_room(1.0, 1.0, 50)
    # P(some point missing) <= 50 * (49/50)^4096, about 1e-34 per draw
    for seed in range(20):
        (b,) = split_blocks(cloud, 1.0, 4096, rng=seed)
        assert len(b.indices) == 4096
        assert set(b.indices.tolist()) == set(range(50))


def test_sparse_blocks_skipped_and_empty_cloud():
    coords = np.array([[0.1, 0.1, 0.0]] * 40 + [[1.5, 0.5, 1.0]] * 5)
    cloud = LabeledCloud(coords, np.zeros((45, 3)), np.zeros(45, int), ["a"])
    blocks = split_blocks(cloud, 1.0, 64, min_points=32, rng=0)
    assert len(blocks) == 1 and set(blocks[0].indices.tolist()) <= set(range(40))
    empty = LabeledCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int), ["a"])
    assert split_blocks(empty) == []
    with pytest.raises(ValueError):
        split_blocks(cloud, 0.0)


def test_block_feature_invariants():
    cloud = synthesize_scene(SceneSpec(seed=4))
    z0, z1 = cloud.coords[:, 2].min(), cloud.coords[:, 2].max()
    for b in split_blocks(cloud, 1.0, 512, rng=2, dtype=np.float64):
        f = b.features
        assert np.array_equal(f[:, :3], cloud.coords[b.indices])
        assert np.array_equal(f[:, 3:6], cloud.colors[b.indices])
        assert f[:, 6:9].min() >= 0 and f[:, 6:9].max() <= 1
        xy = f[:, :2]
        assert np.all(xy >= b.origin - 1e-12) and np.all(xy <= b.origin + 1.0 + 1e-12)
        assert np.allclose(f[:, 8], (f[:, 2] - z0) / (z1 - z0))
        assert np.array_equal(b.labels, cloud.labels[b.indices])


def test_members_cover_every_point_of_kept_blocks():
    cloud = synthesize_scene(SceneSpec(seed=5))
    members = block_members(cloud, 1.0, 32)
    union = np.concatenate([m for _, m in members])
    assert len(union) == len(np.unique(union)) == len(cloud)


def test_cover_blocks_reach_every_point():
    cloud = synthesize_scene(SceneSpec(seed=6))
    seen = np.zeros(len(cloud), bool)
    for b in cover_blocks(cloud, 1.0, 1000, rng=0):
        assert len(b) == 1000
        seen[b.indices] = True
    assert seen.all()


# --- synthetic scenes --------------------------------------------------------


def test_same_seed_bit_identical():
    a = synthesize_scene(SceneSpec(seed=11))
    b = synthesize_scene(SceneSpec(seed=11))
    assert a.equals(b)
    assert not a.equals(synthesize_scene(SceneSpec(seed=12)))


def test_no_objects_only_background():
    cloud = synthesize_scene(SceneSpec(seed=2, boxes=0, cylinders=0))
    names = {SCENE_CLASSES[i] for i in np.unique(cloud.labels)}
    assert names <= set(BACKGROUND_CLASSES)


def _oracle_area(s):
    p = s.params
    if s.kind == "rect":
        # axis-aligned patches: product of the two non-zero edge lengths
        return float(np.abs(p["u"]).sum() * np.abs(p["v"]).sum())
    if s.kind == "cyl":
        return 2 * math.pi * p["r"] * p["h"]
    return math.pi * p["r"] ** 2


def test_surface_counts_match_density_times_area():
    spec = SceneSpec(seed=7, boxes=4, cylinders=2)
    (W, D, H), surfaces = scene_surfaces(spec)
    for s in surfaces:
        assert abs(s.count - s.density * _oracle_area(s)) <= 1.0
    floor = surfaces[0]
    assert floor.count == round(spec.density * W * D)
    cloud = synthesize_scene(spec)
    assert len(cloud) == sum(s.count for s in surfaces)


def test_background_points_on_their_planes():
    spec = SceneSpec(seed=8)
    (W, D, H), _ = scene_surfaces(spec)
    cloud = synthesize_scene(spec)
    x, y, z = cloud.coords.T
    lab = np.array(SCENE_CLASSES)[cloud.labels]
    tol = 1e-6
    assert np.all(np.abs(z[lab == "floor"]) <= tol)
    assert np.all(np.abs(z[lab == "ceiling"] - H) <= tol)
    wall = lab == "wall"
    dist = np.min(np.abs(np.stack([x[wall], x[wall] - W, y[wall], y[wall] - D])), axis=0)
    assert np.all(dist <= tol)


def test_colors_valid_and_class_consistent():
    cloud = synthesize_scene(SceneSpec(seed=9, color_noise=0.5))
    assert cloud.colors.min() >= 0 and cloud.colors.max() <= 1
    quiet = synthesize_scene(SceneSpec(seed=9, color_noise=0.0))
    for c in np.unique(quiet.labels):
        assert len(np.unique(quiet.colors[quiet.labels == c], axis=0)) == 1


def test_degenerate_extents_rejected():
    with pytest.raises(ValueError):
        SceneSpec(width=(0.0, 1.0))
    with pytest.raises(ValueError):
        SceneSpec(height=(3.0, 2.0))
    with pytest.raises(ValueError):
        SceneSpec(boxes=-1)


def test_dataset_scenes_differ_and_are_reproducible():
    a = synthesize_dataset(SceneSpec(seed=1), 3)
    b = synthesize_dataset(SceneSpec(seed=1), 3)
    assert all(x.equals(y) for x, y in zip(a, b))
    assert not a[0].equals(a[1])
    tail = synthesize_dataset(SceneSpec(seed=1), 1, offset=2)
    assert tail[0].equals(a[2])


def test_object_clouds():
    rng = np.random.default_rng(0)
    obj = synthesize_object("chair", rng, 300)
    assert len(obj) == 300 and len(np.unique(obj.labels)) == 1
    assert np.linalg.norm(obj.coords, axis=1).max() == pytest.approx(1.0)


# --- text format -----------------------------------------------------------


def test_round_trip_is_lossless(tmp_path):
    cloud = synthesize_scene(SceneSpec(seed=3))
    save_cloud(cloud, tmp_path / "a.txt")
    assert load_cloud(tmp_path / "a.txt").equals(cloud)
    first = (tmp_path / "a.txt").read_text().splitlines()[0]
    assert first == "pointcloud v1 classes=" + ",".join(SCENE_CLASSES)


def test_empty_file_with_header(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("pointcloud v1 classes=a,b\n")
    c = load_cloud(p)
    assert len(c) == 0 and c.class_table == ["a", "b"]


def test_short_line_names_line_number(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("pointcloud v1 classes=a\n0 0 0 0.5 0.5 0.5 0\n1 2 3 0.1 0.2 0.3\n")
    with pytest.raises(ParseError, match=r":3: expected 7 fields, got 6"):
        load_cloud(p)


def test_bad_number_and_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("pointcloud v1 classes=a\n0 0 x 0.5 0.5 0.5 0\n")
    with pytest.raises(ParseError, match=":2:"):
        load_cloud(p)
    p.write_text("xyz\n")
    with pytest.raises(ParseError, match=":1:"):
        load_cloud(p)


def test_schema_errors(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("pointcloud v1 classes=a,sofa2\n0 0 0 0.5 0.5 0.5 1\n")
    with pytest.raises(SchemaError, match="sofa2"):
        load_cloud(p, class_table=["a", "b"])
    p.write_text("pointcloud v1 classes=a\n0 0 0 0.5 0.5 0.5 3\n")
    with pytest.raises(SchemaError, match=":2:"):
        load_cloud(p)
    with pytest.raises(SchemaError):
        LabeledCloud(np.zeros((1, 3)), np.full((1, 3), 2.0), [0], ["a"])


def test_split_layout(tmp_path):
    clouds = synthesize_dataset(SceneSpec(seed=0, boxes=1, cylinders=0), 2)
    paths = save_split(tmp_path, "train", clouds)
    assert [p.relative_to(tmp_path).as_posix() for p in paths] == ["train/scene_000.txt", "train/scene_001.txt"]
    loaded = load_split(tmp_path, "train")
    assert all(a.equals(b) for a, b in zip(clouds, loaded))
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "val")


def test_converter_rescales_8bit_colours():
    arr = np.array([[0.0, 1.0, 2.0, 255.0, 0.0, 51.0, 1]])
    c = cloud_from_array(arr, ["a", "b"])
    assert np.allclose(c.colors, [[1.0, 0.0, 0.2]]) and c.labels.tolist() == [1]
