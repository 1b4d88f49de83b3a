"""Point-cloud ingestion, block sampling and synthetic indoor scenes.

Text format (one cloud per file)::

    pointcloud v1 classes=<name0>,<name1>,...
    x y z r g b label_id
    ...

Coordinates are metres, colours lie in [0, 1], ``label_id`` indexes the
header's class list.  Values are written with ``repr`` so a save/load
round trip is lossless at 64-bit.  Datasets are laid out as
``<root>/<split>/<scene>.txt``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_PREFIX = "pointcloud v1"

SCENE_CLASSES = ("ceiling", "floor", "wall", "table", "chair", "sofa", "bookcase", "clutter")
BACKGROUND_CLASSES = ("ceiling", "floor", "wall")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class LabeledCloud:
    coords: np.ndarray  # (N, 3) metres
    colors: np.ndarray  # (N, 3) in [0, 1]
    labels: np.ndarray  # (N,)
    class_table: list

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_table = list(self.class_table)
        n = len(self.coords)
        if len(self.colors) != n or len(self.labels) != n:
            raise SchemaError(f"coords/colors/labels lengths differ: {n}, {len(self.colors)}, {len(self.labels)}")
        if not np.all(np.isfinite(self.coords)):
            raise SchemaError("non-finite coordinates")
        if n and (self.colors.min() < 0 or self.colors.max() > 1):
            raise SchemaError("colours must lie in [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_table)):
            raise SchemaError(f"label ids must lie in [0, {len(self.class_table)})")

    def __len__(self):
        return len(self.coords)

    def equals(self, other):
        return (
            self.class_table == other.class_table
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class PointCloudBlock:
    """One network input: ``features[:, :]`` = (x_r, y_r, z_r, r, g, b, x_b, y_b, z_b)."""

    features: np.ndarray
    labels: np.ndarray
    origin: np.ndarray  # (2,) lower xy corner of the footprint
    indices: np.ndarray  # source rows in the parent cloud

    @property
    def coords(self):
        return self.features[:, :3]

    def __len__(self):
        return len(self.features)


# ---------------------------------------------------------------------------
# block sampling
# ---------------------------------------------------------------------------


def block_grid(cloud: LabeledCloud, block_size=1.0):
    """Assign each point to a cell of a non-overlapping XY grid.

    Returns ``(cell_x, cell_y, nx, ny, xy_min)``.
    """
    if block_size <= 0:
        raise ValueError(f"block_size must be positive, got {block_size}")
    xy = cloud.coords[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    nx, ny = (max(1, math.ceil((hi[d] - lo[d]) / block_size)) for d in range(2))
    cx = np.minimum(np.floor((xy[:, 0] - lo[0]) / block_size).astype(np.int64), nx - 1)
    cy = np.minimum(np.floor((xy[:, 1] - lo[1]) / block_size).astype(np.int64), ny - 1)
    return cx, cy, nx, ny, lo


def block_features(cloud: LabeledCloud, idx, origin, block_size, z_range, dtype=np.float32):
    c = cloud.coords[idx]
    z0, height = z_range
    local = np.empty_like(c)
    local[:, :2] = np.clip((c[:, :2] - origin) / block_size, 0.0, 1.0)
    local[:, 2] = (c[:, 2] - z0) / height if height > 0 else 0.0
    return np.concatenate([c, cloud.colors[idx], local], axis=1).astype(dtype)


def block_members(cloud: LabeledCloud, block_size=1.0, min_points=32):
    """``[(origin, member_indices), ...]`` for every grid cell holding at least ``min_points`` points."""
    if len(cloud) == 0:
        return []
    cx, cy, nx, ny, lo = block_grid(cloud, block_size)
    cell = cx * ny + cy
    order = np.argsort(cell, kind="stable")
    bounds = np.searchsorted(cell[order], np.arange(nx * ny + 1))
    out = []
    for c in range(nx * ny):
        members = order[bounds[c] : bounds[c + 1]]
        if len(members) >= max(1, min_points):
            out.append((lo + block_size * np.array([c // ny, c % ny], dtype=np.float64), members))
    return out


def _z_range(cloud):
    z = cloud.coords[:, 2]
    return z.min(), z.max() - z.min()


def split_blocks(
    cloud: LabeledCloud,
    block_size=1.0,
    samples=4096,
    min_points=32,
    rng=None,
    dtype=np.float32,
) -> list[PointCloudBlock]:
    """Cut a room into ``block_size`` x ``block_size`` columns and sample each.

    Blocks with fewer than ``min_points`` points are skipped.  Each kept block
    yields exactly ``samples`` points: drawn without replacement when it has
    enough, with replacement otherwise.
    """
    rng = np.random.default_rng(rng)
    blocks = []
    for origin, members in block_members(cloud, block_size, min_points):
        pick = rng.choice(len(members), samples, replace=len(members) < samples)
        idx = members[pick]
        feats = block_features(cloud, idx, origin, block_size, _z_range(cloud), dtype)
        blocks.append(PointCloudBlock(feats, cloud.labels[idx].copy(), origin, idx))
    return blocks


def cover_blocks(cloud: LabeledCloud, block_size=1.0, samples=4096, rng=None, dtype=np.float32):
    """Blocks that jointly contain every point of the cloud at least once.

    Used for prediction: each grid cell is shuffled and cut into chunks of
    ``samples`` points; the last chunk is topped up with repeats.
    """
    if len(cloud) == 0:
        return []
    rng = np.random.default_rng(rng)
    cx, cy, nx, ny, lo = block_grid(cloud, block_size)
    z_range = _z_range(cloud)
    cell = cx * ny + cy
    blocks = []
    for c in np.unique(cell):
        members = rng.permutation(np.flatnonzero(cell == c))
        origin = lo + block_size * np.array([c // ny, c % ny], dtype=np.float64)
        for s in range(0, len(members), samples):
            idx = members[s : s + samples]
            if len(idx) < samples:
                idx = np.concatenate([idx, rng.choice(members, samples - len(idx))])
            feats = block_features(cloud, idx, origin, block_size, z_range, dtype)
            blocks.append(PointCloudBlock(feats, cloud.labels[idx].copy(), origin, idx))
    return blocks


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

# class -> (size ranges (w, d, h) in metres) for box primitives
_BOX_TEMPLATES = {
    "table": ((0.6, 1.2), (0.5, 0.8), (0.70, 0.80)),
    "chair": ((0.40, 0.50), (0.40, 0.50), (0.45, 0.90)),
    "sofa": ((1.2, 1.7), (0.7, 0.9), (0.40, 0.80)),
    "bookcase": ((0.6, 1.0), (0.25, 0.40), (1.5, 2.0)),
}
_CYLINDER_CLASS = "clutter"
_CYLINDER_TEMPLATE = ((0.10, 0.25), (0.20, 1.00))  # radius, height

DEFAULT_PALETTE = {
    "ceiling": (0.85, 0.85, 0.82),
    "floor": (0.55, 0.45, 0.35),
    "wall": (0.80, 0.78, 0.72),
    "table": (0.60, 0.42, 0.26),
    "chair": (0.30, 0.32, 0.55),
    "sofa": (0.55, 0.28, 0.28),
    "bookcase": (0.52, 0.38, 0.22),
    "clutter": (0.38, 0.55, 0.38),
}


@dataclass
class SceneSpec:
    """Everything that determines one synthetic room."""

    seed: int = 0
    width: tuple = (1.5, 2.0)  # x extent range, metres
    depth: tuple = (1.5, 2.0)
    height: tuple = (2.4, 2.8)
    boxes: int = 3
    cylinders: int = 1
    density: float = 400.0  # background points per m^2
    object_density: float = 1500.0  # object points per m^2
    color_noise: float = 0.06
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        for name in ("width", "depth", "height"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"degenerate {name} range {(lo, hi)}")
        if self.boxes < 0 or self.cylinders < 0:
            raise ValueError("object counts must be non-negative")
        if self.density <= 0 or self.object_density <= 0:
            raise ValueError("densities must be positive")

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))


@dataclass
class Surface:
    """A sampled patch: ``rect`` (origin + s*u + t*v), ``cyl`` side or ``disk`` cap."""

    label: int
    kind: str
    params: dict
    density: float

    @property
    def area(self):
        p = self.params
        if self.kind == "rect":
            return float(np.linalg.norm(np.cross(p["u"], p["v"])))
        if self.kind == "cyl":
            return 2.0 * math.pi * p["r"] * p["h"]
        return math.pi * p["r"] ** 2

    @property
    def count(self):
        return int(round(self.density * self.area))

    def sample(self, rng):
        n, p = self.count, self.params
        if self.kind == "rect":
            st = rng.random((n, 2))
            return p["o"] + st[:, :1] * p["u"] + st[:, 1:] * p["v"]
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        if self.kind == "cyl":
            z = p["z0"] + p["h"] * rng.random(n)
            return np.stack([p["cx"] + p["r"] * np.cos(theta), p["cy"] + p["r"] * np.sin(theta), z], axis=1)
        rad = p["r"] * np.sqrt(rng.random(n))
        return np.stack([p["cx"] + rad * np.cos(theta), p["cy"] + rad * np.sin(theta), np.full(n, p["z"])], axis=1)


def _rect(label, o, u, v, density):
    return Surface(label, "rect", dict(o=np.array(o, float), u=np.array(u, float), v=np.array(v, float)), density)


def _box_surfaces(label, x0, y0, w, d, h, density):
    x1, y1 = x0 + w, y0 + d
    return [
        _rect(label, (x0, y0, h), (w, 0, 0), (0, d, 0), density),  # top
        _rect(label, (x0, y0, 0), (w, 0, 0), (0, 0, h), density),
        _rect(label, (x0, y1, 0), (w, 0, 0), (0, 0, h), density),
        _rect(label, (x0, y0, 0), (0, d, 0), (0, 0, h), density),
        _rect(label, (x1, y0, 0), (0, d, 0), (0, 0, h), density),
    ]


def room_surfaces(W, D, H, density, table=SCENE_CLASSES):
    """Floor, ceiling and the four walls of a ``W x D x H`` room anchored at the origin."""
    ceiling, floor, wall = (table.index(c) for c in ("ceiling", "floor", "wall"))
    return [
        _rect(floor, (0, 0, 0), (W, 0, 0), (0, D, 0), density),
        _rect(ceiling, (0, 0, H), (W, 0, 0), (0, D, 0), density),
        _rect(wall, (0, 0, 0), (W, 0, 0), (0, 0, H), density),
        _rect(wall, (0, D, 0), (W, 0, 0), (0, 0, H), density),
        _rect(wall, (0, 0, 0), (0, D, 0), (0, 0, H), density),
        _rect(wall, (W, 0, 0), (0, D, 0), (0, 0, H), density),
    ]


def _span(rng, lo, hi):
    # tolerant of hi < lo by rounding when an object fills the room
    return lo if hi <= lo else rng.uniform(lo, hi)


def _overlaps(fp, placed, gap=0.05):
    x0, y0, x1, y1 = fp
    return any(x0 < b[2] + gap and b[0] < x1 + gap and y0 < b[3] + gap and b[1] < y1 + gap for b in placed)


def scene_surfaces(spec: SceneSpec):
    """Room extents and the list of surfaces a scene is sampled from."""
    rng = np.random.default_rng([spec.seed, 0])
    W, D, H = (rng.uniform(*getattr(spec, a)) for a in ("width", "depth", "height"))
    surfaces = room_surfaces(W, D, H, spec.density)
    placed = []
    margin = 0.05
    box_classes = list(_BOX_TEMPLATES)
    for _ in range(spec.boxes):
        name = box_classes[rng.integers(len(box_classes))]
        (wl, wh), (dl, dh), (hl, hh) = _BOX_TEMPLATES[name]
        w, d, h = rng.uniform(wl, wh), rng.uniform(dl, dh), min(rng.uniform(hl, hh), H - 0.1)
        if rng.random() < 0.5:
            w, d = d, w
        w, d = min(w, W - 2 * margin), min(d, D - 2 * margin)
        for _attempt in range(30):
            if name == "bookcase":
                # flush against a random wall
                side = rng.integers(4)
                x0 = _span(rng, margin, W - w - margin) if side < 2 else (margin if side == 2 else W - w - margin)
                y0 = _span(rng, margin, D - d - margin) if side >= 2 else (margin if side == 0 else D - d - margin)
            else:
                x0, y0 = _span(rng, margin, W - w - margin), _span(rng, margin, D - d - margin)
            fp = (x0, y0, x0 + w, y0 + d)
            if not _overlaps(fp, placed):
                placed.append(fp)
                surfaces += _box_surfaces(SCENE_CLASSES.index(name), x0, y0, w, d, h, spec.object_density)
                break
    label = SCENE_CLASSES.index(_CYLINDER_CLASS)
    for _ in range(spec.cylinders):
        r, h = rng.uniform(*_CYLINDER_TEMPLATE[0]), min(rng.uniform(*_CYLINDER_TEMPLATE[1]), H - 0.1)
        for _attempt in range(30):
            cx, cy = _span(rng, r + margin, W - r - margin), _span(rng, r + margin, D - r - margin)
            fp = (cx - r, cy - r, cx + r, cy + r)
            if not _overlaps(fp, placed):
                placed.append(fp)
                surfaces.append(Surface(label, "cyl", dict(cx=cx, cy=cy, r=r, h=h, z0=0.0), spec.object_density))
                surfaces.append(Surface(label, "disk", dict(cx=cx, cy=cy, r=r, z=h), spec.object_density))
                break
    return (W, D, H), surfaces


def synthesize_scene(spec: SceneSpec) -> LabeledCloud:
    """Deterministic labelled room: planar background plus box/cylinder furniture."""
    _, surfaces = scene_surfaces(spec)
    rng = np.random.default_rng([spec.seed, 1])
    coords, colors, labels = [], [], []
    for s in surfaces:
        pts = s.sample(rng)
        base = np.asarray(spec.palette[SCENE_CLASSES[s.label]], dtype=np.float64)
        col = np.clip(base + spec.color_noise * rng.standard_normal((len(pts), 3)), 0.0, 1.0)
        coords.append(pts)
        colors.append(col)
        labels.append(np.full(len(pts), s.label, dtype=np.int64))
    return LabeledCloud(np.concatenate(coords), np.concatenate(colors), np.concatenate(labels), list(SCENE_CLASSES))


def synthesize_dataset(spec: SceneSpec, n_scenes, offset=0):
    """``n_scenes`` rooms with seeds derived from ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(offset + n_scenes)][offset:]
    return [synthesize_scene(spec.with_seed(s)) for s in seeds]


OBJECT_CLASSES = ("table", "chair", "sofa", "bookcase", "clutter")


def synthesize_object(class_name, rng, n_points=1024, color_noise=0.06):
    """A single furniture object, centred and scaled into the unit sphere, every point carrying its class."""
    if class_name == _CYLINDER_CLASS:
        r, h = rng.uniform(*_CYLINDER_TEMPLATE[0]), rng.uniform(*_CYLINDER_TEMPLATE[1])
        surfaces = [
            Surface(0, "cyl", dict(cx=0.0, cy=0.0, r=r, h=h, z0=0.0), 1.0),
            Surface(0, "disk", dict(cx=0.0, cy=0.0, r=r, z=h), 1.0),
        ]
    else:
        (wl, wh), (dl, dh), (hl, hh) = _BOX_TEMPLATES[class_name]
        surfaces = _box_surfaces(0, 0.0, 0.0, rng.uniform(wl, wh), rng.uniform(dl, dh), rng.uniform(hl, hh), 1.0)
    areas = np.array([s.area for s in surfaces])
    per = rng.multinomial(n_points, areas / areas.sum())
    pts = np.concatenate([dataclasses.replace(s, density=k / s.area).sample(rng)[:k] for s, k in zip(surfaces, per)])
    pts = pts[: n_points]
    if len(pts) < n_points:
        pts = np.concatenate([pts, pts[rng.integers(len(pts), size=n_points - len(pts))]])
    pts -= pts.mean(axis=0)
    pts /= np.linalg.norm(pts, axis=1).max()
    base = np.asarray(DEFAULT_PALETTE[class_name])
    colors = np.clip(base + color_noise * rng.standard_normal((n_points, 3)), 0.0, 1.0)
    labels = np.full(n_points, OBJECT_CLASSES.index(class_name))
    return LabeledCloud(pts, colors, labels, list(OBJECT_CLASSES))


def synthesize_objects(seed, n_objects, n_points=1024):
    rng = np.random.default_rng(seed)
    names = [OBJECT_CLASSES[i % len(OBJECT_CLASSES)] for i in range(n_objects)]
    return [synthesize_object(n, rng, n_points) for n in names]


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def save_cloud(cloud: LabeledCloud, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name in cloud.class_table:
        if not name or "," in name or any(ch.isspace() for ch in name):
            raise SchemaError(f"class name {name!r} cannot be written to the header")
    lines = [f"{HEADER_PREFIX} classes={','.join(cloud.class_table)}"]
    for (x, y, z), (r, g, b), lab in zip(cloud.coords.tolist(), cloud.colors.tolist(), cloud.labels.tolist()):
        lines.append(f"{x!r} {y!r} {z!r} {r!r} {g!r} {b!r} {lab}")
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path, class_table=None) -> LabeledCloud:
    """Parse a cloud file.  With ``class_table`` the header must list exactly those classes."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(HEADER_PREFIX + " classes="):
            raise ParseError(f"{path}:1: expected header '{HEADER_PREFIX} classes=...', got {header[:60]!r}")
        names = header.split("classes=", 1)[1].strip()
        table = names.split(",") if names else []
        if class_table is not None and list(class_table) != table:
            unknown = [n for n in table if n not in class_table]
            raise SchemaError(f"{path}: class table {table} does not match expected {list(class_table)}"
                              + (f" (unknown: {unknown})" if unknown else ""))
        rows, labs = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ParseError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts[:6]])
                labs.append(int(parts[6]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= labs[-1] < len(table):
                raise SchemaError(f"{path}:{lineno}: label id {labs[-1]} outside class table of size {len(table)}")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return LabeledCloud(arr[:, :3], arr[:, 3:], np.array(labs, dtype=np.int64), table)


def cloud_from_array(arr, class_table) -> LabeledCloud:
    """Build a cloud from ``x y z r g b label`` rows; 0-255 colours are rescaled.

    This is the hook for external datasets (e.g. S3DIS rooms after their
    per-object annotation files have been merged and labelled).
    """
    arr = np.asarray(arr, dtype=np.float64)
    colors = arr[:, 3:6]
    if colors.size and colors.max() > 1.0:
        colors = colors / 255.0
    return LabeledCloud(arr[:, :3], colors, arr[:, 6].astype(np.int64), class_table)


def save_split(root, split, clouds, prefix="scene"):
    paths = []
    for i, c in enumerate(clouds):
        p = Path(root) / split / f"{prefix}_{i:03d}.txt"
        save_cloud(c, p)
        paths.append(p)
    return paths


def load_split(root, split, class_table=None):
    """All clouds under ``<root>/<split>/`` in file-name order."""
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"no split directory {d}")
    return [load_cloud(p, class_table) for p in sorted(d.glob("*.txt"))]
