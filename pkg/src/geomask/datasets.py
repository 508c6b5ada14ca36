"""Point-cloud file I/O (PLY, XYZ), the on-disk dataset layout, and a
procedural multi-category benchmark with injected surface defects."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, local_covariance, normal_and_curvature

GENERATOR_VERSION = "1"
SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "capsule")
ANOMALY_KINDS = ("bump", "dent", "crater", "excision")


class PlyError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class XyzError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyError("missing 'ply' magic or 'end_header'", 0)
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    offset = 0
    for line in raw[:end].split(b"\n"):
        here = offset
        offset += len(line) + 1
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        if words[0] == "format":
            if len(words) < 2 or words[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"unknown format line {line!r}", here)
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"malformed element line {line!r}", here)
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise PlyError("property before any element", here)
            if len(words) >= 2 and words[1] == "list":
                if len(words) != 5 or words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed list property {line!r}", here)
                elements[-1][2].append((words[4], "list:" + words[2] + ":" + words[3]))
            else:
                if len(words) != 3 or words[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown property type in {line!r}", here)
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise PlyError(f"unexpected header keyword {words[0]!r}", here)
    if fmt is None:
        raise PlyError("header has no format line", 0)
    if fmt == "binary_big_endian":
        raise PlyError("big-endian PLY is not supported", 0)
    return fmt, elements, body_start


def load_ply(path) -> PointCloud:
    """Read x, y, z (and an optional integer ``gt`` label) from the vertex element."""
    raw = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(raw)
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'", 0)
    _, n, props = elements[0]
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element has no '{axis}' property", 0)
    if any(t.startswith("list:") for _, t in props):
        raise PlyError("list properties on vertices are not supported", 0)

    if fmt == "ascii":
        lines = raw[pos:].split(b"\n")
        data = np.empty((n, len(props)))
        off = pos
        row = 0
        for line in lines:
            if row == n:
                break
            here = off
            off += len(line) + 1
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise PlyError(f"non-numeric vertex value in {line[:40]!r}", here) from None
            if len(vals) != len(props):
                raise PlyError(f"vertex {row} has {len(vals)} values, expected {len(props)}", here)
            data[row] = vals
            row += 1
        if row < n:
            raise PlyError(f"truncated: {row} of {n} vertices", len(raw))
        cols = {name: data[:, i] for i, name in enumerate(names)}
    else:
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = dtype.itemsize * n
        if pos + need > len(raw):
            raise PlyError(f"truncated: need {need} payload bytes, have {len(raw) - pos}", len(raw))
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
        cols = {name: arr[name] for name in names}

    pts = np.stack([cols[a].astype(np.float64) for a in "xyz"], axis=1)
    labels = cols["gt"].astype(np.int64) != 0 if "gt" in cols else None
    return PointCloud(pts, labels)


def save_ply(path, cloud: PointCloud, binary: bool = True, colors: np.ndarray | None = None) -> None:
    """Write vertices as doubles, plus ``gt`` when labelled and uchar RGB when given."""
    pts = cloud.points
    n = len(pts)
    props = [("x", "f8", "double"), ("y", "f8", "double"), ("z", "f8", "double")]
    cols = [pts[:, 0], pts[:, 1], pts[:, 2]]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
        for i, c in enumerate("rgb"):
            props.append(({"r": "red", "g": "green", "b": "blue"}[c], "u1", "uchar"))
            cols.append(colors[:, i])
    if cloud.labels is not None:
        props.append(("gt", "u1", "uchar"))
        cols.append(cloud.labels.astype(np.uint8))
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {ptype} {name}" for name, _, ptype in props]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            arr = np.empty(n, dtype=np.dtype([(name, "<" + t) for name, t, _ in props]))
            for (name, _, _), col in zip(props, cols):
                arr[name] = col
            fh.write(arr.tobytes())
        else:
            for i in range(n):
                fh.write((" ".join(repr(float(c[i])) if t == "f8" else str(int(c[i]))
                                   for (_, t, _), c in zip(props, cols)) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# XYZ
# ---------------------------------------------------------------------------

def load_xyz(path) -> PointCloud:
    """Whitespace separated ``x y z [label]`` rows; blank lines and ``#`` comments skipped."""
    pts, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) not in (3, 4):
                raise XyzError(f"expected 3 or 4 values, got {len(toks)}", lineno)
            try:
                vals = [float(t) for t in toks]
            except ValueError:
                raise XyzError(f"non-numeric token in {line!r}", lineno) from None
            pts.append(vals[:3])
            labels.append(vals[3] if len(toks) == 4 else None)
    if not pts:
        raise XyzError("no points", 0)
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise XyzError("label column present on some rows only", 0)
    lab = np.asarray(labels, dtype=np.float64) != 0 if all(has) else None
    return PointCloud(np.asarray(pts), lab)


def save_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if cloud.labels is not None:
                row += f" {int(cloud.labels[i])}"
            fh.write(row + "\n")


def load_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix in (".xyz", ".txt"):
        return load_xyz(path)
    raise ValueError(f"unsupported point-cloud extension {suffix!r}")


# ---------------------------------------------------------------------------
# procedural shapes
# ---------------------------------------------------------------------------

DEFAULT_SHAPES = {
    "sphere": {"radius": 1.0},
    "box": {"size": [1.6, 1.1, 0.7]},
    "cylinder": {"radius": 0.5, "height": 1.6},
    "torus": {"major": 0.8, "minor": 0.3},
    "capsule": {"radius": 0.4, "length": 1.2},
}


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n, radius):
    return radius * _unit(rng.standard_normal((n, 3)))


def _sample_box(rng, n, size):
    a, b, c = size
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.random((n, 2)) - 0.5
    pts = np.empty((n, 3))
    half = np.array([a, b, c]) / 2
    for f in range(6):
        sel = face == f
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * 2 * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * 2 * half[others[1]]
    return pts, face


def _sample_cylinder(rng, n, radius, height):
    side, cap = 2 * math.pi * radius * height, math.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * math.pi
    pts = np.empty((n, 3))
    s = part == 0
    pts[s] = np.c_[radius * np.cos(theta[s]), radius * np.sin(theta[s]), (rng.random(s.sum()) - 0.5) * height]
    for p, z in ((1, height / 2), (2, -height / 2)):
        s = part == p
        rr = radius * np.sqrt(rng.random(s.sum()))
        pts[s] = np.c_[rr * np.cos(theta[s]), rr * np.sin(theta[s]), np.full(s.sum(), z)]
    return pts


def _sample_torus(rng, n, major, minor):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.random(2 * n) * 2 * math.pi
        v = rng.random(2 * n) * 2 * math.pi
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        w = major + minor * np.cos(v)
        out = np.vstack([out, np.c_[w * np.cos(u), w * np.sin(u), minor * np.sin(v)]])
    return out[:n]


def _sample_capsule(rng, n, radius, length):
    side, caps = 2 * math.pi * radius * length, 4 * math.pi * radius ** 2
    on_side = rng.random(n) < side / (side + caps)
    pts = np.empty((n, 3))
    k = on_side.sum()
    theta = rng.random(k) * 2 * math.pi
    pts[on_side] = np.c_[radius * np.cos(theta), radius * np.sin(theta), (rng.random(k) - 0.5) * length]
    sph = _sample_sphere(rng, n - k, radius)
    sph[:, 2] += np.where(sph[:, 2] >= 0, length / 2, -length / 2)
    pts[~on_side] = sph
    return pts


def synth_category(kind: str, shape_params: dict | None, n_points: int,
                   rng: np.random.Generator, noise: float = 0.002) -> PointCloud:
    """Uniform-area surface samples of a parametric shape plus isotropic Gaussian
    noise with std ``noise`` times the bounding radius."""
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    if n_points < 100:
        raise ValueError("n_points must be at least 100")
    p = dict(DEFAULT_SHAPES[kind])
    p.update(shape_params or {})
    if kind == "sphere":
        if p["radius"] <= 0:
            raise ValueError("sphere radius must be positive")
        pts = _sample_sphere(rng, n_points, p["radius"])
    elif kind == "box":
        if len(p["size"]) != 3 or min(p["size"]) <= 0:
            raise ValueError("box size must be three positive lengths")
        pts, _ = _sample_box(rng, n_points, p["size"])
    elif kind == "cylinder":
        if p["radius"] <= 0 or p["height"] <= 0:
            raise ValueError("cylinder radius and height must be positive")
        pts = _sample_cylinder(rng, n_points, p["radius"], p["height"])
    elif kind == "torus":
        if not 0 < p["minor"] < p["major"]:
            raise ValueError("torus needs 0 < minor < major")
        pts = _sample_torus(rng, n_points, p["major"], p["minor"])
    else:
        if p["radius"] <= 0 or p["length"] < 0:
            raise ValueError("capsule radius must be positive and length non-negative")
        pts = _sample_capsule(rng, n_points, p["radius"], p["length"])
    bound = np.sqrt((pts ** 2).sum(axis=1)).max()
    pts = pts + rng.standard_normal(pts.shape) * noise * bound
    return PointCloud(pts, category=kind)


# ---------------------------------------------------------------------------
# anomalies
# ---------------------------------------------------------------------------

def _taper(t):
    # 1 at t=0, 0 with zero slope at t=1
    return np.where(t < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.clip(t, 0.0, 1.0))), 0.0)


def _crater_profile(t):
    dent = -_taper(t / 0.7)
    ring = np.where((t > 0.5) & (t < 1.0), 0.5 * (1.0 - np.cos(2 * np.pi * (t - 0.5) / 0.5)), 0.0)
    return dent + 0.35 * ring


def outward_normal(points: np.ndarray, index: int, k: int = 24) -> np.ndarray:
    """PCA normal at ``points[index]`` from its k nearest points, pointing away from the centroid."""
    d = ((points - points[index]) ** 2).sum(axis=1)
    nb = np.argsort(d, kind="stable")[:k]
    cov, _ = local_covariance(points[nb])
    normal, _, _ = normal_and_curvature(cov)
    if np.dot(normal, points[index] - points.mean(axis=0)) < 0:
        normal = -normal
    return normal


def inject_anomaly(cloud: PointCloud, kind: str, magnitude: float, extent: float,
                   rng: np.random.Generator, min_frac: float = 0.01, max_frac: float = 0.10,
                   retries: int = 100):
    """Deform (or cut) a patch of radius ``extent`` around a random surface point.

    Returns ``(new_cloud, mask, info)``; ``mask`` flags displaced points, or for
    an excision the ring of surviving points bordering the hole.
    """
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    pts = cloud.points
    n = len(pts)
    if magnitude == 0:
        return PointCloud(pts.copy(), np.zeros(n, bool), cloud.category), np.zeros(n, bool), {}
    bound = np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)).max()
    if magnitude < 0 or not 0 < extent < bound:
        raise ValueError("need magnitude > 0 and 0 < extent < bounding radius")

    for _ in range(retries):
        seed = int(rng.integers(n))
        d = np.sqrt(((pts - pts[seed]) ** 2).sum(axis=1))
        if kind == "excision":
            removed = d < extent
            ring = (d >= extent) & (d < 1.5 * extent)
            frac = ring.sum() / (n - removed.sum())
            if min_frac <= frac <= max_frac:
                keep = ~removed
                mask = ring[keep]
                out = PointCloud(pts[keep].copy(), mask, cloud.category)
                return out, mask, {"kind": kind, "seed_index": seed, "extent": extent,
                                   "magnitude": magnitude, "removed": int(removed.sum())}
            continue
        inside = d < extent
        frac = inside.sum() / n
        if not min_frac <= frac <= max_frac:
            continue
        normal = outward_normal(pts, seed)
        t = d / extent
        if kind == "bump":
            h = magnitude * _taper(t)
        elif kind == "dent":
            h = -magnitude * _taper(t)
        else:
            h = magnitude * _crater_profile(t)
        new = pts + h[:, None] * normal[None, :]
        return (PointCloud(new, inside.copy(), cloud.category), inside,
                {"kind": kind, "seed_index": seed, "extent": extent, "magnitude": magnitude,
                 "normal": normal.tolist()})
    raise GenerationError(f"could not place a {kind} with {min_frac:.0%}-{max_frac:.0%} coverage "
                          f"after {retries} attempts")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    cloud: PointCloud
    split: str
    is_anomalous: bool = False
    anomaly_mask: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.split == "train":
            if self.anomaly_mask is not None and np.any(self.anomaly_mask):
                raise ValueError(f"training sample {self.source} carries anomaly labels")
            if self.is_anomalous:
                raise ValueError(f"training sample {self.source} is marked anomalous")
        elif self.anomaly_mask is not None:
            self.is_anomalous = bool(np.any(self.anomaly_mask))


@dataclass
class Dataset:
    categories: dict[str, list[Sample]]
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> dict[str, list[Sample]]:
        return {c: [s for s in ss if s.split == name] for c, ss in self.categories.items()}


@dataclass
class BenchmarkConfig:
    categories: tuple = ("box", "cylinder", "torus", "capsule")
    n_points: int = 2048
    n_train: int = 16
    n_test_normal: int = 10
    n_test_anomalous: int = 10
    noise: float = 0.002
    shape_jitter: float = 0.1
    magnitude: tuple = (0.15, 0.25)
    extent: tuple = (0.15, 0.3)
    anomaly_kinds: tuple = ANOMALY_KINDS

    def validate(self) -> None:
        if len(self.categories) < 2:
            raise ValueError("categories: at least two categories are required")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("categories: names must be unique")
        for c in self.categories:
            if c not in SHAPE_KINDS:
                raise ValueError(f"categories: unknown shape kind {c!r} (choose from {', '.join(SHAPE_KINDS)})")
        for k in self.anomaly_kinds:
            if k not in ANOMALY_KINDS:
                raise ValueError(f"anomaly_kinds: unknown kind {k!r}")
        if self.n_points < 100:
            raise ValueError("n_points: must be at least 100")
        if self.n_train < 1 or self.n_test_normal < 1 or self.n_test_anomalous < 1:
            raise ValueError("n_train/n_test_normal/n_test_anomalous: must be positive")


def _jitter_shape(kind: str, rng: np.random.Generator, amount: float) -> dict:
    out = {}
    for key, val in DEFAULT_SHAPES[kind].items():
        if isinstance(val, list):
            out[key] = [float(v * (1 + amount * rng.uniform(-1, 1))) for v in val]
        else:
            out[key] = float(val * (1 + amount * rng.uniform(-1, 1)))
    return out


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def build_benchmark(config: BenchmarkConfig, seed: int, root=None) -> Dataset:
    """Generate the synthetic benchmark; every sample has its own rng stream keyed by
    (seed, category, split, index).  Writes ``root/<cat>/{train,test}/*.ply`` and
    ``root/manifest.json`` when ``root`` is given."""
    config.validate()
    categories: dict[str, list[Sample]] = {}
    manifest = {"generator_version": GENERATOR_VERSION, "seed": seed,
                "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(config).items()},
                "samples": []}
    for ci, kind in enumerate(config.categories):
        samples = []
        plan = ([("train", False)] * config.n_train + [("test", False)] * config.n_test_normal
                + [("test", True)] * config.n_test_anomalous)
        counters = {"train": 0, "test": 0}
        for si, (split, anomalous) in enumerate(plan):
            rng = _stream(seed, ci, si)
            params = _jitter_shape(kind, rng, config.shape_jitter)
            cloud = synth_category(kind, params, config.n_points, rng, config.noise)
            cloud.category = kind
            entry = {"category": kind, "split": split, "shape_params": params}
            idx = counters[split]
            counters[split] += 1
            if split == "train":
                name = f"{idx:03d}.ply"
                sample = Sample(cloud, "train")
            else:
                mask = np.zeros(len(cloud), dtype=bool)
                tag = "good"
                if anomalous:
                    akind = config.anomaly_kinds[int(rng.integers(len(config.anomaly_kinds)))]
                    mag = float(rng.uniform(*config.magnitude))
                    ext = float(rng.uniform(*config.extent))
                    cloud, mask, info = inject_anomaly(cloud, akind, mag, ext, rng)
                    entry["anomaly"] = info
                    tag = akind
                cloud.labels = mask
                name = f"{idx:03d}_{tag}.ply"
                sample = Sample(cloud, "test", bool(mask.any()), mask)
            sample.source = f"{kind}/{split}/{name}"
            entry["file"] = sample.source
            entry["n_points"] = len(sample.cloud)
            entry["anomalous_fraction"] = float(sample.anomaly_mask.mean()) if sample.anomaly_mask is not None else 0.0
            manifest["samples"].append(entry)
            samples.append(sample)
        categories[kind] = samples

    dataset = Dataset(categories, manifest)
    if root is not None:
        write_dataset(dataset, root)
    return dataset


def write_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    for cat, samples in dataset.categories.items():
        for s in samples:
            path = root / s.source
            path.parent.mkdir(parents=True, exist_ok=True)
            save_ply(path, s.cloud, binary=True)
    with open(root / "manifest.json", "w") as fh:
        json.dump(dataset.manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


_SPLITS = ("train", "test")


def load_dataset(root, splits=_SPLITS) -> Dataset:
    """Read a ``root/<category>/{train,test}/*.{ply,xyz}`` tree."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest = {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
    categories = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        samples = []
        for split in splits:
            d = cat_dir / split
            if not d.is_dir():
                continue
            for f in sorted(d.iterdir()):
                if f.suffix.lower() not in (".ply", ".xyz", ".txt"):
                    continue
                cloud = load_cloud(f)
                cloud.category = cat_dir.name
                source = f"{cat_dir.name}/{split}/{f.name}"
                if split == "train":
                    samples.append(Sample(cloud, "train", False, cloud.labels, source))
                else:
                    mask = cloud.labels if cloud.labels is not None else np.zeros(len(cloud), bool)
                    samples.append(Sample(cloud, "test", bool(mask.any()), mask, source))
        if samples:
            categories[cat_dir.name] = samples
    if not categories:
        raise FileNotFoundError(f"no point clouds found under {root}")
    return Dataset(categories, manifest)

