"""Dataset ingestion: OFF meshes, surface sampling, normalization, augmentation,
procedural shapes and the binary point-cloud cache."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

CACHE_MAGIC = b"PCLB"
CACHE_VERSION = 1

SHAPE_NAMES = ("sphere", "cube", "cylinder", "torus", "cone", "capsule", "pyramid", "ellipsoid")


@dataclass
class PointCloud:
    points: np.ndarray
    source_id: str
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise DataError(f"{self.source_id}: points must be an N x 3 array with N >= 1")
        if not np.all(np.isfinite(self.points)):
            raise DataError(f"{self.source_id}: non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


@dataclass
class DatasetManifest:
    name: str
    split: str
    sample_count: int
    points_per_sample: int
    entries: list[tuple[str, int, str]] = field(default_factory=list)

    def validate(self, base_dir: str | os.PathLike | None = None):
        if self.split not in ("train", "test"):
            raise DataError(f"manifest {self.name}: unknown split {self.split!r}")
        if len(self.entries) != self.sample_count:
            raise DataError(
                f"manifest {self.name}: {len(self.entries)} entries but sample_count={self.sample_count}"
            )
        missing = sorted({p for p, _, _ in self.entries if not _resolve(p, base_dir).exists()})
        if missing:
            raise DataError(f"manifest {self.name}: missing files {missing[:5]}")


@dataclass
class AugmentationConfig:
    rotate: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    shift_range: float = 0.1
    up_axis: int = 2

    def validate(self):
        vals = (self.jitter_sigma, self.jitter_clip, self.shift_range)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("augmentation magnitudes must be finite and non-negative")
        if self.jitter_sigma > 0 and self.jitter_clip < self.jitter_sigma:
            raise ValueError("jitter_clip must be >= jitter_sigma when jitter is enabled")
        if self.up_axis not in (0, 1, 2):
            raise ValueError("up_axis must be 0, 1 or 2")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(rotate=False, jitter_sigma=0.0, jitter_clip=0.0, shift_range=0.0)


def _resolve(path, base_dir):
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return p


# --------------------------------------------------------------------------- OFF

def _off_tokens(path):
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                yield line


def load_off_mesh(path: str | os.PathLike) -> Mesh:
    """Read an ASCII OFF mesh.

    Polygons with more than three vertices are fan-triangulated. ModelNet's
    glued header variant (``OFF490 518 0``) is accepted.
    """
    lines = _off_tokens(path)
    try:
        header = next(lines)
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    if not header.startswith("OFF"):
        raise DataError(f"{path}: malformed header, expected OFF")
    rest = header[3:].strip()
    try:
        counts = rest.split() if rest else next(lines).split()
        n_vert, n_face = int(counts[0]), int(counts[1])
    except (StopIteration, IndexError, ValueError):
        raise DataError(f"{path}: malformed header counts") from None
    if n_vert < 0 or n_face < 0:
        raise DataError(f"{path}: malformed header counts")

    vertices = np.empty((n_vert, 3), dtype=np.float64)
    try:
        for i in range(n_vert):
            vertices[i] = [float(t) for t in next(lines).split()[:3]]
    except (StopIteration, ValueError):
        raise DataError(f"{path}: truncated or malformed vertex block") from None
    if not np.all(np.isfinite(vertices)):
        raise DataError(f"{path}: non-finite vertex coordinates")

    faces = []
    for f in range(n_face):
        try:
            tok = next(lines).split()
            m = int(tok[0])
            idx = [int(t) for t in tok[1:1 + m]]
        except (StopIteration, ValueError, IndexError):
            raise DataError(f"{path}: truncated or malformed face block") from None
        if m < 3 or len(idx) != m:
            raise DataError(f"{path}: face {f} has fewer than 3 vertices")
        for v in idx:
            if v < 0 or v >= n_vert:
                raise DataError(f"{path}: face {f} vertex index {v} out of range [0, {n_vert})")
        for j in range(1, m - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return Mesh(vertices, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_off_mesh(path, mesh: Mesh):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ------------------------------------------------------------------ sampling

def face_areas(mesh: Mesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def sample_points_from_mesh(mesh: Mesh, n: int, seed: int, source_id: str = "",
                            label: int | None = None) -> PointCloud:
    """Area-weighted uniform surface sampling with barycentric coordinates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DataError(f"{source_id or 'mesh'}: degenerate mesh, all faces have zero area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    tri = mesh.vertices[mesh.faces[face]]
    pts = (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    return PointCloud(pts, source_id, label)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    pts = cloud.points - cloud.points.mean(axis=0)
    scale = np.linalg.norm(pts, axis=1).max()
    if not scale > 0:
        raise DataError(f"{cloud.source_id}: all points identical, cannot normalize")
    return PointCloud(pts / scale, cloud.source_id, cloud.label)


def rotation_about_axis(angle: float, axis: int = 2) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    rot = np.eye(3)
    rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return rot


def augment_points(points: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    out = points
    if cfg.rotate:
        out = out @ rotation_about_axis(rng.uniform(0, 2 * np.pi), cfg.up_axis).T
    if cfg.jitter_sigma > 0:
        noise = np.clip(cfg.jitter_sigma * rng.standard_normal(out.shape), -cfg.jitter_clip, cfg.jitter_clip)
        out = out + noise
    if cfg.shift_range > 0:
        out = out + rng.uniform(-cfg.shift_range, cfg.shift_range, size=3)
    return out


def augment(cloud: PointCloud, cfg: AugmentationConfig, seed: int) -> PointCloud:
    cfg.validate()
    pts = augment_points(cloud.points, cfg, np.random.default_rng(seed))
    return PointCloud(pts, cloud.source_id, cloud.label)


# ---------------------------------------------------------- procedural shapes

def revolve(profile: np.ndarray, segments: int = 48) -> Mesh:
    """Surface of revolution about z from a (radius, height) polyline."""
    profile = np.asarray(profile, dtype=np.float64)
    theta = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    r, z = profile[:, 0], profile[:, 1]
    verts = np.stack([
        np.outer(r, np.cos(theta)).ravel(),
        np.outer(r, np.sin(theta)).ravel(),
        np.repeat(z, segments),
    ], axis=1)
    faces = []
    for i in range(len(profile) - 1):
        for j in range(segments):
            a, b = i * segments + j, i * segments + (j + 1) % segments
            c, d = a + segments, b + segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    return Mesh(verts, np.asarray(faces, dtype=np.int64))


def box_mesh(sx, sy, sz) -> Mesh:
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array([
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ])
    return Mesh(corners * [sx / 2, sy / 2, sz / 2], faces)


def pyramid_mesh(side, height) -> Mesh:
    h = side / 2
    verts = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0], [0, 0, height]], dtype=np.float64)
    faces = np.array([(0, 2, 1), (0, 3, 2), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)])
    return Mesh(verts, faces)


def _arc(r, z0, start, stop, n=16):
    t = np.linspace(start, stop, n)
    return np.stack([r * np.cos(t), z0 + r * np.sin(t)], axis=1)


def shape_mesh(shape: str, rng: np.random.Generator) -> Mesh:
    if shape == "cube":
        return box_mesh(*rng.uniform(0.7, 1.3, size=3))
    if shape == "cylinder":
        radius, height = 0.5, rng.uniform(1.4, 2.6)
        return revolve([[0, -height / 2], [radius, -height / 2], [radius, height / 2], [0, height / 2]])
    if shape == "torus":
        minor = rng.uniform(0.2, 0.45)
        circle = _arc(minor, 0.0, 0, 2 * np.pi, 32)
        return revolve(circle + [1.0, 0.0])
    if shape == "cone":
        radius, height = 0.5, rng.uniform(1.0, 2.0)
        return revolve([[0, 0], [radius, 0], [0, height]])
    if shape == "capsule":
        radius, length = 0.5, rng.uniform(0.8, 2.0)
        bottom = _arc(radius, -length / 2, -np.pi / 2, 0)
        top = _arc(radius, length / 2, 0, np.pi / 2)
        return revolve(np.concatenate([bottom, top]))
    if shape == "pyramid":
        return pyramid_mesh(1.0, rng.uniform(0.8, 1.5))
    if shape == "ellipsoid":
        mesh = revolve(_arc(1.0, 0.0, -np.pi / 2, np.pi / 2, 24))
        axes = np.array([rng.uniform(0.45, 0.7), rng.uniform(0.25, 0.4), 1.0])
        return Mesh(mesh.vertices * axes, mesh.faces)
    raise ValueError(f"unknown shape {shape!r}")


def sample_shape(shape: str, n_points: int, seed: int, source_id: str = "", label: int | None = None) -> PointCloud:
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.5, 1.5)
    if shape == "sphere":
        pts = rng.standard_normal((n_points, 3))
        pts *= scale / np.linalg.norm(pts, axis=1, keepdims=True)
        return PointCloud(pts, source_id, label)
    mesh = shape_mesh(shape, rng)
    cloud = sample_points_from_mesh(mesh, n_points, int(rng.integers(2**63)), source_id, label)
    cloud.points *= scale
    return cloud


def make_synthetic_dataset(classes: int, per_class: int, n_points: int, seed: int,
                           split: str = "train", name: str | None = None):
    """Labeled procedural shapes, ``per_class`` of each of the first ``classes`` shapes.

    Returns ``(manifest, clouds)``; the manifest points at the cache file
    ``<name>-<split>.pclb`` that :func:`write_dataset` produces.
    """
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_NAMES)}], got {classes}")
    if per_class < 1 or n_points < 1:
        raise ValueError("per_class and n_points must be positive")
    name = name or f"synthetic{classes}"
    seeds = np.random.SeedSequence([seed, 0 if split == "train" else 1]).spawn(classes * per_class)
    clouds = []
    for c in range(classes):
        for i in range(per_class):
            sid = f"{name}-{split}-{SHAPE_NAMES[c]}-{i:04d}"
            ss = seeds[c * per_class + i]
            clouds.append(sample_shape(SHAPE_NAMES[c], n_points, int(ss.generate_state(1)[0]), sid, c))
    cache = f"{name}-{split}.pclb"
    manifest = DatasetManifest(name, split, len(clouds), n_points,
                               [(cache, c.label, c.source_id) for c in clouds])
    return manifest, clouds


# -------------------------------------------------------------------- cache

def write_cache(path, clouds: Sequence[PointCloud]):
    if not clouds:
        raise DataError("cannot write an empty cache")
    n = len(clouds[0])
    if any(len(c) != n for c in clouds):
        raise DataError("all clouds in a cache must have the same point count")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, len(clouds), n))
        for c in clouds:
            sid = c.source_id.encode("utf-8")
            fh.write(struct.pack("<iH", -1 if c.label is None else int(c.label), len(sid)))
            fh.write(sid)
            fh.write(np.ascontiguousarray(c.points, dtype="<f4").tobytes())


def read_cache(path) -> list[PointCloud]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16 or buf[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a PCLB cache file")
    version, count, n = struct.unpack_from("<III", buf, 4)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off, clouds = 16, []
    try:
        for _ in range(count):
            label, slen = struct.unpack_from("<iH", buf, off)
            off += 6
            sid = buf[off:off + slen].decode("utf-8")
            off += slen
            pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
            off += 12 * n
            clouds.append(PointCloud(pts.astype(np.float64), sid, None if label < 0 else label))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated cache ({exc})") from None
    return clouds


def write_manifest(path, manifest: DatasetManifest):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, label, sid in manifest.entries:
            fh.write(f"{p}\t{label}\t{sid}\n")


def read_manifest(path, name: str, split: str, points_per_sample: int) -> DatasetManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected path<TAB>label<TAB>source_id")
            entries.append((parts[0], int(parts[1]), parts[2]))
    manifest = DatasetManifest(name, split, len(entries), points_per_sample, entries)
    manifest.validate(Path(path).parent)
    return manifest


def write_dataset(out_dir, manifest: DatasetManifest, clouds: Sequence[PointCloud]) -> Path:
    """Write ``<name>-<split>.pclb`` plus its ``.tsv`` manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = f"{manifest.name}-{manifest.split}.pclb"
    write_cache(out_dir / cache, clouds)
    manifest.entries = [(cache, -1 if c.label is None else c.label, c.source_id) for c in clouds]
    manifest.sample_count = len(clouds)
    mpath = out_dir / f"{manifest.name}-{manifest.split}.tsv"
    write_manifest(mpath, manifest)
    return mpath


def load_dataset(manifest_path, name: str | None = None, split: str | None = None) -> list[PointCloud]:
    """Load clouds referenced by a manifest written by :func:`write_dataset` or ``cache-data``."""
    manifest_path = Path(manifest_path)
    stem = manifest_path.stem
    guessed_split = "test" if stem.endswith("-test") else "train"
    manifest = read_manifest(manifest_path, name or stem, split or guessed_split, 0)
    base = manifest_path.parent
    by_file: dict[str, dict[str, PointCloud]] = {}
    out = []
    for p, label, sid in manifest.entries:
        if p.endswith(".pclb"):
            if p not in by_file:
                by_file[p] = {c.source_id: c for c in read_cache(_resolve(p, base))}
            cloud = by_file[p].get(sid)
            if cloud is None:
                raise DataError(f"{manifest_path}: source_id {sid!r} not found in {p}")
            out.append(PointCloud(cloud.points, sid, None if label < 0 else label))
        else:
            raise DataError(f"{manifest_path}: entry {p!r} is not a cache file; run cache-data first")
    return out


def scan_modelnet(root, split: str) -> DatasetManifest:
    """Index a ModelNet-style tree ``root/<class>/<split>/*.off``; labels are sorted class order."""
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    entries = []
    for label, cls in enumerate(classes):
        for f in sorted((root / cls / split).glob("*.off")):
            entries.append((str(f), label, f"{cls}/{f.stem}"))
    if not entries:
        raise DataError(f"{root}: no OFF files found for split {split!r}")
    return DatasetManifest(root.name, split, len(entries), 0, entries)


def cache_mesh_dataset(manifest: DatasetManifest, n_points: int, seed: int, out_dir) -> Path:
    """Sample, normalize and cache every mesh listed in an OFF-backed manifest."""
    seeds = np.random.SeedSequence(seed).spawn(len(manifest.entries))
    clouds = []
    for (path, label, sid), ss in zip(manifest.entries, seeds):
        mesh = load_off_mesh(path)
        cloud = sample_points_from_mesh(mesh, n_points, int(ss.generate_state(1)[0]), sid, label)
        clouds.append(normalize_unit_sphere(cloud))
    out = DatasetManifest(manifest.name, manifest.split, len(clouds), n_points)
    return write_dataset(out_dir, out, clouds)
