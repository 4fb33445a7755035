"""Mesh ingestion, synthetic datasets, the O/A rotation protocol and the on-disk dataset format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .cloud import normalize, quaternion_to_matrix

SHAPE_CLASSES = ("sphere", "box", "torus", "cylinder", "cone")
DUMBBELL_LABELS = ("lobeA", "lobeB", "neck")


# --------------------------------------------------------------------------- OFF meshes


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class OffParseError(ValueError):
    """Malformed OFF input.  ``code`` names the failure and ``line`` is 1-based.

    Truncation is reported on the line after the last one.
    """

    def __init__(self, code: str, line: int, message: str):
        super().__init__(f"line {line}: {message} [{code}]")
        self.code = code
        self.line = line


def _off_lines(text: str):
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            yield number, content


def parse_off(data) -> Mesh:
    """Parse OFF text or bytes into a triangle mesh (polygons are fan-triangulated).

    Error codes: ``bad_header``, ``bad_counts``, ``non_numeric``,
    ``bad_face``, ``index_out_of_range``, ``truncated``.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    lines = list(_off_lines(data))
    eof = len(data.splitlines()) + 1
    pos = 0
    if not lines:
        raise OffParseError("truncated", eof, "empty file")
    number, content = lines[0]
    if content.upper().startswith("OFF"):
        rest = content[3:].strip()
        if content[3:4].strip():
            raise OffParseError("bad_header", number, f"unexpected header {content.split()[0]!r}")
        if rest:
            lines[0] = (number, rest)  # counts on the header line ("OFF 8 6 0")
        else:
            pos = 1
    elif content[:1].isalpha():
        raise OffParseError("bad_header", number, f"unexpected header {content.split()[0]!r}")
    if pos >= len(lines):
        raise OffParseError("truncated", eof, "missing counts line")
    number, content = lines[pos]
    tokens = content.split()
    try:
        counts = [int(t) for t in tokens]
    except ValueError:
        raise OffParseError("bad_counts", number, f"counts must be integers, got {content!r}") from None
    if len(counts) not in (2, 3) or min(counts) < 0:
        raise OffParseError("bad_counts", number, f"expected 'V F E' counts, got {content!r}")
    n_verts, n_faces = counts[0], counts[1]
    pos += 1

    vertices = np.empty((n_verts, 3))
    for v in range(n_verts):
        if pos >= len(lines):
            raise OffParseError("truncated", eof, f"expected {n_verts} vertices, found {v}")
        number, content = lines[pos]
        tokens = content.split()
        if len(tokens) < 3:
            raise OffParseError("non_numeric", number, f"vertex needs 3 coordinates, got {content!r}")
        try:
            vertices[v] = [float(t) for t in tokens[:3]]
        except ValueError:
            raise OffParseError("non_numeric", number, f"non-numeric vertex {content!r}") from None
        if not np.all(np.isfinite(vertices[v])):
            raise OffParseError("non_numeric", number, f"non-finite vertex {content!r}")
        pos += 1

    triangles = []
    for f in range(n_faces):
        if pos >= len(lines):
            raise OffParseError("truncated", eof, f"expected {n_faces} faces, found {f}")
        number, content = lines[pos]
        try:
            tokens = [int(t) for t in content.split()]
        except ValueError:
            raise OffParseError("non_numeric", number, f"non-integer face {content!r}") from None
        size = tokens[0]
        if size < 3 or len(tokens) < size + 1:
            raise OffParseError("bad_face", number, f"face declares {size} vertices but lists {len(tokens) - 1}")
        idx = tokens[1 : size + 1]
        for i in idx:
            if not 0 <= i < n_verts:
                raise OffParseError("index_out_of_range", number, f"vertex index {i} outside [0, {n_verts})")
        for j in range(1, size - 1):
            triangles.append((idx[0], idx[j], idx[j + 1]))
        pos += 1
    faces = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    return Mesh(vertices, faces)


def write_off(mesh: Mesh) -> str:
    """OFF text whose parse gives back ``mesh`` exactly (coordinates use ``repr``)."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    return "\n".join(out) + "\n"


def drop_degenerate_faces(mesh: Mesh) -> Mesh:
    return Mesh(mesh.vertices, mesh.faces[mesh.face_areas() > 0])


def sample_surface(mesh: Mesh, n: int, seed=None, return_faces: bool = False):
    """``n`` i.i.d. points, area-weighted over faces, uniform inside each triangle."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return (pts, face) if return_faces else pts


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Clouds ``(S, N, 3)`` float32 with per-sample ``(S,)`` or per-point ``(S, N)`` labels."""

    points: np.ndarray
    labels: np.ndarray
    class_names: tuple
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def per_point(self) -> bool:
        return self.labels.ndim == 2


def _unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _area_split(rng, n, areas):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, areas / areas.sum())


def _sample_sphere(rng, n):
    return _unit(rng, n) * rng.uniform(0.6, 1.0)


def _sample_box(rng, n):
    half = rng.uniform(0.25, 1.0, size=3)
    # faces normal to each axis, area of one pair = 2 * 4 * product of the other halves
    areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]]
    counts = _area_split(rng, n, areas)
    parts = []
    for axis, count in enumerate(counts):
        p = rng.uniform(-1, 1, size=(count, 3)) * half
        p[:, axis] = half[axis] * rng.choice([-1.0, 1.0], size=count)
        parts.append(p)
    return np.concatenate(parts)


def _sample_torus(rng, n):
    major = 1.0
    minor = major * rng.uniform(0.2, 0.5)
    u = rng.uniform(0, 2 * np.pi, n)
    # tube angle density proportional to the local circumference
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * (n - filled))
        keep = cand[rng.uniform(0, major + minor, len(cand)) < major + minor * np.cos(cand)]
        take = keep[: n - filled]
        v[filled : filled + len(take)] = take
        filled += len(take)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _disc(rng, count, radius, z):
    r = radius * np.sqrt(rng.random(count))
    t = rng.uniform(0, 2 * np.pi, count)
    return np.stack([r * np.cos(t), r * np.sin(t), np.full(count, z)], axis=1)


def _sample_cylinder(rng, n):
    radius = rng.uniform(0.25, 0.6)
    height = rng.uniform(1.0, 2.0)
    counts = _area_split(rng, n, [2 * np.pi * radius * height, np.pi * radius**2, np.pi * radius**2])
    t = rng.uniform(0, 2 * np.pi, counts[0])
    side = np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, counts[0])], axis=1)
    return np.concatenate([side, _disc(rng, counts[1], radius, height / 2), _disc(rng, counts[2], radius, -height / 2)])


def _sample_cone(rng, n):
    radius = rng.uniform(0.4, 0.8)
    height = rng.uniform(1.0, 2.0)
    slant = math.hypot(radius, height)
    counts = _area_split(rng, n, [np.pi * radius * slant, np.pi * radius**2])
    # lateral surface: distance from apex has density proportional to itself
    s = np.sqrt(rng.random(counts[0]))
    t = rng.uniform(0, 2 * np.pi, counts[0])
    side = np.stack([s * radius * np.cos(t), s * radius * np.sin(t), height / 2 - s * height], axis=1)
    return np.concatenate([side, _disc(rng, counts[1], radius, -height / 2)])


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "torus": _sample_torus,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
}

_SPLIT_KEYS = {"train": 0, "test": 1}


def _split_rng(seed: int, split: str, *keys) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_KEYS[split], *keys])


def sample_shape(name: str, n: int, rng, jitter: float = 0.0, normalized: bool = True) -> np.ndarray:
    """Surface samples of one procedurally randomized primitive in canonical pose."""
    pts = _SAMPLERS[name](rng, n)
    pts = pts[rng.permutation(n)]
    if jitter:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    return normalize(pts) if normalized else pts


def make_shapes_dataset(
    per_class: int,
    n_points: int = 2048,
    jitter: float = 0.01,
    seed: int = 0,
    split: str = "train",
    classes=SHAPE_CLASSES,
) -> Dataset:
    """Aligned, normalized primitive shapes with class labels; deterministic in ``(seed, split)``."""
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    points = np.empty((per_class * len(classes), n_points, 3), dtype=np.float32)
    labels = np.empty(per_class * len(classes), dtype=np.int64)
    for c, name in enumerate(classes):
        for i in range(per_class):
            rng = _split_rng(seed, split, c, i)
            points[c * per_class + i] = sample_shape(name, n_points, rng, jitter)
            labels[c * per_class + i] = c
    meta = {"kind": "shapes", "per_class": per_class, "n_points": n_points, "jitter": jitter, "seed": seed}
    return Dataset(points, labels, tuple(classes), split, meta)


@dataclass(frozen=True)
class DumbbellParams:
    radius_a: float
    radius_b: float
    neck_radius: float
    gap: float

    @property
    def cap_heights(self):
        return tuple(r - math.sqrt(r * r - self.neck_radius**2) for r in (self.radius_a, self.radius_b))

    def areas(self) -> np.ndarray:
        """Surface areas of (lobe A, lobe B, neck) with the neck openings removed."""
        ha, hb = self.cap_heights
        lobe_a = 4 * np.pi * self.radius_a**2 - 2 * np.pi * self.radius_a * ha
        lobe_b = 4 * np.pi * self.radius_b**2 - 2 * np.pi * self.radius_b * hb
        neck = 2 * np.pi * self.neck_radius * self.neck_length
        return np.array([lobe_a, lobe_b, neck])

    @property
    def neck_length(self) -> float:
        ha, hb = self.cap_heights
        return self.gap + ha + hb


def random_dumbbell(rng) -> DumbbellParams:
    # lobe A is always the larger sphere, which is what makes the labels intrinsic
    return DumbbellParams(
        radius_a=rng.uniform(0.55, 0.75),
        radius_b=rng.uniform(0.3, 0.45),
        neck_radius=rng.uniform(0.12, 0.2),
        gap=rng.uniform(0.5, 0.9),
    )


def _lobe(rng, count, radius, neck_radius, center, facing):
    out = np.empty((count, 3))
    filled = 0
    cut = math.sqrt(radius * radius - neck_radius * neck_radius)
    while filled < count:
        p = _unit(rng, 2 * (count - filled) + 8) * radius
        # drop the cap that the neck covers
        inside = (p[:, 0] ** 2 + p[:, 1] ** 2 < neck_radius**2) & (facing * p[:, 2] > cut)
        p = p[~inside][: count - filled]
        out[filled : filled + len(p)] = p
        filled += len(p)
    return out + center


def sample_dumbbell(params: DumbbellParams, n: int, rng):
    """Two spheres (A on +z, B on -z) joined by a cylinder; returns ``(points, labels)`` in canonical pose."""
    ra, rb, rn = params.radius_a, params.radius_b, params.neck_radius
    ha, hb = params.cap_heights
    za = params.gap / 2 + ra
    zb = -(params.gap / 2 + rb)
    counts = _area_split(rng, n, params.areas())
    a = _lobe(rng, counts[0], ra, rn, np.array([0.0, 0.0, za]), -1.0)
    b = _lobe(rng, counts[1], rb, rn, np.array([0.0, 0.0, zb]), 1.0)
    top = za - ra + ha
    bottom = zb + rb - hb
    t = rng.uniform(0, 2 * np.pi, counts[2])
    neck = np.stack([rn * np.cos(t), rn * np.sin(t), rng.uniform(bottom, top, counts[2])], axis=1)
    pts = np.concatenate([a, b, neck])
    labels = np.repeat(np.arange(3), counts)
    order = rng.permutation(n)
    return pts[order], labels[order]


def make_dumbbell_segmentation_dataset(
    per_split: int, n_points: int = 2048, seed: int = 0, split: str = "train", jitter: float = 0.0
) -> Dataset:
    """Dumbbells with per-point labels lobeA / lobeB / neck, aligned along z."""
    points = np.empty((per_split, n_points, 3), dtype=np.float32)
    labels = np.empty((per_split, n_points), dtype=np.int64)
    areas = np.zeros(3)
    for i in range(per_split):
        rng = _split_rng(seed, split, 99, i)
        params = random_dumbbell(rng)
        pts, lab = sample_dumbbell(params, n_points, rng)
        if jitter:
            pts = pts + rng.normal(0.0, jitter, size=pts.shape)
        points[i] = normalize(pts)
        labels[i] = lab
        areas += params.areas() / params.areas().sum()
    meta = {
        "kind": "dumbbell",
        "per_split": per_split,
        "n_points": n_points,
        "seed": seed,
        "jitter": jitter,
        "expected_label_fractions": (areas / per_split).tolist(),
    }
    return Dataset(points, labels, DUMBBELL_LABELS, split, meta)


def load_off_directory(root, split: str, n_points: int = 2048, seed: int = 0, classes=None) -> Dataset:
    """ModelNet-style tree ``root/<class>/<split>/*.off`` sampled to normalized clouds."""
    root = Path(root)
    classes = tuple(sorted(p.name for p in root.iterdir() if p.is_dir())) if classes is None else tuple(classes)
    clouds, labels = [], []
    for c, name in enumerate(classes):
        for i, path in enumerate(sorted((root / name / split).glob("*.off"))):
            mesh = drop_degenerate_faces(parse_off(path.read_bytes()))
            pts = sample_surface(mesh, n_points, seed=[seed, _SPLIT_KEYS.get(split, 2), c, i])
            clouds.append(normalize(pts))
            labels.append(c)
    if not clouds:
        raise FileNotFoundError(f"no OFF files under {root} for split {split!r}")
    meta = {"kind": "off_directory", "root": str(root), "n_points": n_points, "seed": seed}
    return Dataset(np.array(clouds, dtype=np.float32), np.array(labels), classes, split, meta)


# --------------------------------------------------------------------------- protocol


@dataclass(frozen=True)
class Protocol:
    """Training and test augmentation, each ``"O"`` (original pose) or ``"A"`` (random rotations)."""

    train_aug: str = "O"
    test_aug: str = "O"

    def __post_init__(self):
        if self.train_aug not in "OA" or self.test_aug not in "OA" or not self.train_aug or not self.test_aug:
            raise ValueError(f"augmentation must be 'O' or 'A', got {self}")

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        train, test = text.upper().split("/")
        return cls(train, test)

    def __str__(self):
        return f"{self.train_aug}/{self.test_aug}"


ALL_PROTOCOLS = tuple(Protocol(a, b) for a in "OA" for b in "OA")


def sample_rotation(seed: int, role: str, index: int, epoch: int = 0) -> np.ndarray:
    """Haar rotation for one sample; training rotations also depend on the epoch."""
    key = [seed, 7, index] if role == "test" else [seed, 8, epoch, index]
    return quaternion_to_matrix(np.random.default_rng(key).standard_normal(4))


def protocol_sample(
    dataset: Dataset, index: int, augment: str, seed: int, role: str = "train", epoch: int = 0, n_points: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """One sample rotated per ``augment`` and then subsampled to ``n_points``.

    ``role="train"`` draws a fresh rotation and subset every epoch;
    ``role="test"`` uses one fixed rotation and subset per sample.
    """
    if augment not in ("O", "A"):
        raise ValueError(f"augmentation must be 'O' or 'A', got {augment!r}")
    pts = dataset.points[index].astype(np.float64)
    labels = dataset.labels[index]
    if augment == "A":
        pts = pts @ sample_rotation(seed, role, index, epoch).T
    if n_points is not None and n_points < pts.shape[0]:
        key = [seed, 9, index] if role == "test" else [seed, 10, epoch, index]
        keep = np.sort(np.random.default_rng(key).choice(pts.shape[0], n_points, replace=False))
        pts = pts[keep]
        if dataset.per_point:
            labels = labels[keep]
    return pts, labels


def apply_protocol(
    dataset: Dataset, augment: str, seed: int, role: str = "train", epoch: int = 0, n_points: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield :func:`protocol_sample` for every sample in order."""
    for i in range(len(dataset)):
        yield protocol_sample(dataset, i, augment, seed, role, epoch, n_points)


def subsample_power_of_two(points: np.ndarray, seed=None) -> np.ndarray:
    """Random subset of size ``2**floor(log2 N)``."""
    n = len(points)
    m = 1 << (n.bit_length() - 1)
    if m == n:
        return points
    keep = np.sort(np.random.default_rng(seed).choice(n, m, replace=False))
    return points[keep]


# --------------------------------------------------------------------------- on-disk format

RECORD_MAGIC = b"SPHS"
RECORD_VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sIII")


def encode_record(points: np.ndarray, labels) -> bytes:
    """Header ``(magic, version, N, C_label)`` + ``N*3`` float32 + ``C_label`` uint16.

    ``C_label`` is 1 for a per-sample label and ``N`` for per-point labels.
    """
    points = np.asarray(points, dtype="<f4")
    labels = np.atleast_1d(np.asarray(labels)).astype("<u2")
    if labels.size not in (1, len(points)):
        raise ValueError("labels must be one per sample or one per point")
    return _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, len(points), labels.size) + points.tobytes() + labels.tobytes()


def decode_record(blob: bytes):
    magic, version, n, c_label = _HEADER.unpack_from(blob)
    if magic != RECORD_MAGIC:
        raise ValueError("not a dataset record")
    if version != RECORD_VERSION:
        raise ValueError(f"unsupported record version {version}")
    expected = _HEADER.size + 12 * n + 2 * c_label
    if len(blob) != expected:
        raise ValueError(f"record length {len(blob)} != {expected}")
    pts = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=_HEADER.size).reshape(n, 3)
    labels = np.frombuffer(blob, dtype="<u2", count=c_label, offset=_HEADER.size + 12 * n)
    return pts.astype(np.float32), labels.astype(np.int64)


def write_dataset(dataset: Dataset, directory) -> Path:
    """One record file per sample under ``directory/<split>/`` plus a JSON manifest."""
    out = Path(directory) / dataset.split
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(len(dataset)):
        name = f"{i:06d}.bin"
        (out / name).write_bytes(encode_record(dataset.points[i], dataset.labels[i]))
        files.append(name)
    manifest = {
        "format": "sphnet-dataset",
        "version": RECORD_VERSION,
        "split": dataset.split,
        "class_names": list(dataset.class_names),
        "per_point_labels": dataset.per_point,
        "files": files,
        "meta": dataset.meta,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_dataset(directory, split: str | None = None) -> Dataset:
    path = Path(directory)
    if split is not None:
        path = path / split
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != "sphnet-dataset":
        raise ValueError(f"{path} is not a dataset directory")
    records = [decode_record((path / name).read_bytes()) for name in manifest["files"]]
    points = np.stack([r[0] for r in records])
    if manifest["per_point_labels"]:
        labels = np.stack([r[1] for r in records])
    else:
        labels = np.array([r[1][0] for r in records])
    return Dataset(points, labels, tuple(manifest["class_names"]), manifest["split"], manifest["meta"])
