"""Point cloud ingestion, synthesis, sampling, augmentation and neighborhoods."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import RandomSource

log = logging.getLogger(__name__)

SHAPE_CLASSES = ("sphere", "box", "cylinder", "torus", "cone", "two-spheres")


class OffParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    label: int = 0
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[0] < 1 or self.points.shape[1] < 3:
            raise ValueError(f"point cloud must be N x F with N >= 1, F >= 3; got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"point cloud {self.id!r} has non-finite coordinates")

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, j]] for j in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class AugmentConfig:
    translation_range: tuple[float, float] = (-0.2, 0.2)
    scale_range: tuple[float, float] = (0.67, 1.5)
    dropout_max_ratio: float = 0.875

    def __post_init__(self):
        if min(self.scale_range) <= 0:
            raise ConfigError("scale_range must be positive")
        if not 0 <= self.dropout_max_ratio < 1:
            raise ConfigError("dropout_max_ratio must lie in [0, 1)")


# --------------------------------------------------------------------------
# OFF


_FUSED_HEADER = re.compile(r"^(C?N?4?n?OFF)(\S.*)$")


def parse_off(data: bytes | str, drop_degenerate: bool = True) -> TriangleMesh:
    """Parse OFF text into a triangle mesh.

    Polygons are fan-triangulated around their first vertex.  Comments
    (``#``) and blank lines are skipped, and the ModelNet40 quirk of the
    header fused to the counts (``OFF490 518 0``) is accepted.  Zero-area
    triangles are removed when ``drop_degenerate`` is set.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    lines = []
    for lineno, raw in enumerate(data.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    if not lines:
        raise OffParseError("empty file", 1)

    pos = 0
    lineno, first = lines[0]
    m = _FUSED_HEADER.match(first)
    if m:
        first = m.group(2).strip()
        lines[0] = (lineno, first)
    elif first.endswith("OFF") and first.replace("OFF", "").strip() == "":
        pos = 1
    if pos >= len(lines):
        raise OffParseError("missing counts line", lineno + 1)

    lineno, counts = lines[pos]
    parts = counts.split()
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except (ValueError, IndexError):
        raise OffParseError(f"malformed counts line {counts!r}", lineno) from None
    if nv < 0 or nf < 0:
        raise OffParseError(f"negative counts in {counts!r}", lineno)
    pos += 1

    def take(what: str, i: int, total: int):
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise OffParseError(f"expected {what} {i + 1} of {total}, found end of file", last + 1)
        item = lines[pos]
        pos += 1
        return item

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = take("vertex", i, nv)
        toks = text.split()
        if len(toks) < 3:
            raise OffParseError(f"vertex needs 3 coordinates, got {text!r}", lineno)
        try:
            verts[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise OffParseError(f"non-numeric coordinate in {text!r}", lineno) from None
        if not np.all(np.isfinite(verts[i])):
            raise OffParseError(f"non-finite coordinate in {text!r}", lineno)

    tris: list[tuple[int, int, int]] = []
    for i in range(nf):
        lineno, text = take("face", i, nf)
        toks = text.split()
        try:
            arity = int(toks[0])
            idx = [int(t) for t in toks[1 : 1 + arity]]
        except ValueError:
            raise OffParseError(f"non-integer face entry in {text!r}", lineno) from None
        if arity < 3 or len(idx) != arity:
            raise OffParseError(f"face declares {arity} vertices but lists {len(idx)}", lineno)
        for v in idx:
            if not 0 <= v < nv:
                raise OffParseError(f"vertex index {v} out of range [0, {nv})", lineno)
        for j in range(1, arity - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))

    mesh = TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))
    if drop_degenerate and len(mesh.faces):
        mesh.faces = mesh.faces[mesh.areas() > 0]
    return mesh


def serialize_off(mesh: TriangleMesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# sampling and augmentation


def sample_surface(mesh: TriangleMesh, n: int, rng: RandomSource, normalize: bool = True,
                   label: int = 0, id: str = "") -> PointCloud:
    """Draw ``n`` points uniformly over the mesh surface.

    Triangles are chosen with probability proportional to area, then a point
    is placed uniformly inside by reflected barycentric coordinates.  With
    ``normalize`` the result is centered and scaled into the unit sphere.
    """
    areas = mesh.areas() if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise IngestionError("mesh has no triangle with positive area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, j]] for j in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    if normalize:
        pts = pts - pts.mean(axis=0)
        r = np.linalg.norm(pts, axis=1).max()
        if r > 0:
            pts = pts / r
    return PointCloud(pts, label=label, id=id)


def input_dropout(points: np.ndarray, ratio: float, rng: RandomSource) -> np.ndarray:
    """Replace ``floor(ratio * N)`` random points with copies of the first kept point."""
    n = len(points)
    k = int(math.floor(ratio * n))
    if k <= 0:
        return points.copy()
    k = min(k, n - 1)
    drop = rng.choice(n, size=k, replace=False)
    dropped = np.zeros(n, dtype=bool)
    dropped[drop] = True
    out = points.copy()
    out[dropped] = points[np.argmin(dropped)]
    return out


def augment(pc: PointCloud, cfg: AugmentConfig, rng: RandomSource) -> PointCloud:
    """Training-time augmentation: input dropout, isotropic scale, per-axis shift."""
    pts = pc.points.astype(np.float64, copy=True)
    if cfg.dropout_max_ratio > 0:
        pts = input_dropout(pts, rng.uniform(0.0, cfg.dropout_max_ratio), rng)
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(*cfg.translation_range, size=3)
    pts[:, :3] = pts[:, :3] * scale + shift
    return PointCloud(pts.astype(pc.points.dtype), label=pc.label, id=pc.id)


# --------------------------------------------------------------------------
# neighborhoods


def pairwise_sqdist(points: np.ndarray) -> np.ndarray:
    diff = points[..., :, None, :] - points[..., None, :, :]
    return (diff * diff).sum(axis=-1)


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each point, nearest first.

    Accepts ``(N, 3)`` or batched ``(B, N, 3)``.  The query point itself is
    always first; remaining ties go to the lower index.
    """
    points = np.asarray(points)
    n = points.shape[-2]
    if not 1 <= k <= n:
        raise ValueError(f"knn_indices: need 1 <= k <= N, got k={k}, N={n}")
    d = pairwise_sqdist(points[..., :3])
    diag = np.arange(n)
    d[..., diag, diag] = -1.0
    if k == n:
        return np.argsort(d, axis=-1, kind="stable")
    # partial selection, then an exact (distance, index) order; rows whose
    # k-th distance is tied with an excluded point fall back to a full sort
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    pd = np.take_along_axis(d, part, axis=-1)
    kth = pd.max(axis=-1, keepdims=True)
    tied = (d <= kth).sum(axis=-1) > k
    part = np.sort(part, axis=-1)
    pd = np.take_along_axis(d, part, axis=-1)
    out = np.take_along_axis(part, np.argsort(pd, axis=-1, kind="stable"), axis=-1)
    if tied.any():
        out[tied] = np.argsort(d[tied], axis=-1, kind="stable")[..., :k]
    return out


def farthest_point_indices(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling of ``m`` indices beginning at ``start``."""
    points = np.asarray(points, dtype=np.float64)[:, :3]
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_indices: need 1 <= m <= N, got m={m}, N={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    diff = points - points[start]
    mind = (diff * diff).sum(axis=1)
    mind[start] = -1.0
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        diff = points - points[nxt]
        mind = np.minimum(mind, (diff * diff).sum(axis=1))
        mind[chosen[: j + 1]] = -1.0
    return chosen


# --------------------------------------------------------------------------
# synthetic shapes


@dataclass
class SynthConfig:
    classes: tuple[str, ...] = SHAPE_CLASSES
    points_per_cloud: int = 256
    clutter_ratio: float = 0.3
    noise: float = 0.01
    count_per_class: int = 100
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for c in self.classes:
            if c not in SHAPE_CLASSES:
                raise ConfigError(f"unknown shape class {c!r}; choose from {', '.join(SHAPE_CLASSES)}")
        if not 0 <= self.clutter_ratio < 1:
            raise ConfigError("clutter_ratio must lie in [0, 1)")


def _unit_vectors(rng: RandomSource, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_shape(name: str, n: int, rng: RandomSource) -> np.ndarray:
    if name == "sphere":
        return 0.5 * _unit_vectors(rng, n)
    if name == "two-spheres":
        side = rng.integers(0, 2, size=n) * 2 - 1
        pts = 0.25 * _unit_vectors(rng, n)
        pts[:, 0] += 0.25 * side
        return pts
    if name == "box":
        h = 0.4
        axis = rng.integers(0, 3, size=n)
        sign = rng.integers(0, 2, size=n) * 2 - 1
        pts = rng.uniform(-h, h, size=(n, 3))
        pts[np.arange(n), axis] = sign * h
        return pts
    if name == "cylinder":
        r, h = 0.35, 0.45
        lateral, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
        kind = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(0, 2 * math.pi, size=n)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(kind == 0, rng.uniform(-h, h, size=n), np.where(kind == 1, h, -h))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    if name == "torus":
        big, small = 0.33, 0.15
        out = np.empty((0, 2))
        while len(out) < n:
            u = rng.uniform(0, 2 * math.pi, size=2 * n)
            v = rng.uniform(0, 2 * math.pi, size=2 * n)
            ok = rng.uniform(size=2 * n) * (big + small) <= big + small * np.cos(v)
            out = np.concatenate([out, np.stack([u[ok], v[ok]], axis=1)])
        u, v = out[:n, 0], out[:n, 1]
        ring = big + small * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    if name == "cone":
        r, h = 0.45, 0.9
        slant = math.hypot(r, h)
        lateral, base = math.pi * r * slant, math.pi * r * r
        on_base = rng.uniform(size=n) < base / (lateral + base)
        theta = rng.uniform(0, 2 * math.pi, size=n)
        # lateral radius density grows linearly toward the base
        s = np.sqrt(rng.uniform(size=n))
        rad = np.where(on_base, r * np.sqrt(rng.uniform(size=n)), r * s)
        z = np.where(on_base, -h / 2, h / 2 - h * s)
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    raise ConfigError(f"unknown shape class {name!r}")


def synth_cloud(name: str, cfg: SynthConfig, rng: RandomSource) -> np.ndarray:
    n = cfg.points_per_cloud
    n_clutter = int(round(cfg.clutter_ratio * n))
    surf = _sample_shape(name, n - n_clutter, rng)
    angle = rng.uniform(0, 2 * math.pi)
    c, s = math.cos(angle), math.sin(angle)
    surf = surf @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    if cfg.noise > 0:
        surf = surf + rng.normal(0.0, cfg.noise, size=surf.shape)
    clutter = rng.uniform(-0.5, 0.5, size=(n_clutter, 3))
    pts = np.concatenate([surf, clutter])
    return pts[rng.permutation(n)]


@dataclass
class Dataset:
    clouds: list[PointCloud]
    class_names: tuple[str, ...]
    splits: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, split: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset([self.clouds[i] for i in keep], self.class_names,
                       [self.splits[i] for i in keep], [self.sources[i] for i in keep])

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def stacked(self, dtype=np.float32) -> np.ndarray:
        return np.stack([c.points for c in self.clouds]).astype(dtype)


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministic labeled shapes with uniform background clutter."""
    clouds, splits, sources = [], [], []
    n_eval = int(round(cfg.eval_fraction * cfg.count_per_class))
    for ci, name in enumerate(cfg.classes):
        for j in range(cfg.count_per_class):
            rng = RandomSource(cfg.seed, 1 + ci * 1_000_003 + j)
            cid = f"{name}_{j:04d}"
            clouds.append(PointCloud(synth_cloud(name, cfg, rng), label=ci, id=cid))
            splits.append("eval" if j >= cfg.count_per_class - n_eval else "train")
            sources.append(f"synth:{name}:seed={cfg.seed}:index={j}")
    return Dataset(clouds, cfg.classes, splits, sources)


# --------------------------------------------------------------------------
# on-disk layout: manifest.jsonl + little-endian float32 blobs


MANIFEST = "manifest.jsonl"


def write_points(path: Path, points: np.ndarray) -> None:
    arr = np.ascontiguousarray(points, dtype="<f4")
    path.write_bytes(arr.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "<f4"}))


def read_points(path: Path) -> np.ndarray:
    header = json.loads(Path(str(path) + ".json").read_text())
    if header.get("dtype") != "<f4":
        raise IngestionError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(header["shape"]).copy()


def save_dataset(ds: Dataset, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    rows = []
    for pc, split, src in zip(ds.clouds, ds.splits, ds.sources):
        rel = f"points/{pc.id}.f32"
        write_points(out_dir / rel, pc.points)
        rows.append({"id": pc.id, "class_name": ds.class_names[pc.label], "class_index": int(pc.label),
                     "source": src, "split": split, "points": rel})
    manifest = out_dir / MANIFEST
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    (out_dir / "classes.json").write_text(json.dumps(list(ds.class_names)))
    return manifest


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    class_names = tuple(json.loads((root / "classes.json").read_text()))
    clouds, splits, sources = [], [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        clouds.append(PointCloud(read_points(root / r["points"]), label=r["class_index"], id=r["id"]))
        splits.append(r["split"])
        sources.append(r["source"])
    return Dataset(clouds, class_names, splits, sources)


def ingest_tree(root: Path, n_points: int = 2048, seed: int = 0) -> tuple[Dataset, list[tuple[str, str]]]:
    """Sample every ``<class>/{train,test}/*.off`` file under ``root``.

    Returns the dataset and a list of ``(path, reason)`` failures; a bad file
    never stops the run.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    class_names = tuple(p.name for p in class_dirs)
    clouds, splits, sources, failures = [], [], [], []
    for ci, cdir in enumerate(class_dirs):
        for split_dir, split in (("train", "train"), ("test", "eval")):
            for path in sorted((cdir / split_dir).glob("*.off")):
                rng = RandomSource(seed, len(sources) + len(failures))
                try:
                    mesh = parse_off(path.read_bytes())
                    pc = sample_surface(mesh, n_points, rng, label=ci, id=f"{cdir.name}/{path.stem}")
                except (OffParseError, IngestionError, ValueError) as exc:
                    log.warning("skipping %s: %s", path, exc)
                    failures.append((str(path), str(exc)))
                    continue
                pc.id = pc.id.replace("/", "__")
                clouds.append(pc)
                splits.append(split)
                sources.append(str(path.relative_to(root)))
    return Dataset(clouds, class_names, splits, sources), failures


def toy_corpus_dir() -> Path:
    return Path(__file__).parent / "data" / "toy_off"


def iter_batches(n: int, batch_size: int, order: Sequence[int] | None = None) -> Iterable[np.ndarray]:
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]
