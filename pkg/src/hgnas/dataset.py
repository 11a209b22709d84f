"""Synthetic point-cloud classification data and OFF mesh ingestion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

SHAPES = ("sphere", "cube", "cylinder", "plane")


class OffError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (M, 3)
    label: int


@dataclass
class DatasetSplit:
    train: list[PointCloud]
    val: list[PointCloud]
    num_classes: int
    seed: int | None = None
    class_names: tuple[str, ...] = SHAPES
    meta: dict = field(default_factory=dict)

    @property
    def num_points(self) -> int:
        return self.train[0].points.shape[0] if self.train else self.val[0].points.shape[0]

    def arrays(self, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
        clouds = self.train if which == "train" else self.val
        x = np.stack([c.points for c in clouds]) if clouds else np.zeros((0, 0, 3))
        y = np.array([c.label for c in clouds], dtype=np.intp)
        return x, y


def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to radius 1.

    Degenerate clouds (all points identical) become all zeros.
    """
    p = np.asarray(points, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p**2).sum(axis=1)).max() if len(p) else 0.0
    if r <= 1e-12:
        return np.zeros_like(p)
    p = p / r
    # re-center after scaling to push the centroid residual to rounding level
    return p - p.mean(axis=0)


def sample_surface(shape: str, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the surface of a canonical shape (no noise, no pose)."""
    if shape == "sphere":
        v = rng.normal(size=(m, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        face = rng.integers(6, size=m)
        uv = rng.uniform(-1, 1, size=(m, 2))
        p = np.empty((m, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for a in range(3):
            sel = axis == a
            others = [i for i in range(3) if i != a]
            p[sel, a] = sign[sel]
            p[np.ix_(sel, others)] = uv[sel]
        return p
    if shape == "cylinder":
        # side area 4*pi vs caps 2*pi for unit radius, height 2
        on_side = rng.random(m) < 2.0 / 3.0
        theta = rng.uniform(0, 2 * np.pi, size=m)
        r = np.where(on_side, 1.0, np.sqrt(rng.random(m)))
        z = np.where(on_side, rng.uniform(-1, 1, size=m), rng.choice([-1.0, 1.0], size=m))
        return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    if shape == "plane":
        uv = rng.uniform(-1, 1, size=(m, 2))
        return np.column_stack([uv, np.zeros(m)])
    raise ValueError(f"unknown shape {shape!r}")


def gen_synthetic(
    classes: Sequence[str] = SHAPES,
    per_class: int = 200,
    points: int = 64,
    noise: float = 0.01,
    seed: int = 0,
    rotate: bool = False,
    val_fraction: float = 0.2,
) -> DatasetSplit:
    """Noisy surface samples of simple solids, stratified 80/20 train/val."""
    if points < 8:
        raise ValueError("need at least 8 points per cloud")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label, shape in enumerate(classes):
        clouds = []
        for _ in range(per_class):
            p = sample_surface(shape, points, rng)
            p = p * rng.uniform(0.8, 1.25, size=3)
            p = p + rng.normal(scale=noise, size=p.shape)
            if rotate:
                p = Rotation.random(random_state=rng).apply(p)
            clouds.append(PointCloud(normalize(p), label))
        order = rng.permutation(per_class)
        n_val = int(round(per_class * val_fraction))
        val += [clouds[i] for i in order[:n_val]]
        train += [clouds[i] for i in order[n_val:]]
    return DatasetSplit(
        train,
        val,
        len(classes),
        seed,
        tuple(classes),
        {"per_class": per_class, "points": points, "noise": noise, "rotate": rotate},
    )


def resample(points: np.ndarray, m: int, seed=None) -> np.ndarray:
    """Exactly ``m`` points, without replacement when enough exist, then normalized."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("cannot resample an empty point set")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(p), size=m, replace=len(p) < m)
    return normalize(p[idx])


def parse_off(data: bytes | str) -> np.ndarray:
    """Vertex coordinates of an OFF mesh; faces are checked for count but ignored."""
    text = data.decode("utf-8", errors="strict") if isinstance(data, bytes) else data
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("OFF"):
        raise OffError("missing OFF header")
    head = lines[0][3:].strip()
    # some ModelNet files glue the counts onto the header line
    body = lines[1:]
    if not head:
        if not body:
            raise OffError("missing vertex/face count line")
        head, body = body[0], body[1:]
    try:
        counts = [int(t) for t in head.split()]
    except ValueError:
        raise OffError(f"malformed count line {head!r}") from None
    if len(counts) < 2 or min(counts) < 0:
        raise OffError(f"malformed count line {head!r}")
    n_verts, n_faces = counts[0], counts[1]
    if len(body) < n_verts + n_faces:
        raise OffError(
            f"declared {n_verts} vertices and {n_faces} faces but only {len(body)} data lines"
        )
    verts = np.empty((n_verts, 3))
    for i, ln in enumerate(body[:n_verts]):
        toks = ln.split()
        if len(toks) < 3:
            raise OffError(f"vertex {i} has fewer than 3 coordinates: {ln!r}")
        try:
            verts[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise OffError(f"non-numeric coordinate in vertex {i}: {ln!r}") from None
    if not np.all(np.isfinite(verts)):
        raise OffError("non-finite vertex coordinate")
    return verts


def load_off(path, m: int, label: int = 0, seed=None) -> PointCloud:
    verts = parse_off(Path(path).read_bytes())
    return PointCloud(resample(verts, m, seed), label)


# --- handcrafted baseline ---------------------------------------------------


def handcrafted_features(points: np.ndarray) -> np.ndarray:
    """Pose-invariant descriptors: covariance spectrum and radial statistics."""
    p = points - points.mean(axis=0)
    ev = np.sort(np.linalg.eigvalsh(np.cov(p.T)))
    r = np.linalg.norm(p, axis=1)
    return np.concatenate([ev, [r.mean(), r.std()]])


def nearest_centroid_accuracy(split: DatasetSplit) -> float:
    xt = np.array([handcrafted_features(c.points) for c in split.train])
    yt = np.array([c.label for c in split.train])
    xv = np.array([handcrafted_features(c.points) for c in split.val])
    yv = np.array([c.label for c in split.val])
    mu, sd = xt.mean(axis=0), xt.std(axis=0) + 1e-12
    xt, xv = (xt - mu) / sd, (xv - mu) / sd
    cents = np.stack([xt[yt == c].mean(axis=0) for c in range(split.num_classes)])
    d = ((xv[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == yv).mean())


# --- cache files ------------------------------------------------------------


def save_dataset(split: DatasetSplit, directory) -> Path:
    """Write ``manifest.json`` plus ``points.bin`` (little-endian float64, row-major)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    clouds = split.train + split.val
    m = split.num_points
    blob = np.stack([c.points for c in clouds]).astype("<f8") if clouds else np.zeros(0, "<f8")
    (d / "points.bin").write_bytes(blob.tobytes(order="C"))
    manifest = {
        "format": "hgnas-pointclouds",
        "version": 1,
        "dtype": "<f8",
        "num_points": m,
        "num_classes": split.num_classes,
        "class_names": list(split.class_names),
        "seed": split.seed,
        "train_labels": [c.label for c in split.train],
        "val_labels": [c.label for c in split.val],
        "blob": "points.bin",
        "meta": split.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory) -> DatasetSplit:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    m = manifest["num_points"]
    raw = np.frombuffer((d / manifest["blob"]).read_bytes(), dtype="<f8")
    n_train, n_val = len(manifest["train_labels"]), len(manifest["val_labels"])
    if raw.size != (n_train + n_val) * m * 3:
        raise ValueError(f"blob holds {raw.size} values, manifest implies {(n_train + n_val) * m * 3}")
    pts = raw.reshape(n_train + n_val, m, 3).astype(np.float64)
    labels = manifest["train_labels"] + manifest["val_labels"]
    clouds = [PointCloud(pts[i].copy(), int(labels[i])) for i in range(len(labels))]
    return DatasetSplit(
        clouds[:n_train],
        clouds[n_train:],
        manifest["num_classes"],
        manifest["seed"],
        tuple(manifest["class_names"]),
        manifest.get("meta", {}),
    )
