"""Synthetic segmentation tasks with full masks and sparse scribble/point labels.

Each image holds one "organ": a filled ellipse or a ring (class 1), with an
optional surrounding ring (class 2) when three classes are requested. The
organ is brighter than a smoothly varying background; both levels and the
contrast change from image to image, and Gaussian noise is added on top.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import PartialLabelMask, one_hot

MAX_RETRIES = 50
DEFAULT_BUDGET = 15

SETTINGS = {"set3": 3, "set5": 5, "set10": 10}


@dataclass(frozen=True)
class TaskConstants:
    """Appearance and geometry constants of the generator (intensities in [0, 1] units)."""

    noise_sigma: float = 0.1
    background_range: tuple[float, float] = (0.15, 0.55)
    contrast_range: tuple[float, float] = (0.2, 0.45)
    texture_amplitude: float = 0.12
    edge_blur: float = 0.8
    ring_prob: float = 0.3
    radius_fraction: tuple[float, float] = (0.13, 0.32)
    foreground_bounds: tuple[float, float] = (0.02, 0.40)

    def __post_init__(self):
        for name in ("background_range", "contrast_range", "radius_fraction", "foreground_bounds"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))

    def problems(self) -> list[str]:
        out = []
        for name in ("background_range", "contrast_range", "radius_fraction", "foreground_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                out.append(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.noise_sigma < 0 or self.texture_amplitude < 0 or self.edge_blur < 0:
            out.append("noise_sigma, texture_amplitude and edge_blur must be >= 0")
        if not 0 <= self.ring_prob <= 1:
            out.append(f"ring_prob must lie in [0, 1], got {self.ring_prob}")
        if self.radius_fraction[0] <= 0:
            out.append("radius_fraction must be positive")
        if self.foreground_bounds[0] < 0 or self.foreground_bounds[1] > 1:
            out.append("foreground_bounds must lie in [0, 1]")
        return out

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


DEFAULT_CONSTANTS = TaskConstants()
VAL_SIZE = 8
TEST_SIZE = 24


@dataclass
class SampleRecord:
    """One synthetic image with its exact mask and a sparse annotation."""

    id: int
    image: np.ndarray          # (1, H, W) float64
    labels: np.ndarray         # (H, W) int class map
    partial_mask: PartialLabelMask
    classes: int
    supervision: str | None = None   # "full" (D_s) or "weak" (D_w) once split

    @property
    def full_mask(self) -> np.ndarray:
        """(C, H, W) one-hot ground truth."""
        return one_hot(self.labels[None], self.classes)[0]

    @property
    def foreground_fraction(self) -> float:
        return float(np.mean(self.labels > 0))


@dataclass
class DatasetSplit:
    train_full: list[SampleRecord]
    train_weak: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]
    name: str = ""
    ratio: float = 5.0

    def ids(self) -> dict[str, list[int]]:
        return {k: [s.id for s in getattr(self, k)] for k in ("train_full", "train_weak", "val", "test")}


# ------------------------------------------------------------------ geometry


def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def _organ(rng, h, w, classes, const):
    side = min(h, w)
    ry, rx = rng.uniform(*const.radius_fraction, size=2) * side
    margin = max(ry, rx) + 2
    cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
    cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
    theta = rng.uniform(0, np.pi)
    r2 = _ellipse(h, w, cy, cx, ry, rx, theta)
    labels = np.zeros((h, w), dtype=np.int64)
    inner = r2 <= 1.0
    if rng.random() < const.ring_prob:
        inner &= r2 >= rng.uniform(0.25, 0.45)
    labels[inner] = 1
    if classes >= 3:
        thickness = rng.uniform(1.25, 1.6)
        labels[(r2 > 1.0) & (r2 <= thickness ** 2)] = 2
    return labels


def _texture(rng, h, w, amplitude):
    field = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8, mode="wrap")
    field /= np.abs(field).max() + 1e-12
    return amplitude * field


def _render(rng, labels, classes, const):
    h, w = labels.shape
    bg = rng.uniform(*const.background_range)
    contrast = rng.uniform(*const.contrast_range)
    levels = np.array([bg, bg + contrast, bg + 0.5 * contrast])[:classes]
    clean = levels[labels]
    clean = ndimage.gaussian_filter(clean, const.edge_blur) if const.edge_blur > 0 else clean
    img = clean + _texture(rng, h, w, const.texture_amplitude) + rng.normal(0.0, const.noise_sigma, size=(h, w))
    return img[None]


def generate_sample(seed: int, index: int, h: int, w: int, classes: int = 2,
                    style: str = "scribbles", budget: int = DEFAULT_BUDGET,
                    constants: TaskConstants | None = None) -> SampleRecord:
    const = constants or DEFAULT_CONSTANTS
    rng = np.random.default_rng([seed, index])
    lo, hi = const.foreground_bounds
    for _ in range(MAX_RETRIES):
        labels = _organ(rng, h, w, classes, const)
        frac = np.mean(labels > 0)
        if lo <= frac <= hi and np.any(labels == 1):
            break
    else:
        raise RuntimeError(f"could not place an organ in a {h}x{w} frame after {MAX_RETRIES} tries")
    image = _render(rng, labels, classes, const)
    partial = make_partial_labels(labels, style=style, budget=budget, seed=[seed, index, 1],
                                  classes=classes)
    return SampleRecord(id=index, image=image, labels=labels, partial_mask=partial, classes=classes)


def generate_task(seed: int, n_samples: int, h: int = 32, w: int = 32, classes: int = 2,
                  style: str = "scribbles", budget: int = DEFAULT_BUDGET,
                  constants: TaskConstants | None = None) -> list[SampleRecord]:
    """``n_samples`` deterministic samples; sample ``i`` depends only on ``(seed, i)``."""
    if h < 16 or w < 16:
        raise ValueError(f"image sides must be >= 16, got {h}x{w}")
    if classes not in (2, 3):
        raise ValueError(f"classes must be 2 or 3, got {classes}")
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    const = constants or DEFAULT_CONSTANTS
    bad = const.problems()
    if bad:
        raise ValueError("invalid generator constants: " + "; ".join(bad))
    return [generate_sample(seed, i, h, w, classes, style, budget, const) for i in range(n_samples)]


# ------------------------------------------------------------ partial labels


def _interior(region):
    eroded = ndimage.binary_erosion(region)
    return eroded if eroded.any() else region


def _random_walk(region, budget, rng):
    start_pool = np.argwhere(_interior(region))
    pos = tuple(start_pool[rng.integers(len(start_pool))])
    path = [pos]
    visited = {pos}
    target = min(budget, int(region.sum()))
    moves = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
    h, w = region.shape
    for _ in range(50 * budget):
        if len(visited) >= target:
            break
        y, x = pos + moves[rng.integers(4)]
        if 0 <= y < h and 0 <= x < w and region[y, x]:
            pos = (int(y), int(x))
            if pos not in visited:
                visited.add(pos)
                path.append(pos)
    return path


def make_partial_labels(labels, style: str = "scribbles", budget: int = DEFAULT_BUDGET, seed=0,
                        classes: int | None = None) -> PartialLabelMask:
    """Sparse labels drawn inside each class present in ``labels`` (an (H, W) class map).

    ``points`` samples ``budget`` pixels per class uniformly; ``scribbles``
    lays a 4-connected random walk of ``budget`` distinct pixels started in
    the eroded class region. Absent classes contribute nothing.
    """
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels.argmax(axis=0)
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if style not in ("points", "scribbles"):
        raise ValueError(f"style must be 'points' or 'scribbles', got {style!r}")
    classes = classes or int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    coords, values = [], []
    for c in range(classes):
        region = labels == c
        if not region.any():
            continue
        if style == "points":
            pool = np.argwhere(region)
            pick = pool[rng.choice(len(pool), size=min(budget, len(pool)), replace=False)]
            pts = [tuple(p) for p in pick]
        else:
            pts = _random_walk(region, budget, rng)
        coords.extend(pts)
        values.extend([c] * len(pts))
    return PartialLabelMask(np.array(coords, dtype=np.int64).reshape(-1, 2), np.array(values), labels.shape)


# -------------------------------------------------------------------- splits


def pool_size(name: str, ratio: float = 5.0) -> int:
    m = SETTINGS[name]
    return VAL_SIZE + TEST_SIZE + m + int(np.floor(ratio * m))


def make_setting(name: str, pool: list[SampleRecord], ratio: float = 5.0) -> DatasetSplit:
    """Carve val (8), test (24), ``m`` full and ``floor(ratio * m)`` weak samples from ``pool``.

    The split is positional so it is stable across runs: validation and
    test come first, then the fully labeled images, then the weak ones.
    """
    if name not in SETTINGS:
        raise ValueError(f"unknown setting {name!r}; expected one of {sorted(SETTINGS)}")
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    m = SETTINGS[name]
    n_weak = int(np.floor(ratio * m))
    need = pool_size(name, ratio)
    if len(pool) < need:
        raise ValueError(f"{name} with ratio {ratio} needs {need} samples, pool has {len(pool)}")
    val = pool[:VAL_SIZE]
    test = pool[VAL_SIZE:VAL_SIZE + TEST_SIZE]
    start = VAL_SIZE + TEST_SIZE
    full = [dataclasses.replace(s, supervision="full") for s in pool[start:start + m]]
    weak = [dataclasses.replace(s, supervision="weak") for s in pool[start + m:start + m + n_weak]]
    return DatasetSplit(train_full=full, train_weak=weak, val=list(val), test=list(test), name=name, ratio=ratio)


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 0, 0))


def stack_labels(samples) -> np.ndarray:
    return np.stack([s.labels for s in samples])


def stack_partial(samples) -> np.ndarray:
    return np.stack([s.partial_mask.to_dense() for s in samples])


# ------------------------------------------------------------------ file IO

DATASET_FORMAT = 1


def save_dataset(samples, out_dir, seed: int, params: dict | None = None, split: DatasetSplit | None = None,
                 constants: TaskConstants | None = None) -> Path:
    """Write ``manifest.json`` plus one ``.npy`` file per array under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("images", "labels", "partial"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    membership = {}
    if split is not None:
        for part, ids in split.ids().items():
            for i in ids:
                membership[i] = part
    entries = []
    for s in samples:
        stem = f"{s.id:05d}.npy"
        np.save(out / "images" / stem, s.image)
        np.save(out / "labels" / stem, s.labels)
        np.save(out / "partial" / stem, s.partial_mask.to_dense())
        entries.append({
            "id": s.id,
            "image": f"images/{stem}",
            "labels": f"labels/{stem}",
            "partial": f"partial/{stem}",
            "foreground_fraction": round(s.foreground_fraction, 6),
            "split": membership.get(s.id),
        })
    manifest = {
        "format": DATASET_FORMAT,
        "seed": seed,
        "params": params or {},
        "constants": (constants or DEFAULT_CONSTANTS).to_dict(),
        "classes": samples[0].classes if samples else None,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> tuple[list[SampleRecord], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')}")
    classes = manifest["classes"]
    samples = []
    for e in manifest["samples"]:
        partial = PartialLabelMask.from_dense(np.load(path / e["partial"]))
        sup = {"train_full": "full", "train_weak": "weak"}.get(e.get("split"))
        samples.append(SampleRecord(id=e["id"], image=np.load(path / e["image"]),
                                    labels=np.load(path / e["labels"]), partial_mask=partial,
                                    classes=classes, supervision=sup))
    return samples, manifest
