"""Dice and 95th-percentile Hausdorff distance for binary and label masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def _binary_pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a, b = _binary_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (the frame counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    core = padded[1:-1, 1:-1]
    inner = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return core & ~inner


def nearest_rank(values, q: float = 95.0) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = int(np.ceil(q / 100.0 * len(values)))
    return float(values[max(rank, 1) - 1])


def _directed(src, dst) -> np.ndarray:
    """Distance from every ``src`` pixel to the nearest ``dst`` pixel."""
    _, idx = ndimage.distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = (ys - idx[0][ys, xs]).astype(np.float64)
    dx = (xs - idx[1][ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def sentinel_for(shape) -> float:
    return float(np.hypot(*shape[-2:]))


def hd95(a, b, sentinel: float | None = None) -> float:
    """95th percentile (nearest rank) of the pooled boundary-to-boundary distances.

    If exactly one mask is empty the image diagonal (or ``sentinel``) is
    returned; use :func:`hd95_flagged` to also get the flag.
    """
    return hd95_flagged(a, b, sentinel)[0]


def hd95_flagged(a, b, sentinel: float | None = None) -> tuple[float, bool]:
    a, b = _binary_pair(a, b)
    if not a.any() and not b.any():
        return 0.0, False
    if not a.any() or not b.any():
        return (sentinel_for(a.shape) if sentinel is None else float(sentinel)), True
    ba, bb = boundary(a), boundary(b)
    pooled = np.concatenate([_directed(ba, bb), _directed(bb, ba)])
    return nearest_rank(pooled, 95.0), False


def hd95_bruteforce(a, b) -> float:
    """Reference implementation: all pairwise boundary distances."""
    a, b = _binary_pair(a, b)
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    dy = pa[:, None, 0] - pb[None, :, 0]
    dx = pa[:, None, 1] - pb[None, :, 1]
    d = np.sqrt(dy * dy + dx * dx)
    return nearest_rank(np.concatenate([d.min(axis=1), d.min(axis=0)]), 95.0)


def hausdorff(a, b) -> float:
    a, b = _binary_pair(a, b)
    ba, bb = boundary(a), boundary(b)
    return float(max(_directed(ba, bb).max(), _directed(bb, ba).max()))


# ---------------------------------------------------------------- aggregate


@dataclass
class EvalResult:
    """Mean DSC and HD95 over a set of images for one prediction source."""

    dsc: float
    hd95: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    per_sample_dsc: list[float] = field(default_factory=list)
    sentinel_count: int = 0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "dsc": self.dsc,
            "hd95": self.hd95,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "per_sample_dsc": list(self.per_sample_dsc),
            "sentinel_count": self.sentinel_count,
            "n_samples": self.n_samples,
        }


def score_labels(pred, truth, classes: int) -> EvalResult:
    """Score (N, H, W) predicted label maps against ground truth, foreground classes only."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if len(pred) == 0:
        raise ValueError("nothing to evaluate")
    fg = range(1, classes)
    d = np.zeros((len(pred), len(fg)))
    h = np.zeros_like(d)
    flags = 0
    for i, (p, t) in enumerate(zip(pred, truth)):
        for j, c in enumerate(fg):
            d[i, j] = dice(p == c, t == c)
            h[i, j], flagged = hd95_flagged(p == c, t == c)
            flags += flagged
    return EvalResult(
        dsc=float(d.mean()),
        hd95=float(h.mean()),
        per_class={c: {"dsc": float(d[:, j].mean()), "hd95": float(h[:, j].mean())} for j, c in enumerate(fg)},
        per_sample_dsc=[float(v) for v in d.mean(axis=1)],
        sentinel_count=int(flags),
        n_samples=len(pred),
    )


def evaluate(model, samples, branches=None) -> dict[str, EvalResult]:
    """Per-branch results on ``samples`` (top, bottom and their ensemble when available).

    ``model`` needs ``branches``, ``classes``, ``predict(images, branch)`` and,
    for dual-branch models, ``ensemble_predict(images)``.
    """
    if not samples:
        raise ValueError("split is empty")
    images = np.stack([s.image for s in samples])
    truth = np.stack([s.labels for s in samples])
    available = tuple(model.branches)
    branches = branches or available + (("ensemble",) if len(available) == 2 else ())
    out = {}
    for b in branches:
        pred = model.ensemble_predict(images) if b == "ensemble" else model.predict(images, branch=b)
        out[b] = score_labels(pred, truth, model.classes)
    return out
