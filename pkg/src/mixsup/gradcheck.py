"""Finite-difference checks of every loss's analytic gradient.

Each instance draws random logits ``z`` of shape (B, C, H, W), maps them
through a channel softmax and compares ``d loss / d z`` from backprop with
central differences. The error of one instance is
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-8)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L

STEP = 1e-6
TOLERANCE = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64, order="C")  # reshape(-1) must be a view
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    ad.backward(build(t))
    return t.grad.copy()


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def _probs(z):
    return ad.softmax_channel(z, axis=1)


def _labels(rng, shape, classes):
    return rng.integers(0, classes, size=shape)


def _partial(rng, shape, classes):
    dense = rng.integers(0, classes, size=shape)
    dense[rng.random(shape) < 0.6] = -1
    return dense


def _builders(rng, shape):
    """Loss name -> function from a logits tensor to a scalar tensor, with fixed random targets."""
    b, c, h, w = shape
    truth = L.one_hot(_labels(rng, (b, h, w), c), c)
    partial = _partial(rng, (b, h, w), c)
    other = ad.Tensor(rng.normal(size=shape) * 2)
    fixed = _probs(other).data
    weights = L.LossWeights(lambda_w=0.3, lambda_kd=2.0, lambda_ent=0.5)

    def split(z):
        # teacher and student both depend on z so the gradient flows through both sides
        return _probs(z), _probs(z * 0.5 + other)

    return {
        "full_ce": lambda z: L.full_ce(_probs(z), truth),
        "partial_ce": lambda z: L.partial_ce(_probs(z), partial),
        "entropy": lambda z: L.shannon_entropy_loss(_probs(z)),
        "min_entropy": lambda z: L.min_entropy_loss(_probs(z)),
        "kl": lambda z: L.kl_div(_probs(z), fixed, axis=1) + L.kl_div(fixed, _probs(z), axis=1),
        "bhattacharyya": lambda z: L.bhattacharyya(_probs(z), fixed, axis=1),
        "alpha2": lambda z: L.alpha_divergence(_probs(z), fixed, 2.0, axis=1),
        "alpha3": lambda z: L.alpha_divergence(fixed, _probs(z), 3.0, axis=1),
        "alpha5": lambda z: L.alpha_divergence(_probs(z), fixed, 5.0, axis=1),
        "distill": lambda z: L.distill_loss(*split(z), smooth=True),
        "joint": lambda z: L.joint_loss(_probs(z), *_joint_branches(z, other), truth, partial, partial,
                                        weights).total,
    }


def _joint_branches(z, other):
    bottom = _probs(z * 0.5 + other)
    return bottom, _probs(z - other)


LOSSES = ("full_ce", "partial_ce", "entropy", "min_entropy", "kl", "bhattacharyya", "alpha2", "alpha3",
          "alpha5", "distill", "joint")


@dataclass
class GradCheckResult:
    loss: str
    instances: int
    max_error: float
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _near_tie(z, gap=1e-3):
    top2 = np.sort(z, axis=1)[:, -2:]
    return bool(np.any(top2[:, 1] - top2[:, 0] < gap))


def check_loss(name: str, instances: int = 50, seed: int = 0, max_shape=(2, 3, 4, 4)) -> GradCheckResult:
    """Max relative error over ``instances`` random problems for loss ``name``.

    Min-entropy is piecewise smooth; instances whose logits have a near tie
    in the argmax are redrawn so the finite difference stays on one piece.
    """
    if name not in LOSSES:
        raise ValueError(f"unknown loss {name!r}; expected one of {LOSSES}")
    rng = np.random.default_rng([seed, LOSSES.index(name)])
    start = time.perf_counter()
    worst, skipped, done = 0.0, 0, 0
    while done < instances:
        shape = tuple(int(rng.integers(1, m + 1)) for m in max_shape)
        shape = (shape[0], max(shape[1], 2)) + shape[2:]
        z = rng.normal(size=shape) * rng.uniform(0.5, 3.0)
        if name == "min_entropy" and _near_tie(z):
            skipped += 1
            continue
        build = _builders(rng, shape)[name]
        a = analytic_grad(build, z)
        n = numeric_grad(lambda x: build(ad.Tensor(x)).item(), z)
        worst = max(worst, relative_error(a, n))
        done += 1
    return GradCheckResult(name, instances, worst, skipped, time.perf_counter() - start)


def run_all(instances: int = 50, seed: int = 0) -> list[GradCheckResult]:
    return [check_loss(n, instances, seed) for n in LOSSES]
