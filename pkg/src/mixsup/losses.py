"""Segmentation objectives over per-pixel categorical distributions.

All losses are summed over pixels (not averaged). Probability maps are
``(B, C, H, W)`` tensors (a ``(C, H, W)`` map is treated as a batch of one)
and every log/power clamps its input at ``EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor, as_tensor

SIMPLEX_TOL = 1e-6
DIVERGENCES = ("kl", "bhattacharyya", "alpha")


class SimplexError(ValueError):
    """Input is not a categorical distribution along the channel axis."""


@dataclass(frozen=True)
class PartialLabelMask:
    """Sparse annotation of one image: ``labels[k]`` is the class of pixel ``coords[k]``."""

    coords: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(coords) != len(labels):
            raise ValueError("coords and labels must have the same length")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def __len__(self):
        return len(self.labels)

    def check_bounds(self):
        h, w = self.shape
        c = self.coords
        if len(c) and (c.min() < 0 or c[:, 0].max() >= h or c[:, 1].max() >= w):
            bad = c[(c[:, 0] < 0) | (c[:, 1] < 0) | (c[:, 0] >= h) | (c[:, 1] >= w)][0]
            raise IndexError(f"partial label at {tuple(bad)} outside image of shape {self.shape}")

    def to_dense(self) -> np.ndarray:
        """(H, W) int map with -1 at unlabeled pixels."""
        self.check_bounds()
        dense = np.full(self.shape, -1, dtype=np.int64)
        dense[self.coords[:, 0], self.coords[:, 1]] = self.labels
        return dense

    @classmethod
    def from_dense(cls, dense) -> "PartialLabelMask":
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense >= 0)
        return cls(np.stack([rows, cols], axis=1), dense[rows, cols], dense.shape)


@dataclass
class LossWeights:
    """Weights of the joint objective and the distillation divergence."""

    lambda_w: float = 0.001
    lambda_kd: float = 50.0
    lambda_ent: float = 1.0
    divergence: str = "kl"
    alpha: float = 2.0

    def __post_init__(self):
        for name in ("lambda_w", "lambda_kd", "lambda_ent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if self.divergence == "alpha" and self.alpha == 1:
            raise ValueError("alpha=1 is the KL divergence; use divergence='kl'")


# ------------------------------------------------------------------ helpers


def _batched(p) -> Tensor:
    p = as_tensor(p)
    if p.ndim == 3:
        return ad.slice_(p, (None,))
    if p.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) or (C, H, W) map, got shape {p.shape}")
    return p


def check_simplex(p, axis: int = 1, tol: float = SIMPLEX_TOL) -> None:
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if np.any(data < -tol) or np.any(np.abs(data.sum(axis=axis) - 1.0) > tol):
        raise SimplexError(f"input is not on the simplex along axis {axis} (tolerance {tol})")


def _check_pair(op, p, q):
    if p.shape != q.shape:
        raise ad.ShapeError(op, p.shape, q.shape)


def one_hot(labels, classes: int) -> np.ndarray:
    """(B, H, W) int labels -> (B, C, H, W) float one-hot; -1 entries become all-zero."""
    labels = np.asarray(labels)
    out = (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(np.float64)
    return out


# ------------------------------------------------------------ supervised terms


def full_ce(pred, truth) -> Tensor:
    """Cross-entropy ``-sum y^T log p`` over all pixels; ``truth`` is one-hot."""
    pred = _batched(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if truth.ndim == 3:
        truth = truth[None]
    if truth.shape != pred.shape:
        raise ad.ShapeError("full_ce", pred.shape, truth.shape)
    check_simplex(pred)
    return -ad.sum_(ad.mul(truth, ad.log(pred)))


def partial_mask_array(partial, shape) -> np.ndarray:
    """Dense one-hot indicator of labeled pixels, shape (B, C, H, W)."""
    b, c, h, w = shape
    if isinstance(partial, PartialLabelMask):
        partial = [partial]
    if isinstance(partial, (list, tuple)):
        dense = np.stack([m.to_dense() for m in partial])
    else:
        dense = np.asarray(partial)
        if dense.ndim == 2:
            dense = dense[None]
    if dense.shape != (b, h, w):
        raise ad.ShapeError("partial_ce", shape, dense.shape)
    if np.any(dense >= c):
        raise IndexError(f"partial label class {dense.max()} out of range for {c} classes")
    return one_hot(dense, c)


def partial_ce(pred, partial) -> Tensor:
    """Cross-entropy over labeled pixels only.

    ``partial`` is a :class:`PartialLabelMask`, a list of them (one per
    image) or a dense (B, H, W) int map with -1 marking unlabeled pixels.
    """
    pred = _batched(pred)
    check_simplex(pred)
    mask = partial_mask_array(partial, pred.shape)
    return -ad.sum_(ad.mul(mask, ad.log(pred)))


def shannon_entropy_loss(pred) -> Tensor:
    """Sum over pixels of ``-p^T log p`` (``0 log 0 = 0``)."""
    pred = _batched(pred)
    check_simplex(pred)
    return -ad.sum_(ad.mul(pred, ad.log(pred)))


def pseudo_mask(pred, axis: int = 1) -> np.ndarray:
    """One-hot argmax along ``axis``; ties resolve to the lowest class index."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    idx = data.argmax(axis=axis)
    classes = data.shape[axis]
    return (np.expand_dims(idx, axis) == np.arange(classes).reshape(
        [-1 if a == axis % data.ndim else 1 for a in range(data.ndim)]
    )).astype(np.float64)


def min_entropy_loss(pred) -> Tensor:
    """Sum over pixels of ``-log max_c p``.

    Evaluated as cross-entropy against the argmax pseudo-mask, which is also
    the subgradient this loss takes.
    """
    pred = _batched(pred)
    check_simplex(pred)
    return -ad.sum_(ad.mul(pseudo_mask(pred), ad.log(pred)))


# ---------------------------------------------------------------- divergences


def kl_div(p, q, axis: int = 0) -> Tensor:
    """``sum p log(p / q)``; summed over every pixel for maps."""
    p, q = as_tensor(p), as_tensor(q)
    _check_pair("kl_div", p, q)
    check_simplex(p, axis)
    check_simplex(q, axis)
    return ad.sum_(ad.mul(p, ad.log(p) - ad.log(q)))


def bhattacharyya(p, q, axis: int = 0) -> Tensor:
    """``-log sum_k sqrt(p_k q_k)`` per pixel, summed over pixels."""
    p, q = as_tensor(p), as_tensor(q)
    _check_pair("bhattacharyya", p, q)
    check_simplex(p, axis)
    check_simplex(q, axis)
    # sqrt(p) * sqrt(q) rather than sqrt(p * q): the product of two small
    # probabilities would hit the clamp long before either factor does
    coeff = ad.sum_(ad.mul(ad.pow(p, 0.5), ad.pow(q, 0.5)), axis=axis)
    return -ad.sum_(ad.log(coeff))


def alpha_divergence(p, q, alpha: float, axis: int = 0) -> Tensor:
    """Tsallis alpha-divergence ``(1 - sum p^a q^(1-a)) / (1 - a)``, summed over pixels."""
    if alpha == 1:
        raise ValueError("alpha=1 is the limit case; use kl_div")
    p, q = as_tensor(p), as_tensor(q)
    _check_pair("alpha_divergence", p, q)
    check_simplex(p, axis)
    check_simplex(q, axis)
    inner = ad.sum_(ad.mul(ad.pow(p, alpha), ad.pow(q, 1.0 - alpha)), axis=axis)
    return ad.mul(ad.sum_(1.0 - inner), 1.0 / (1.0 - alpha))


def divergence(p, q, kind: str = "kl", alpha: float = 2.0, axis: int = 0) -> Tensor:
    if kind == "kl":
        return kl_div(p, q, axis=axis)
    if kind == "bhattacharyya":
        return bhattacharyya(p, q, axis=axis)
    if kind == "alpha":
        return alpha_divergence(p, q, alpha, axis=axis)
    raise ValueError(f"unknown divergence {kind!r}; expected one of {DIVERGENCES}")


def distill_loss(top, bottom, kind: str = "kl", alpha: float = 2.0, smooth: bool = True,
                 detach_teacher: bool = False) -> Tensor:
    """Teacher-to-student divergence ``D(top || bottom)`` summed over pixels.

    With ``smooth`` both maps are passed through a second channel softmax
    before the divergence.
    """
    if top is bottom:
        raise ValueError("distill_loss needs two different branches; got the same map twice")
    top, bottom = _batched(top), _batched(bottom)
    _check_pair("distill_loss", top, bottom)
    check_simplex(top)
    check_simplex(bottom)
    if detach_teacher:
        top = ad.detach(top)
    if smooth:
        top = ad.softmax_channel(top, axis=1)
        bottom = ad.softmax_channel(bottom, axis=1)
    return divergence(top, bottom, kind=kind, alpha=alpha, axis=1)


# ------------------------------------------------------------------- joint


TERMS = ("L_s", "L_w", "L_kd", "L_ent")


@dataclass
class JointLoss:
    total: Tensor
    terms: dict[str, float]
    weighted: dict[str, float]
    per_pixel: dict[str, float] = field(default_factory=dict)

    def breakdown(self) -> dict[str, float]:
        return dict(self.terms)


class LossTermError(ValueError):
    def __init__(self, term: str, cause: Exception):
        self.term = term
        self.cause = cause
        super().__init__(f"{term}: {type(cause).__name__}: {cause}")


def _term(name, fn, *args, **kwargs) -> Tensor:
    try:
        return fn(*args, **kwargs)
    except (ValueError, IndexError) as exc:
        raise LossTermError(name, exc) from exc


def joint_loss(top_full, bottom_full, bottom_weak, truth_full, partial_full, partial_weak,
               weights: LossWeights, smooth: bool = True, detach_teacher: bool = False) -> JointLoss:
    """Weighted objective ``L_s + lw L_w + lkd L_kd + lent L_ent``.

    ``top_full``/``bottom_full`` are the two branches on the fully labeled
    images, ``bottom_weak`` the student on the partially labeled ones. The
    partial term covers both the partial copies of the full images and the
    weak images; the entropy term covers the weak images only. A term whose
    weight is zero is not built and is reported as 0.

    The optimised total is pixel-summed; ``per_pixel`` divides each term by
    the pixels it covers (labeled pixels for the partial term), for logs only.
    """
    raw: dict[str, Tensor] = {k: Tensor(0.0) for k in TERMS}
    npix = dict.fromkeys(TERMS, 0)
    raw["L_s"] = _term("L_s", full_ce, top_full, truth_full)
    npix["L_s"] = _pixels(top_full)

    if weights.lambda_w > 0:
        parts = []
        if bottom_full is not None and partial_full is not None:
            parts.append(_term("L_w", partial_ce, bottom_full, partial_full))
            npix["L_w"] += _labeled(partial_full)
        if bottom_weak is not None and partial_weak is not None:
            parts.append(_term("L_w", partial_ce, bottom_weak, partial_weak))
            npix["L_w"] += _labeled(partial_weak)
        raw["L_w"] = _sum_terms(parts)

    if weights.lambda_kd > 0 and bottom_full is not None:
        raw["L_kd"] = _term("L_kd", distill_loss, top_full, bottom_full, kind=weights.divergence,
                            alpha=weights.alpha, smooth=smooth, detach_teacher=detach_teacher)
        npix["L_kd"] = _pixels(bottom_full)

    if weights.lambda_ent > 0 and bottom_weak is not None:
        raw["L_ent"] = _term("L_ent", shannon_entropy_loss, bottom_weak)
        npix["L_ent"] = _pixels(bottom_weak)

    lambdas = {"L_s": 1.0, "L_w": weights.lambda_w, "L_kd": weights.lambda_kd, "L_ent": weights.lambda_ent}
    total = raw["L_s"]
    for name in TERMS[1:]:
        if lambdas[name] > 0 and npix[name]:
            total = total + lambdas[name] * raw[name]
    terms = {k: raw[k].item() for k in TERMS}
    return JointLoss(
        total=total,
        terms=terms,
        weighted={k: lambdas[k] * terms[k] for k in TERMS},
        per_pixel={k: terms[k] / npix[k] if npix[k] else 0.0 for k in TERMS},
    )


def _sum_terms(parts):
    if not parts:
        return Tensor(0.0)
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def _labeled(partial) -> int:
    if isinstance(partial, PartialLabelMask):
        return len(partial)
    if isinstance(partial, (list, tuple)):
        return sum(len(m) for m in partial)
    return int(np.sum(np.asarray(partial) >= 0))


def _pixels(t) -> int:
    if t is None:
        return 0
    s = t.shape
    return int(np.prod(s)) // s[-3]
