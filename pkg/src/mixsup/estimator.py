"""scikit-learn compatible wrapper that trains the dual-branch network."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import losses as L
from .data import make_partial_labels
from .metrics import score_labels
from .model import DualBranchUNet
from .validation import UNLABELED, check_images, check_label_maps, split_supervision

logger = logging.getLogger(__name__)

VARIANTS = ("lower_bound", "upper_bound", "single", "decoupled", "kl", "kl_ent")
SINGLE_BRANCH = ("lower_bound", "upper_bound", "single")


class NumericalAbort(RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, message, epoch, curve):
        super().__init__(message)
        self.epoch = epoch
        self.curve = curve


@dataclass
class Batch:
    images: np.ndarray            # full images first, then weak ones
    n_full: int
    truth_full: np.ndarray        # (m, C, H, W) one-hot
    partial_full: np.ndarray      # (m, H, W), -1 = unlabeled
    partial_weak: np.ndarray      # (w, H, W)


class MixedSupervisedSegmenter(BaseEstimator):
    """Segmentation from a few full masks plus many sparsely labeled images.

    ``fit`` takes images ``X`` and label maps ``y`` in the usual
    semi-supervised convention: images whose map has no ``-1`` are fully
    labeled, the others are partially labeled (``-1`` = unknown pixel).

    Parameters
    ----------
    variant : {"kl_ent", "kl", "decoupled", "single", "lower_bound", "upper_bound"}
        Which model to train. ``kl_ent`` is the full objective; ``kl`` drops
        the entropy term; ``decoupled`` keeps only per-branch supervision;
        ``single`` trains one branch on full and partial labels together;
        ``lower_bound``/``upper_bound`` train one branch with full masks only
        (partially labeled images are ignored / must not be given).
    lambda_w, lambda_kd, lambda_ent : float
        Weights of the partial cross-entropy, distillation and entropy terms.
    divergence : {"kl", "bhattacharyya", "alpha"}
    alpha : float
        Order of the alpha-divergence (ignored otherwise).
    smooth : bool
        Re-apply a channel softmax to both branches before the divergence.
    detach_teacher : bool
        Stop gradients through the teacher side of the divergence.
    levels, base_channels : int
        Network size.
    epochs, batch_size, optimizer, lr, momentum, patience : training schedule.
        ``patience`` epochs without validation improvement stop training
        (only when a validation set is passed to ``fit``).
    ent_start : int
        Epochs trained with the entropy term off. Switching it on restarts
        the patience count.
    clip_norm : float or None
        Rescale the gradient whenever its global norm, measured per fully
        labeled pixel, exceeds this value (None or 0 disables it).
    scribble_budget : int
        Pixels per class of the partial labels generated for fully labeled
        images when ``partial_full`` is not given to ``fit``.
    random_state : int
    """

    def __init__(self, variant="kl_ent", lambda_w=0.001, lambda_kd=50.0, lambda_ent=1.0,
                 single_lambda_w=1.0, divergence="kl", alpha=2.0, smooth=True, detach_teacher=False,
                 levels=3, base_channels=8, head_gain=0.01, standardize=True, epochs=200,
                 batch_size=8, optimizer="sgd", lr=0.1, momentum=0.9, patience=40, ent_start=40,
                 eval_every=1, clip_norm=1.0, scribble_budget=15, random_state=0):
        self.variant = variant
        self.lambda_w = lambda_w
        self.lambda_kd = lambda_kd
        self.lambda_ent = lambda_ent
        self.single_lambda_w = single_lambda_w
        self.divergence = divergence
        self.alpha = alpha
        self.smooth = smooth
        self.detach_teacher = detach_teacher
        self.levels = levels
        self.base_channels = base_channels
        self.head_gain = head_gain
        self.standardize = standardize
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.patience = patience
        self.ent_start = ent_start
        self.eval_every = eval_every
        self.clip_norm = clip_norm
        self.scribble_budget = scribble_budget
        self.random_state = random_state

    # ------------------------------------------------------------ config

    def effective_weights(self) -> L.LossWeights:
        """Loss weights after the variant has switched off the terms it does not use."""
        lw, lkd, lent = self.lambda_w, self.lambda_kd, self.lambda_ent
        if self.variant in ("lower_bound", "upper_bound"):
            lw = lkd = lent = 0.0
        elif self.variant == "single":
            lw, lkd, lent = self.single_lambda_w, 0.0, 0.0
        elif self.variant == "decoupled":
            lkd = lent = 0.0
        elif self.variant == "kl":
            lent = 0.0
        return L.LossWeights(lambda_w=lw, lambda_kd=lkd, lambda_ent=lent,
                             divergence=self.divergence, alpha=self.alpha)

    def _check_params(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        return self.effective_weights()

    @property
    def branches(self):
        return ("top",) if self.variant in SINGLE_BRANCH else ("top", "bottom")

    # -------------------------------------------------------------- fit

    def fit(self, X, y, X_val=None, y_val=None, partial_full=None, callback=None):
        """Train on images ``X`` with label maps ``y`` (``-1`` = unlabeled pixel).

        ``X_val``/``y_val`` (fully labeled) enable per-epoch validation,
        best-epoch model selection and early stopping. ``partial_full``
        gives sparse labels for the fully labeled images (same order as
        they appear in ``X``); when omitted they are drawn as scribbles.
        ``callback(epoch, record)`` is called after every epoch.
        """
        weights = self._check_params()
        X = check_images(X, self.levels)
        y = check_label_maps(y, X)
        full_idx, weak_idx = split_supervision(y)
        if len(full_idx) == 0:
            raise ValueError("at least one fully labeled image is required")
        if self.variant == "upper_bound" and len(weak_idx):
            raise ValueError("upper_bound trains on full masks only; got partially labeled images")
        # every variant takes the same number of steps per epoch
        n_weak_total = len(weak_idx)
        if self.variant == "lower_bound":
            weak_idx = weak_idx[:0]
        classes = int(max(y.max() + 1, 2))
        self.classes_ = np.arange(classes)
        self.n_classes_ = classes

        if partial_full is None:
            partial_full = np.stack([
                make_partial_labels(y[i], budget=self.scribble_budget, seed=[self.random_state, int(i)],
                                    classes=classes).to_dense()
                for i in full_idx
            ])
        else:
            partial_full = check_label_maps(partial_full, X[full_idx], classes)

        Xf, yf, Xw, yw = X[full_idx], y[full_idx], X[weak_idx], y[weak_idx]
        truth_full = L.one_hot(yf, classes)
        validate = X_val is not None
        if validate:
            X_val = check_images(X_val, self.levels)
            y_val = check_label_maps(y_val, X_val, classes)

        model = DualBranchUNet(self.levels, self.base_channels, classes, seed=self.random_state,
                               branches=self.branches, head_gain=self.head_gain,
                               standardize=self.standardize)
        params = model.parameters()
        if self.optimizer == "adam":
            opt = ad.Adam(params, lr=self.lr)
        else:
            opt = ad.SGD(params, lr=self.lr, momentum=self.momentum)
        rng = np.random.default_rng([self.random_state, 7])

        m, nw, bs = len(Xf), len(Xw), self.batch_size
        pixels = X.shape[2] * X.shape[3]
        steps = max(math.ceil(m / bs), math.ceil(n_weak_total / bs), 1)
        self.model_ = model
        self.curve_ = []
        self.grad_norms_ = []
        best = (-np.inf, 0, model.state_dict())
        since_best = 0
        for epoch in range(1, self.epochs + 1):
            fperm, wperm = rng.permutation(m), rng.permutation(nw)
            sums = dict.fromkeys(L.TERMS, 0.0)
            total = 0.0
            ew = weights if epoch > self.ent_start else dataclasses.replace(weights, lambda_ent=0.0)
            if epoch == self.ent_start + 1 and weights.lambda_ent > 0:
                # the objective changes here; patience restarts with it
                since_best = 0
            for s in range(steps):
                fi = _cycle(fperm, s, bs)
                wi = _cycle(wperm, s, bs) if nw else wperm
                batch = Batch(np.concatenate([Xf[fi], Xw[wi]]), len(fi), truth_full[fi], partial_full[fi], yw[wi])
                jl = self._loss(model, batch, ew)
                if not np.isfinite(jl.total.item()):
                    model.load_state_dict(best[2])
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}, step {s}: {jl.terms}",
                                         epoch, list(self.curve_))
                opt.zero_grad()
                ad.backward(jl.total)
                scale = 1.0 / (len(fi) * pixels)
                if self.optimizer == "sgd":
                    # the loss is pixel-summed; SGD steps are taken per fully labeled pixel
                    opt.lr = self.lr * scale
                norm = scale * math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
                self.grad_norms_.append(norm)
                if self.clip_norm and norm > self.clip_norm:
                    for p in params:
                        if p.grad is not None:
                            p.grad *= self.clip_norm / norm
                opt.step()
                total += jl.total.item()
                for k in L.TERMS:
                    sums[k] += jl.terms[k]
            record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "total": total / steps}
            if validate and (epoch % self.eval_every == 0 or epoch == self.epochs):
                record["val_dsc"] = score_labels(model.predict(X_val), y_val, classes).dsc
                if record["val_dsc"] > best[0]:
                    best = (record["val_dsc"], epoch, model.state_dict())
                    since_best = 0
                else:
                    since_best += 1
            else:
                record["val_dsc"] = float("nan")
            self.curve_.append(record)
            if callback is not None:
                callback(epoch, record)
            if validate and since_best * self.eval_every >= self.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
        if validate:
            model.load_state_dict(best[2])
            self.best_epoch_ = best[1]
            self.best_val_dsc_ = best[0]
        else:
            self.best_epoch_ = len(self.curve_)
            self.best_val_dsc_ = float("nan")
        self.n_epochs_ = len(self.curve_)
        return self

    def _loss(self, model, batch: Batch, weights: L.LossWeights) -> L.JointLoss:
        skips = model.encode(batch.images)
        m = batch.n_full
        has_weak = m < len(batch.images)
        if self.variant in SINGLE_BRANCH:
            out = model.decode(skips, "top")
            full = ad.slice_(out, np.s_[:m]) if has_weak else out
            weak = ad.slice_(out, np.s_[m:]) if has_weak else None
            # full images already carry complete masks; only D_w adds partial pixels
            return L.joint_loss(full, full, weak, batch.truth_full, None,
                                batch.partial_weak if has_weak else None, weights, smooth=self.smooth)
        top_skips = [ad.slice_(s, np.s_[:m]) for s in skips] if has_weak else skips
        top_full = model.decode(top_skips, "top")
        bottom = model.decode(skips, "bottom")
        bottom_full = ad.slice_(bottom, np.s_[:m]) if has_weak else bottom
        bottom_weak = ad.slice_(bottom, np.s_[m:]) if has_weak else None
        return L.joint_loss(top_full, bottom_full, bottom_weak, batch.truth_full, batch.partial_full,
                            batch.partial_weak if has_weak else None, weights,
                            smooth=self.smooth, detach_teacher=self.detach_teacher)

    # ----------------------------------------------------------- probes

    def term_gradients(self, X, y, partial_full=None) -> dict[str, dict[str, float]]:
        """Max |gradient| of each weighted loss term, per parameter group, at the current weights.

        Every term is built with its graph intact (even with a zero weight)
        and back-propagated on its own.
        """
        check_is_fitted(self)
        X = check_images(X, self.levels)
        y = check_label_maps(y, X, self.n_classes_)
        fi, wi = split_supervision(y)
        if partial_full is None:
            partial_full = np.stack([
                make_partial_labels(y[i], budget=self.scribble_budget, seed=[self.random_state, int(i)],
                                    classes=self.n_classes_).to_dense() for i in fi])
        batch = Batch(np.concatenate([X[fi], X[wi]]), len(fi), L.one_hot(y[fi], self.n_classes_),
                      partial_full, y[wi])
        w = self.effective_weights()
        lambdas = {"L_s": 1.0, "L_w": w.lambda_w, "L_kd": w.lambda_kd, "L_ent": w.lambda_ent}
        model = self.model_
        groups = ("encoder",) + model.branches
        out = {}
        for term in L.TERMS:
            ad.zero_grad(model.parameters())
            t = self._raw_term(model, batch, term, w)
            if t is None:
                out[term] = {g: 0.0 for g in groups}
                continue
            ad.backward(lambdas[term] * t)
            out[term] = {g: float(max(np.abs(p.grad).max() for p in model.parameters(g))) for g in groups}
        ad.zero_grad(model.parameters())
        return out

    def _raw_term(self, model, batch, term, w):
        skips = model.encode(batch.images)
        m = batch.n_full
        has_weak = m < len(batch.images)
        if term == "L_s":
            return L.full_ce(model.decode([ad.slice_(s, np.s_[:m]) for s in skips], "top"), batch.truth_full)
        branch = "top" if self.variant in SINGLE_BRANCH else "bottom"
        out = model.decode(skips, branch)
        full, weak = ad.slice_(out, np.s_[:m]), ad.slice_(out, np.s_[m:]) if has_weak else None
        if term == "L_w":
            parts = [] if branch == "top" else [L.partial_ce(full, batch.partial_full)]
            if weak is not None:
                parts.append(L.partial_ce(weak, batch.partial_weak))
            return L._sum_terms(parts) if parts else None
        if branch == "top":
            return None
        if term == "L_kd":
            top = model.decode([ad.slice_(s, np.s_[:m]) for s in skips], "top")
            return L.distill_loss(top, full, kind=w.divergence, alpha=w.alpha, smooth=self.smooth,
                                  detach_teacher=self.detach_teacher)
        return L.shannon_entropy_loss(weak) if weak is not None else None

    # ----------------------------------------------------------- predict

    def predict_proba(self, X, branch=None) -> np.ndarray:
        """(N, C, H, W) class probabilities from ``branch`` (default: the inference branch)."""
        check_is_fitted(self)
        return self.model_.predict_proba(check_images(X, self.levels), branch)

    def predict(self, X, branch=None) -> np.ndarray:
        """(N, H, W) label maps from the bottom branch (the only branch for single-branch variants)."""
        check_is_fitted(self)
        return self.model_.predict(check_images(X, self.levels), branch)

    def predict_ensemble(self, X) -> np.ndarray:
        check_is_fitted(self)
        if len(self.model_.branches) < 2:
            raise ValueError(f"variant {self.variant!r} has a single branch; no ensemble")
        return self.model_.ensemble_predict(check_images(X, self.levels))

    def score(self, X, y, branch=None) -> float:
        """Mean foreground Dice of ``predict(X)`` against full label maps ``y``."""
        check_is_fitted(self)
        X = check_images(X, self.levels)
        y = check_label_maps(y, X, self.n_classes_)
        return score_labels(self.predict(X, branch), y, self.n_classes_).dsc

    def __sklearn_is_fitted__(self):
        return hasattr(self, "model_")

    def clone_fitted(self) -> "MixedSupervisedSegmenter":
        return copy.deepcopy(self)


def _cycle(perm, step, bs):
    n = len(perm)
    if n == 0:
        return perm
    if n <= bs:
        return perm
    idx = (np.arange(bs) + step * bs) % n
    return perm[idx]


def labels_with_partial(full_labels, partial_dense):
    """Build a fit-ready label stack from full maps and dense partial maps."""
    return np.concatenate([np.asarray(full_labels), np.asarray(partial_dense)]).astype(np.int64)


__all__ = ["MixedSupervisedSegmenter", "NumericalAbort", "VARIANTS", "UNLABELED", "labels_with_partial"]
