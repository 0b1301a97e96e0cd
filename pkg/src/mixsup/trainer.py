"""Experiment runners: single training runs, pseudo-label retraining, matrices and sweeps.

Every run writes ``<runs>/<run name>/`` with ``report.json``, ``curve.csv``
and ``model.npz``. The runs root is ``$MIXSUP_RUNS_DIR`` (default ``runs``).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .config import BASE_VARIANTS, TRAIN_VARIANTS, ExperimentConfig
from .data import (DatasetSplit, generate_task, load_dataset, make_setting, pool_size, stack_images,
                   stack_labels, stack_partial)
from .estimator import MixedSupervisedSegmenter, NumericalAbort, labels_with_partial
from .metrics import evaluate, score_labels

logger = logging.getLogger(__name__)

RUNS_ENV = "MIXSUP_RUNS_DIR"
CURVE_COLUMNS = ("epoch", "L_s", "L_w", "L_kd", "L_ent", "val_dsc")
MATRIX_COLUMNS = ("setting", "variant", "branch", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std", "seeds",
                  "status")
SWEEP_COLUMNS = ("dsc_mean", "dsc_std", "hd95_mean", "hd95_std", "seeds", "status")

DIVERGENCE_GRID = (("kl", None), ("bhattacharyya", None), ("alpha", 2.0), ("alpha", 3.0), ("alpha", 5.0))
RATIO_GRID = (2, 3, 5, 8)
LAMBDA_KD_GRID = (0.1, 1.0, 10.0, 50.0, 100.0, 1000.0)
LAMBDA_W_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)
IDENTITY_TOL = 1e-9


def runs_root(root=None) -> Path:
    return Path(root if root is not None else os.environ.get(RUNS_ENV, "runs"))


class TrainingAborted(RuntimeError):
    """A run stopped on a non-finite loss; ``report`` holds the last good state."""

    def __init__(self, report: "RunReport"):
        super().__init__(report.diagnostic)
        self.report = report


@dataclass
class RunReport:
    name: str
    variant: str
    seed: int
    config: dict
    curve: list[dict]
    results: dict[str, dict]
    best_epoch: int
    n_epochs: int
    wall_time: float
    status: str = "ok"
    diagnostic: str = ""
    extra: dict = field(default_factory=dict)
    run_dir: str | None = None

    @property
    def inference_branch(self) -> str:
        return "bottom" if "bottom" in self.results else "top"

    def dsc(self, branch: str | None = None) -> float:
        return self.results[branch or self.inference_branch]["dsc"]

    def hd95(self, branch: str | None = None) -> float:
        return self.results[branch or self.inference_branch]["hd95"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("run_dir")
        d["inference_branch"] = self.inference_branch
        return d

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2) + "\n")
        write_curve(self.curve, run_dir / "curve.csv")
        self.run_dir = str(run_dir)
        return run_dir

    @classmethod
    def read(cls, run_dir) -> "RunReport":
        d = json.loads((Path(run_dir) / "report.json").read_text())
        d.pop("inference_branch", None)
        return cls(**d, run_dir=str(run_dir))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_curve(curve, path) -> Path:
    # repr keeps every float bit, so two identical runs give byte-identical files
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for rec in curve:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in CURVE_COLUMNS[1:]])
    return Path(path)


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------- data


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    """The train/val/test split for ``cfg``: from ``cfg.dataset`` if set, else generated."""
    if cfg.dataset:
        samples, manifest = load_dataset(cfg.dataset)
        parts = {k: [] for k in ("train_full", "train_weak", "val", "test")}
        by_id = {e["id"]: e.get("split") for e in manifest["samples"]}
        for s in samples:
            if by_id.get(s.id) in parts:
                parts[by_id[s.id]].append(s)
        if parts["train_full"] and parts["val"] and parts["test"]:
            return DatasetSplit(**parts, name=manifest.get("params", {}).get("setting", cfg.setting),
                                ratio=manifest.get("params", {}).get("ratio", cfg.ratio))
        return make_setting(cfg.setting, samples, cfg.ratio)
    pool = generate_task(cfg.data_seed, pool_size(cfg.setting, cfg.ratio), cfg.size, cfg.size, cfg.classes,
                         style=cfg.style, budget=cfg.budget, constants=cfg.constants)
    return make_setting(cfg.setting, pool, cfg.ratio)


def training_arrays(split: DatasetSplit, variant: str):
    """(X, y, partial_full) for ``fit``: full images first, then weak ones with ``-1`` for unknown pixels."""
    full, weak = split.train_full, split.train_weak
    if variant == "lower_bound":
        weak = []
    if variant == "upper_bound":
        samples = full + weak
        return stack_images(samples), stack_labels(samples), stack_partial(samples)
    X = stack_images(full + weak)
    y = labels_with_partial(stack_labels(full), stack_partial(weak)) if weak else stack_labels(full)
    return X, y, stack_partial(full)


def make_estimator(cfg: ExperimentConfig, variant: str, seed: int) -> MixedSupervisedSegmenter:
    return MixedSupervisedSegmenter(
        variant=variant, lambda_w=cfg.lambda_w, lambda_kd=cfg.lambda_kd, lambda_ent=cfg.lambda_ent,
        single_lambda_w=cfg.single_lambda_w, divergence=cfg.divergence, alpha=cfg.alpha, smooth=cfg.smooth,
        detach_teacher=cfg.detach_teacher, levels=cfg.levels, base_channels=cfg.base_channels,
        head_gain=cfg.head_gain, standardize=cfg.standardize, epochs=cfg.epochs, batch_size=cfg.batch_size,
        optimizer=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, patience=cfg.patience,
        ent_start=cfg.ent_start, eval_every=cfg.eval_every, clip_norm=cfg.clip_norm,
        scribble_budget=cfg.budget, random_state=int(seed))


def run_name(cfg: ExperimentConfig, seed: int, variant: str | None = None, tag: str = "") -> str:
    parts = [cfg.name] + ([variant] if variant and variant != cfg.variant else []) + ([tag] if tag else [])
    return "-".join(parts + [f"s{seed}"])


# -------------------------------------------------------------- single runs


def _fit(cfg, variant, seed, X, y, partial_full, split, name, extra=None, random_state=None):
    """Fit one estimator and build its report; abort reports keep the best state reached."""
    est = make_estimator(cfg, variant, seed if random_state is None else random_state)
    Xv, yv = stack_images(split.val), stack_labels(split.val)
    start = time.perf_counter()
    status, diagnostic = "ok", ""
    try:
        est.fit(X, y, Xv, yv, partial_full=partial_full)
        curve = est.curve_
    except NumericalAbort as exc:
        status, diagnostic, curve = "aborted", str(exc), exc.curve
        est.curve_ = curve
    results = {b: r.to_dict() for b, r in evaluate(est.model_, split.test).items()} if hasattr(est, "model_") else {}
    best = max(curve, key=lambda r: (r["val_dsc"] if math.isfinite(r["val_dsc"]) else -1.0), default=None)
    report = RunReport(
        name=name, variant=variant, seed=int(seed), config=cfg.to_dict(), curve=[dict(r) for r in curve],
        results=results, best_epoch=getattr(est, "best_epoch_", best["epoch"] if best else 0),
        n_epochs=len(curve), wall_time=time.perf_counter() - start, status=status, diagnostic=diagnostic,
        extra={"split": split.ids(), "python": platform.python_version(), **(extra or {})},
    )
    return report, est


def _finish(report, est, write, root):
    if write:
        run_dir = report.write(runs_root(root) / report.name)
        est.model_.save(run_dir / "model.npz")
    if report.status != "ok":
        raise TrainingAborted(report)
    return report


def train(cfg: ExperimentConfig, seed: int | None = None, *, variant: str | None = None, split=None,
          name: str | None = None, write: bool = True, root=None, return_estimator: bool = False):
    """Train ``variant`` (default ``cfg.variant``) with one seed and evaluate on the test split."""
    cfg.validate()
    variant = variant or cfg.variant
    seed = cfg.seeds[0] if seed is None else seed
    if variant == "proposals":
        return run_proposals(cfg, seed, split=split, write=write, root=root)
    if variant == "self_training":
        return run_self_training(cfg, seed, split=split, write=write, root=root)[-1]
    if variant not in TRAIN_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    split = split if split is not None else load_split(cfg)
    X, y, pf = training_arrays(split, variant)
    report, est = _fit(cfg, variant, seed, X, y, pf, split, name or run_name(cfg, seed, variant))
    _finish(report, est, write, root)
    return (report, est) if return_estimator else report


# -------------------------------------------------------- pseudo-label runs


def pseudo_labels(est: MixedSupervisedSegmenter, images) -> tuple[np.ndarray, float]:
    """Argmax proposals on ``images`` plus the full-CE / min-entropy identity gap on them."""
    probs = est.predict_proba(images)
    mask = L.pseudo_mask(probs)
    ce = L.full_ce(probs, mask).item()
    hmin = L.min_entropy_loss(probs).item()
    gap = abs(ce - hmin) / max(1.0, abs(hmin))
    if gap > IDENTITY_TOL:
        raise RuntimeError(f"proposal cross-entropy {ce!r} differs from min-entropy {hmin!r}")
    return mask.argmax(axis=1).astype(np.int64), gap


def _retrain_on(cfg, seed, split, proposals, name, extra, random_state=None):
    """Fresh single-branch model on full masks plus ``proposals`` for the weak images."""
    samples = split.train_full + split.train_weak
    y = np.concatenate([stack_labels(split.train_full), proposals]).astype(np.int64)
    return _fit(cfg, "upper_bound", seed, stack_images(samples), y, stack_partial(samples), split, name, extra=extra,
                random_state=random_state)


def run_proposals(cfg: ExperimentConfig, seed: int, *, base_variant: str | None = None, split=None,
                  proposals: np.ndarray | None = None, base=None, write: bool = True, root=None) -> RunReport:
    """Train a base model, label the weak images with its argmax, retrain from scratch on them.

    ``base`` reuses a ``(report, estimator)`` pair from ``train`` instead of
    training the base model again. ``proposals`` skips the base model and
    uses the given label maps for the weak images (with the true masks this
    reproduces ``upper_bound``).
    """
    cfg.validate()
    base_variant = base_variant or cfg.base_variant
    if base_variant not in BASE_VARIANTS:
        raise ValueError(f"base_variant must be one of {BASE_VARIANTS}, got {base_variant!r}")
    split = split if split is not None else load_split(cfg)
    extra = {"base_variant": base_variant}
    if proposals is None:
        if base is None:
            base = train(cfg, seed, variant=base_variant, split=split, write=write, root=root,
                         name=run_name(cfg, seed, base_variant, "base"), return_estimator=True)
        elif base[0].variant != base_variant:
            raise ValueError(f"base model is {base[0].variant!r}, expected {base_variant!r}")
        base, base_est = base
        proposals, gap = pseudo_labels(base_est, stack_images(split.train_weak))
        extra.update(base_dsc=base.dsc(), identity_gap=gap)
    else:
        extra["base_variant"] = "injected"
    proposals = np.asarray(proposals, dtype=np.int64)
    truth = stack_labels(split.train_weak)
    if proposals.shape != truth.shape:
        raise ValueError(f"proposals shape {proposals.shape} != weak label shape {truth.shape}")
    extra["proposal_dsc"] = score_labels(proposals, truth, cfg.classes).dsc
    report, est = _retrain_on(cfg, seed, split, proposals, run_name(cfg, seed, tag=f"proposals-{extra['base_variant']}"), extra)
    report.variant = "proposals"
    return _finish(report, est, write, root)


def run_self_training(cfg: ExperimentConfig, seed: int, *, iterations: int | None = None, split=None,
                      base=None, write: bool = True, root=None) -> list[RunReport]:
    """Iteration 0 trains ``cfg.base_variant``; each later one retrains on the previous model's proposals.

    Every retraining starts from a fresh random initialisation. ``base`` reuses
    a ``(report, estimator)`` pair from ``train`` as iteration 0.
    """
    cfg.validate()
    iterations = cfg.iterations if iterations is None else iterations
    split = split if split is not None else load_split(cfg)
    if base is None:
        first, est = train(cfg, seed, variant=cfg.base_variant, split=split, write=write, root=root,
                           name=run_name(cfg, seed, "selftrain", "it0"), return_estimator=True)
    else:
        first, est = copy.deepcopy(base[0]), base[1]
    first.extra["iteration"] = 0
    reports = [first]
    images, truth = stack_images(split.train_weak), stack_labels(split.train_weak)
    for t in range(1, iterations + 1):
        proposals, gap = pseudo_labels(est, images)
        extra = {"iteration": t, "identity_gap": gap,
                 "proposal_dsc": score_labels(proposals, truth, cfg.classes).dsc}
        report, est = _retrain_on(cfg, seed, split, proposals, run_name(cfg, seed, "selftrain", f"it{t}"),
                                  extra, random_state=seed * 1000 + t)
        report.variant = "self_training"
        reports.append(_finish(report, est, write, root))
    return reports


# ------------------------------------------------------- matrices and sweeps


def _run_one(job):
    cfg, seed, variant, root, write = job
    try:
        return train(cfg, seed, variant=variant, root=root, write=write)
    except TrainingAborted as exc:
        return exc.report
    except Exception as exc:  # noqa: BLE001 - recorded per row, the matrix goes on
        logger.exception("run %s/%s seed %s failed", cfg.name, variant, seed)
        return RunReport(name=run_name(cfg, seed, variant), variant=variant, seed=int(seed), config=cfg.to_dict(),
                         curve=[], results={}, best_epoch=0, n_epochs=0, wall_time=0.0, status="failed",
                         diagnostic=f"{type(exc).__name__}: {exc}")


def run_jobs(jobs, workers: int = 1) -> list[RunReport]:
    """Run ``(cfg, seed, variant, root, write)`` jobs, in parallel when ``workers > 1``."""
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def summarize(reports, branch: str | None = None) -> dict:
    """Mean/std of test DSC and HD95 over the successful runs among ``reports``."""
    ok = [r for r in reports if r.status == "ok" and r.results]
    failed = [f"s{r.seed}: {r.status}: {r.diagnostic}" for r in reports if r not in ok]
    if not ok:
        return {"dsc_mean": float("nan"), "dsc_std": float("nan"), "hd95_mean": float("nan"),
                "hd95_std": float("nan"), "seeds": "", "status": "failed; " + " | ".join(failed)}
    d = np.array([r.dsc(branch) for r in ok])
    h = np.array([r.hd95(branch) for r in ok])
    return {"dsc_mean": float(d.mean()), "dsc_std": float(d.std()), "hd95_mean": float(h.mean()),
            "hd95_std": float(h.std()), "seeds": ";".join(str(r.seed) for r in ok),
            "status": "ok" if not failed else "partial; " + " | ".join(failed)}


def write_rows(rows, path, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def run_matrix(cfg: ExperimentConfig, settings=None, variants=None, seeds=None, *, out_dir=None, root=None,
               write: bool = True) -> tuple[list[dict], list[dict]]:
    """Train every (setting, variant, seed) and write ``matrix.csv`` plus ``matrix_branches.csv``.

    ``matrix.csv`` has one row per (setting, variant) scored on the inference
    branch; ``matrix_branches.csv`` repeats it for top, bottom and ensemble.
    """
    cfg.validate()
    settings = list(settings or [cfg.setting])
    variants = list(variants or TRAIN_VARIANTS)
    seeds = list(seeds or cfg.seeds)
    jobs, keys = [], []
    for s in settings:
        for v in variants:
            sub = cfg.replace(name=f"{cfg.name}-{s}", setting=s)
            for seed in seeds:
                jobs.append((sub, seed, v, root, write))
                keys.append((s, v))
    reports = run_jobs(jobs, cfg.jobs)
    rows, branch_rows = [], []
    for s in settings:
        for v in variants:
            group = [r for k, r in zip(keys, reports) if k == (s, v)]
            branches = ("top",) if v in ("lower_bound", "upper_bound", "single") else ("top", "bottom", "ensemble")
            main = "bottom" if "bottom" in branches else "top"
            rows.append({"setting": s, "variant": v, "branch": main, **summarize(group, main)})
            for b in branches:
                branch_rows.append({"setting": s, "variant": v, "branch": b, **summarize(group, b)})
    out = Path(out_dir) if out_dir is not None else runs_root(root) / cfg.name
    write_rows(rows, out / "matrix.csv", MATRIX_COLUMNS)
    write_rows(branch_rows, out / "matrix_branches.csv", MATRIX_COLUMNS)
    return rows, branch_rows


def _sweep(cfg, points, key_columns, kind, *, out_dir=None, root=None, write=True) -> list[dict]:
    """Run ``cfg.variant`` over labelled config ``points`` for every seed; one summary row per point."""
    cfg.validate()
    jobs, labels = [], []
    for label, sub in points:
        sub.validate()
        for seed in cfg.seeds:
            jobs.append((sub, seed, sub.variant, root, write))
            labels.append(label)
    reports = run_jobs(jobs, cfg.jobs)
    rows = []
    curves = []
    for label, _ in points:
        group = [r for lab, r in zip(labels, reports) if lab is label]
        rows.append({**label, **summarize(group)})
        for r in group:
            curves.extend({**label, "seed": r.seed, "epoch": c["epoch"], "val_dsc": c["val_dsc"]} for c in r.curve)
    out = Path(out_dir) if out_dir is not None else runs_root(root) / cfg.name
    write_rows(rows, out / f"{kind}.csv", key_columns + SWEEP_COLUMNS)
    write_rows(curves, out / f"{kind}_curves.csv", key_columns + ("seed", "epoch", "val_dsc"))
    return rows


def divergence_sweep(cfg: ExperimentConfig, grid=DIVERGENCE_GRID, **kw) -> list[dict]:
    points = []
    for kind, alpha in grid:
        label = {"divergence": kind, "alpha": "" if alpha is None else alpha}
        tag = kind if alpha is None else f"alpha{alpha:g}"
        points.append((label, cfg.replace(name=f"{cfg.name}-{tag}", divergence=kind,
                                          alpha=cfg.alpha if alpha is None else float(alpha))))
    return _sweep(cfg, points, ("divergence", "alpha"), "divergence", **kw)


def ratio_sweep(cfg: ExperimentConfig, grid=RATIO_GRID, **kw) -> list[dict]:
    from .data import SETTINGS
    m = SETTINGS[cfg.setting]
    points = [({"ratio": r, "n_weak": int(math.floor(r * m))},
               cfg.replace(name=f"{cfg.name}-r{r:g}", ratio=float(r))) for r in grid]
    return _sweep(cfg, points, ("ratio", "n_weak"), "ratio", **kw)


def lambda_sweep(cfg: ExperimentConfig, key: str, grid=None, **kw) -> list[dict]:
    if key not in ("lambda_kd", "lambda_w"):
        raise ValueError(f"lambda sweep key must be lambda_kd or lambda_w, got {key!r}")
    grid = grid or (LAMBDA_KD_GRID if key == "lambda_kd" else LAMBDA_W_GRID)
    points = [({key: float(v)}, cfg.replace(name=f"{cfg.name}-{key}{v:g}", **{key: float(v)})) for v in grid]
    return _sweep(cfg, points, (key,), key, **kw)


SWEEPS = {
    "divergence": divergence_sweep,
    "ratio": ratio_sweep,
    "lambda_kd": lambda kind_cfg, **kw: lambda_sweep(kind_cfg, "lambda_kd", **kw),
    "lambda_w": lambda kind_cfg, **kw: lambda_sweep(kind_cfg, "lambda_w", **kw),
}


# ------------------------------------------------------------------ probes


def routing_probe(cfg: ExperimentConfig, variant: str, seed: int = 0, split=None, n_images: int = 4) -> dict:
    """Gradient contribution of each auxiliary term to the variant's training objective.

    For each of ``L_w``, ``L_kd`` and ``L_ent`` the objective is differentiated
    with and without that term; the max absolute difference is reported per
    parameter group. A term the variant routes out must give exactly 0.
    """
    from . import autodiff as ad
    from .estimator import Batch
    from .model import DualBranchUNet

    split = split if split is not None else load_split(cfg)
    est = make_estimator(cfg, variant, seed)
    full, weak = split.train_full[:n_images], split.train_weak[:n_images]
    classes = cfg.classes
    model = DualBranchUNet(cfg.levels, cfg.base_channels, classes, seed=seed, branches=est.branches,
                           head_gain=cfg.head_gain, standardize=cfg.standardize)
    batch = Batch(stack_images(full + weak), len(full), L.one_hot(stack_labels(full), classes),
                  stack_partial(full), stack_partial(weak))
    weights = est.effective_weights()
    groups = ("encoder",) + model.branches

    def grads(w):
        ad.zero_grad(model.parameters())
        ad.backward(est._loss(model, batch, w).total)
        return {g: [p.grad.copy() for p in model.parameters(g)] for g in groups}

    ref = grads(weights)
    out = {}
    for term, attr in (("L_w", "lambda_w"), ("L_kd", "lambda_kd"), ("L_ent", "lambda_ent")):
        without = grads(_replace_weight(weights, attr, 0.0))
        out[term] = {g: float(max(np.abs(a - b).max() for a, b in zip(ref[g], without[g]))) for g in groups}
    ad.zero_grad(model.parameters())
    return {"variant": variant, "weights": asdict(weights), "contribution": out}


def _replace_weight(w, attr, value):
    from dataclasses import replace
    return replace(w, **{attr: value})
