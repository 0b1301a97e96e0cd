"""``mixsup`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, ExperimentConfig, field_docs, load_config
from .data import SETTINGS, TaskConstants, generate_task, make_setting, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
VARIANT_ALIASES = {"lower": "lower_bound", "upper": "upper_bound", "klent": "kl_ent", "kl+ent": "kl_ent"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _config(args, **changes) -> ExperimentConfig:
    """Config file, then ``--override`` items, then dedicated flags; validated once at the end."""
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    overrides = list(getattr(args, "override", None) or ())
    overrides += [f"{k}={json.dumps(v)}" for k, v in changes.items()]
    return load_config(getattr(args, "config", None), overrides)


def _variants(text: str) -> list[str]:
    out = [VARIANT_ALIASES.get(v.strip(), v.strip()) for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in trainer.TRAIN_VARIANTS]
    if bad:
        raise ConfigError([f"--variants: unknown variant {v!r}" for v in bad])
    return out


def _seeds(text: str) -> list[int]:
    """A single integer is a seed count (0..n-1); a comma list gives the seeds."""
    try:
        parts = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError([f"--seeds: expected an integer or a comma-separated list, got {text!r}"]) from None
    if len(parts) == 1 and "," not in text:
        if parts[0] < 1:
            raise ConfigError(["--seeds: count must be >= 1"])
        return list(range(parts[0]))
    return parts


def _settings(text: str) -> list[str]:
    out = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in out if s not in SETTINGS]
    if bad:
        raise ConfigError([f"--settings: unknown setting {s!r} (choose from {sorted(SETTINGS)})" for s in bad])
    return out


def _print_report(r: trainer.RunReport):
    scores = ", ".join(f"{b} dsc={v['dsc']:.4f} hd95={v['hd95']:.2f}" for b, v in r.results.items())
    print(f"{r.name}: {r.status} best_epoch={r.best_epoch}/{r.n_epochs} {scores} ({r.wall_time:.1f}s)")
    if r.run_dir:
        print(f"  -> {r.run_dir}")


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    if args.size < 8 or args.n < 1:
        raise ConfigError(["--size must be >= 8 and --n >= 1"])
    try:
        const = TaskConstants(**json.loads(args.constants)) if args.constants else TaskConstants()
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"--constants: {exc}"]) from None
    problems = const.problems()
    if problems:
        raise ConfigError(problems)
    try:
        samples = generate_task(args.seed, args.n, args.size, args.size, args.classes, style=args.style,
                                budget=args.budget, constants=const)
        split = make_setting(args.setting, samples, args.ratio) if args.setting else None
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    params = {"n": args.n, "size": args.size, "classes": args.classes, "style": args.style,
              "budget": args.budget}
    if split is not None:
        params.update(setting=args.setting, ratio=args.ratio)
    out = save_dataset(samples, args.out, args.seed, params=params, split=split, constants=const)
    fg = np.array([s.foreground_fraction for s in samples])
    print(f"wrote {len(samples)} samples to {out}")
    print(f"foreground fraction: mean={fg.mean():.3f} min={fg.min():.3f} max={fg.max():.3f}")
    if args.classes == 3:
        ring = np.mean([np.any(s.labels == 2) for s in samples])
        print(f"samples with class 2 present: {ring:.1%}")
    return EXIT_OK


def cmd_train(args) -> int:
    changes = {"variant": VARIANT_ALIASES.get(args.variant, args.variant)} if args.variant else {}
    cfg = _config(args, **changes)
    code = EXIT_OK
    for seed in cfg.seeds:
        try:
            if cfg.variant == "self_training":
                for r in trainer.run_self_training(cfg, seed, root=args.runs_dir):
                    _print_report(r)
            else:
                _print_report(trainer.train(cfg, seed, root=args.runs_dir))
        except trainer.TrainingAborted as exc:
            _print_report(exc.report)
            print(f"numeric abort: {exc.report.diagnostic}", file=sys.stderr)
            code = EXIT_NUMERIC
    return code


def cmd_matrix(args) -> int:
    cfg = _config(args)
    settings = _settings(args.settings) if args.settings else [cfg.setting]
    variants = _variants(args.variants) if args.variants else list(trainer.TRAIN_VARIANTS)
    seeds = _seeds(args.seeds) if args.seeds else list(cfg.seeds)
    rows, _ = trainer.run_matrix(cfg, settings, variants, seeds, out_dir=args.out, root=args.runs_dir)
    _print_rows(rows, trainer.MATRIX_COLUMNS)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = trainer.SWEEPS[args.kind](cfg, out_dir=args.out, root=args.runs_dir)
    _print_rows(rows, None)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_selftrain(args) -> int:
    cfg = _config(args)
    iterations = cfg.iterations if args.iterations is None else args.iterations
    if iterations < 2:
        raise ConfigError(["--iterations must be >= 2"])
    rows = []
    for seed in cfg.seeds:
        for r in trainer.run_self_training(cfg, seed, iterations=iterations, root=args.runs_dir):
            rows.append({"seed": seed, "iteration": r.extra["iteration"], "dsc": r.dsc(), "hd95": r.hd95(),
                         "proposal_dsc": r.extra.get("proposal_dsc", "")})
    out = Path(args.out) if args.out else trainer.runs_root(args.runs_dir) / cfg.name
    trainer.write_rows(rows, out / "selftrain.csv", ("seed", "iteration", "dsc", "hd95", "proposal_dsc"))
    _print_rows(rows, None)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    results = gradcheck.run_all(args.instances, args.seed)
    for r in results:
        print(f"{r.loss:14s} max_rel_error={r.max_error:.3e} instances={r.instances} "
              f"{'ok' if r.passed else 'FAIL'}")
    if args.json:
        Path(args.json).write_text(json.dumps([r.__dict__ for r in results], indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_probe(args) -> int:
    cfg = _config(args)
    variants = _variants(args.variants) if args.variants else ["decoupled", "kl", "kl_ent"]
    split = trainer.load_split(cfg)
    out = [trainer.routing_probe(cfg, v, cfg.seeds[0], split=split) for v in variants]
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_config(args) -> int:
    if args.docs:
        text = config_markdown()
        if args.docs == "-":
            print(text, end="")
        else:
            Path(args.docs).write_text(text)
        return EXIT_OK
    cfg = _config(args)
    print(json.dumps(cfg.to_dict(), indent=2))
    return EXIT_OK


def config_markdown() -> str:
    lines = ["# Configuration", "",
             "Config files are TOML (`.toml`) or JSON (`.json`). Run-level keys sit at the top level,",
             "loss weights under `[weights]`, dataset parameters and generator constants under `[data]`.",
             "Unknown keys are rejected and every problem is listed before anything runs.",
             "Any key can be changed from the command line with `--override key=value`",
             "(bare or dotted, e.g. `lambda_kd=10` or `weights.lambda_kd=10`; values parse as JSON).", "",
             "Run outputs go to `$MIXSUP_RUNS_DIR` (default `runs/`), one directory per run.", "",
             "| key | section | default | meaning |", "|---|---|---|---|"]
    for key, section, default in field_docs():
        lines.append(f"| `{key}` | {section or '(top)'} | `{json.dumps(default)}` | {FIELD_HELP.get(key, '')} |")
    lines += ["", "## Example", "", "```toml", EXAMPLE_TOML.strip(), "```", ""]
    return "\n".join(lines)


FIELD_HELP = {
    "name": "run name; run directories are `<name>-s<seed>` (plus variant/tag when they differ)",
    "variant": "lower_bound, upper_bound, single, decoupled, kl, kl_ent, proposals or self_training",
    "seeds": "model seeds; one run per seed (the dataset seed is `data_seed`)",
    "lambda_w": "weight of the partial cross-entropy term",
    "lambda_kd": "weight of the top-to-bottom distillation term",
    "lambda_ent": "weight of the entropy term on partially labeled images",
    "single_lambda_w": "partial-label weight used by the `single` baseline",
    "divergence": "kl, bhattacharyya or alpha",
    "alpha": "order of the alpha-divergence",
    "setting": "set3, set5 or set10 (number of fully labeled images)",
    "ratio": "partially labeled images per fully labeled image",
    "data_seed": "seed of the synthetic dataset",
    "size": "image side in pixels (divisible by 2^(levels-1))",
    "classes": "2 (background + organ) or 3 (adds a ring class)",
    "style": "partial-label style: scribbles or points",
    "budget": "labeled pixels per class in each partial annotation",
    "dataset": "path written by `mixsup synth`; overrides generation",
    "noise_sigma": "Gaussian noise std of the images",
    "background_range": "range of the background intensity",
    "contrast_range": "range of the foreground-background contrast",
    "texture_amplitude": "amplitude of the smooth background texture",
    "edge_blur": "Gaussian blur (pixels) applied to object edges",
    "ring_prob": "probability that the ring class is drawn (classes = 3)",
    "radius_fraction": "organ radius range as a fraction of the image side",
    "foreground_bounds": "accepted foreground fraction range per image",
    "levels": "U-Net depth (resolution levels)",
    "base_channels": "channels at the first level (doubled per level)",
    "head_gain": "scale of the output-layer initialisation relative to He",
    "standardize": "normalise every image to zero mean and unit variance inside the model",
    "smooth": "re-apply a channel softmax to both branches before the divergence",
    "detach_teacher": "stop gradients through the top branch in the divergence",
    "epochs": "maximum training epochs",
    "batch_size": "images per batch from each of the full and partial sets",
    "optimizer": "sgd or adam",
    "lr": "learning rate; for sgd it is per fully labeled pixel (divided by batch pixels)",
    "momentum": "sgd momentum",
    "patience": "epochs without validation improvement before stopping",
    "ent_start": "epochs trained before the entropy term is switched on; patience restarts then",
    "eval_every": "validation interval in epochs",
    "clip_norm": "rescale gradients whose norm per fully labeled pixel exceeds this; 0 disables",
    "base_variant": "base model for proposals and self-training",
    "iterations": "self-training iterations after the base model",
    "jobs": "parallel worker processes for matrix and sweeps",
}

EXAMPLE_TOML = """
name = "set3_klent"
variant = "kl_ent"
seeds = [0, 1, 2]
epochs = 200

[weights]
lambda_w = 0.001
lambda_kd = 50.0
lambda_ent = 1.0
divergence = "kl"

[data]
setting = "set3"
ratio = 5.0
data_seed = 0
"""


def _print_rows(rows, columns):
    if not rows:
        return
    columns = columns or list(rows[0])
    print(",".join(columns))
    for r in rows:
        print(",".join(_fmt(r.get(c, "")) for c in columns))


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixsup", description="Mixed-supervision segmentation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, seed=True):
        sp.add_argument("-c", "--config", help="TOML or JSON config file")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="override a config key")
        if seed:
            sp.add_argument("--seed", type=int, help="run this seed only")
        sp.add_argument("--runs-dir", help="output root (default $MIXSUP_RUNS_DIR or runs/)")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--classes", type=int, choices=(2, 3), default=2)
    s.add_argument("--style", choices=("scribbles", "points"), default="scribbles")
    s.add_argument("--budget", type=int, default=15)
    s.add_argument("--setting", choices=sorted(SETTINGS), help="also record a train/val/test split")
    s.add_argument("--ratio", type=float, default=5.0)
    s.add_argument("--constants", help="JSON object of generator constants")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one variant for every configured seed")
    with_config(s)
    s.add_argument("--variant", help="override the configured variant")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("matrix", help="settings x variants x seeds table")
    with_config(s, seed=False)
    s.add_argument("--settings", help="comma list, e.g. set3,set5,set10")
    s.add_argument("--variants", help="comma list, e.g. lower,single,decoupled,kl,kl_ent")
    s.add_argument("--seeds", help="seed count (e.g. 3) or comma list of seeds")
    s.add_argument("--jobs", type=int)
    s.add_argument("--out", help="directory for matrix.csv (default <runs>/<name>)")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("sweep", help="divergence, ratio or lambda sweep")
    with_config(s)
    s.add_argument("--kind", required=True, choices=sorted(trainer.SWEEPS))
    s.add_argument("--jobs", type=int)
    s.add_argument("--out", help="directory for the sweep CSVs (default <runs>/<name>)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("selftrain", help="iterated pseudo-label retraining")
    with_config(s)
    s.add_argument("--iterations", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_selftrain)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--instances", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", help="also write the results here")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("probe", help="gradient contribution of each loss term per variant")
    with_config(s)
    s.add_argument("--variants")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("config", help="print the resolved config or write the config reference")
    with_config(s, seed=False)
    s.add_argument("--docs", metavar="PATH", help="write the markdown reference ('-' for stdout)")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingAborted as exc:
        print(f"numeric abort: {exc.report.diagnostic}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
