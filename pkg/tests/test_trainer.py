import csv
import json

import numpy as np
import pytest

from mixsup import trainer
from mixsup.data import stack_labels


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_runs_root_env(runs_dir):
    assert trainer.runs_root() == runs_dir
    assert str(trainer.runs_root("elsewhere")) == "elsewhere"


def test_train_writes_artifacts(tiny_cfg, runs_dir):
    r = trainer.train(tiny_cfg, 0)
    d = runs_dir / "tiny-s0"
    assert {p.name for p in d.iterdir()} == {"report.json", "curve.csv", "model.npz"}
    rows = read_csv(d / "curve.csv")
    assert list(rows[0]) == list(trainer.CURVE_COLUMNS) and len(rows) == 2
    report = json.loads((d / "report.json").read_text())
    assert report["seed"] == 0 and report["config"]["weights"]["lambda_kd"] == 50.0
    assert set(report["results"]) == {"top", "bottom", "ensemble"}
    assert report["inference_branch"] == "bottom"
    back = trainer.RunReport.read(d)
    assert back.dsc() == r.dsc()


def test_curve_csv_is_reproducible(tiny_cfg, tmp_path):
    trainer.train(tiny_cfg, 1, root=tmp_path / "a")
    trainer.train(tiny_cfg, 1, root=tmp_path / "b")
    a = (tmp_path / "a" / "tiny-s1" / "curve.csv").read_bytes()
    assert a == (tmp_path / "b" / "tiny-s1" / "curve.csv").read_bytes()


def test_decoupled_curve_has_no_kd_or_entropy(tiny_cfg, runs_dir):
    r = trainer.train(tiny_cfg.replace(variant="decoupled"), 0)
    assert all(c["L_kd"] == 0.0 and c["L_ent"] == 0.0 for c in r.curve)
    assert all(c["L_w"] > 0 for c in r.curve)


def test_training_arrays_per_variant(tiny_cfg):
    split = trainer.load_split(tiny_cfg)
    X, y, pf = trainer.training_arrays(split, "lower_bound")
    assert len(X) == 3 and (y >= 0).all()
    X, y, pf = trainer.training_arrays(split, "upper_bound")
    assert len(X) == 6 and (y >= 0).all() and len(pf) == 6
    X, y, pf = trainer.training_arrays(split, "kl")
    assert len(X) == 6 and (y[3:] == -1).any() and len(pf) == 3


def test_dataset_path_reuses_manifest_split(tiny_cfg, tmp_path):
    from mixsup.data import generate_task, make_setting, pool_size, save_dataset
    pool = generate_task(9, pool_size("set3", 1.0), 16, 16)
    split = make_setting("set3", pool, 1.0)
    save_dataset(pool, tmp_path / "ds", 9, params={"setting": "set3", "ratio": 1.0}, split=split)
    loaded = trainer.load_split(tiny_cfg.replace(dataset=str(tmp_path / "ds")))
    assert loaded.ids() == split.ids()


def test_oracle_proposals_reproduce_upper_bound(tiny_cfg, tmp_path):
    split = trainer.load_split(tiny_cfg)
    truth = stack_labels(split.train_weak)
    p = trainer.run_proposals(tiny_cfg, 0, split=split, proposals=truth, write=False)
    u = trainer.train(tiny_cfg, 0, variant="upper_bound", split=split, write=False)
    assert p.curve == u.curve
    assert p.results == u.results
    assert p.extra["proposal_dsc"] == 1.0


def test_proposals_from_base_model(tiny_cfg, runs_dir):
    r = trainer.run_proposals(tiny_cfg, 0, base_variant="lower_bound")
    assert r.variant == "proposals" and r.extra["base_variant"] == "lower_bound"
    assert r.extra["identity_gap"] <= trainer.IDENTITY_TOL
    assert (runs_dir / "tiny-proposals-lower_bound-s0" / "report.json").exists()
    with pytest.raises(ValueError):
        trainer.run_proposals(tiny_cfg, 0, base_variant="upper_bound", write=False)


def test_self_training_trajectory(tiny_cfg):
    reports = trainer.run_self_training(tiny_cfg, 0, iterations=2, write=False)
    assert [r.extra["iteration"] for r in reports] == [0, 1, 2]
    base = trainer.train(tiny_cfg, 0, variant=tiny_cfg.base_variant, write=False)
    assert reports[0].curve == base.curve and reports[0].results == base.results


def test_matrix_rows_and_failures(tiny_cfg, tmp_path, monkeypatch):
    real = trainer.train

    def flaky(cfg, seed=None, **kw):
        if kw.get("variant") == "kl" and seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed, **kw)

    monkeypatch.setattr(trainer, "train", flaky)
    rows, branch_rows = trainer.run_matrix(tiny_cfg, ["set3"], ["lower_bound", "kl"], [0, 1],
                                           out_dir=tmp_path, write=False)
    assert len(rows) == 2 and len(branch_rows) == 1 + 3
    on_disk = read_csv(tmp_path / "matrix.csv")
    assert list(on_disk[0]) == list(trainer.MATRIX_COLUMNS)
    assert on_disk[0]["seeds"] == "0;1" and on_disk[0]["status"] == "ok"
    assert on_disk[1]["seeds"] == "0" and on_disk[1]["status"].startswith("partial")
    assert on_disk[1]["branch"] == "bottom"


@pytest.mark.parametrize("kind,n", [("divergence", 5), ("ratio", 4), ("lambda_kd", 6), ("lambda_w", 5)])
def test_sweeps_have_one_row_per_point(tiny_cfg, tmp_path, kind, n):
    cfg = tiny_cfg.replace(epochs=1, ent_start=0, variant="kl")
    rows = trainer.SWEEPS[kind](cfg, out_dir=tmp_path, write=False)
    assert len(rows) == n
    assert len(read_csv(tmp_path / f"{kind}.csv")) == n
    curves = read_csv(tmp_path / f"{kind}_curves.csv")
    assert len(curves) == n


def test_routing_probe(tiny_cfg):
    split = trainer.load_split(tiny_cfg)
    dec = trainer.routing_probe(tiny_cfg, "decoupled", split=split)["contribution"]
    kl = trainer.routing_probe(tiny_cfg, "kl", split=split)["contribution"]
    full = trainer.routing_probe(tiny_cfg, "kl_ent", split=split)["contribution"]
    assert all(v == 0.0 for t in ("L_kd", "L_ent") for v in dec[t].values())
    assert all(v == 0.0 for v in kl["L_ent"].values())
    assert kl["L_kd"]["encoder"] > 0
    assert full["L_ent"]["encoder"] > 0 and full["L_ent"]["top"] == 0.0


def test_abort_produces_report(tiny_cfg, runs_dir, monkeypatch):
    from mixsup.estimator import MixedSupervisedSegmenter

    real = MixedSupervisedSegmenter._loss

    def poisoned(self, model, batch, weights):
        jl = real(self, model, batch, weights)
        jl.total = jl.total * np.inf
        return jl

    monkeypatch.setattr(MixedSupervisedSegmenter, "_loss", poisoned)
    with pytest.raises(trainer.TrainingAborted) as info:
        trainer.train(tiny_cfg, 0)
    rep = info.value.report
    assert rep.status == "aborted" and "non-finite" in rep.diagnostic
    saved = json.loads((runs_dir / "tiny-s0" / "report.json").read_text())
    assert saved["status"] == "aborted"


def test_pseudo_label_runs_reuse_a_base_model(tiny_cfg):
    split = trainer.load_split(tiny_cfg)
    base = trainer.train(tiny_cfg, 0, variant="kl", split=split, write=False, return_estimator=True)
    fresh = trainer.run_proposals(tiny_cfg, 0, base_variant="kl", split=split, write=False)
    reused = trainer.run_proposals(tiny_cfg, 0, base_variant="kl", split=split, base=base, write=False)
    assert reused.curve == fresh.curve
    with pytest.raises(ValueError):
        trainer.run_proposals(tiny_cfg, 0, base_variant="lower_bound", split=split, base=base, write=False)
    traj = trainer.run_self_training(tiny_cfg, 0, iterations=1, split=split, base=base, write=False)
    assert traj[0].results == base[0].results and "iteration" not in base[0].extra
