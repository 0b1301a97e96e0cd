import csv
import json

import pytest

from mixsup import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


TINY = ["--override", "size=16", "--override", "levels=2", "--override", "base_channels=2",
        "--override", "ratio=1", "--override", "epochs=2", "--override", "ent_start=0", "--override", "name=c"]


def test_synth_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--seed", "7", "--n", "12", "--size", "32", "--out", str(tmp_path / d))
        assert code == 0 and "foreground fraction" in out
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 12


def test_synth_three_classes(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--n", "20", "--classes", "3", "--out", str(tmp_path))
    assert code == 0 and "class 2 present" in out


def test_train_and_variant_flag(runs_dir, capsys):
    code, out, _ = run(capsys, "train", *TINY, "--seed", "0", "--variant", "decoupled")
    assert code == 0
    with open(runs_dir / "c-s0" / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["L_kd"]) == 0 and float(r["L_ent"]) == 0 for r in rows)


def test_override_reaches_report(runs_dir, capsys):
    code, _, _ = run(capsys, "train", *TINY, "--seed", "0", "--override", "lambda_kd=10")
    assert code == 0
    report = json.loads((runs_dir / "c-s0" / "report.json").read_text())
    assert report["config"]["weights"]["lambda_kd"] == 10
    assert set(report["curve"][0]) >= {"L_s", "L_w", "L_kd", "L_ent"}


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "c.toml"
    bad.write_text('epochs = -1\nfoo = 1\n[weights]\ndivergence = "x"\n')
    code, _, err = run(capsys, "train", "-c", str(bad))
    assert code == 2
    assert "epochs" in err and "foo" in err and "divergence" in err


def test_bad_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--nope"])
    assert info.value.code == 2
    assert run(capsys, "matrix", "--variants", "lower,bogus")[0] == 2


def test_io_error_exits_4(tmp_path, capsys):
    assert run(capsys, "train", "-c", str(tmp_path / "missing.toml"))[0] == 4


def test_numeric_abort_exits_3(runs_dir, capsys, monkeypatch):
    from mixsup import trainer

    def boom(cfg, seed, **kw):
        rep = trainer.RunReport(name="x", variant="kl", seed=0, config={}, curve=[], results={}, best_epoch=0,
                                n_epochs=0, wall_time=0.0, status="aborted", diagnostic="non-finite loss")
        raise trainer.TrainingAborted(rep)

    monkeypatch.setattr(trainer, "train", boom)
    code, _, err = run(capsys, "train", *TINY, "--seed", "0")
    assert code == 3 and "non-finite" in err


def test_matrix_command(tmp_path, runs_dir, capsys):
    code, out, _ = run(capsys, "matrix", *TINY, "--settings", "set3", "--variants", "lower,kl", "--seeds", "1",
                       "--out", str(tmp_path))
    assert code == 0
    with open(tmp_path / "matrix.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["lower_bound", "kl"]
    assert all(r["seeds"] == "0" for r in rows)


def test_seeds_parsing():
    assert cli._seeds("3") == [0, 1, 2]
    assert cli._seeds("4,7") == [4, 7]


def test_gradcheck_command(capsys, monkeypatch):
    from mixsup import gradcheck
    monkeypatch.setattr(gradcheck, "LOSSES", ("full_ce", "kl"))
    code, out, _ = run(capsys, "gradcheck", "--instances", "3")
    assert code == 0 and "full_ce" in out and "max_rel_error" in out


def test_config_docs_match_file(capsys):
    from pathlib import Path
    doc = Path(__file__).resolve().parents[1] / "docs" / "config.md"
    assert doc.read_text() == cli.config_markdown()


def test_probe_command(capsys):
    code, out, _ = run(capsys, "probe", *TINY, "--seed", "0", "--variants", "decoupled")
    assert code == 0
    assert json.loads(out)[0]["contribution"]["L_kd"]["encoder"] == 0.0
