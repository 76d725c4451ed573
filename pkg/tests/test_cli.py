import filecmp

import pytest

from gaittake import cli, ops
from gaittake.config import micro_config


@pytest.fixture
def tiny_ini(tmp_path):
    cfg = micro_config()
    cfg.data.identities = 3
    cfg.data.views = (0, 90)
    cfg.data.frames = 6
    cfg.data.root = str(tmp_path / "data")
    cfg.training.steps = 4
    cfg.training.checkpoint_every = 2
    cfg.training.learning_rate = 1e-2
    cfg.run.out = str(tmp_path / "run")
    path = tmp_path / "tiny.ini"
    path.write_text(cfg.to_ini())
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_full_pipeline(tiny_ini, tmp_path, capsys):
    assert run("gen-data", "--config", tiny_ini) == 0
    assert "36 sequences" in capsys.readouterr().out
    assert run("train", "--config", tiny_ini) == 0
    out = tmp_path / "run"
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,active_fraction,grad_norm,wall_time" and len(lines) == 5
    assert (out / "checkpoints" / "step-000002" / "tensors.bin").exists()
    assert run("eval", "--config", tiny_ini) == 0
    text = capsys.readouterr().out
    assert "identical-view cases excluded" in text and "GaitTAKE-CL" in text
    assert (out / "report.txt").read_text() == text[text.index("Rank-1"):]
    assert (out / "embeddings" / "probe" / "manifest.csv").exists()


def test_gen_data_refuses_overwrite(tiny_ini, tmp_path, capsys):
    assert run("gen-data", "--config", tiny_ini) == 0
    assert run("gen-data", "--config", tiny_ini) == 2
    assert "--force" in capsys.readouterr().err
    assert run("gen-data", "--config", tiny_ini, "--force") == 0


def test_gen_data_force_leaves_foreign_directories(tmp_path, tiny_ini, capsys):
    foreign = tmp_path / "mine"
    foreign.mkdir()
    (foreign / "notes.txt").write_text("keep")
    assert run("gen-data", "--config", tiny_ini, "--out", foreign, "--force") == 2
    assert (foreign / "notes.txt").read_text() == "keep"


def test_invalid_view_rejected_before_writing(tmp_path, tiny_ini, capsys):
    text = tiny_ini.read_text().replace("views = 0, 90", "views = 0, 400")
    tiny_ini.write_text(text)
    assert run("gen-data", "--config", tiny_ini) == 2
    assert "data.views" in capsys.readouterr().err
    assert not (tmp_path / "data").exists()


def test_unknown_key_rejected(tmp_path, tiny_ini, capsys):
    tiny_ini.write_text(tiny_ini.read_text().replace("[pose]", "[pose]\nwidth = 3"))
    assert run("gen-data", "--config", tiny_ini) == 2
    assert "width" in capsys.readouterr().err


def test_train_existing_run_and_resume(tiny_ini, tmp_path, capsys):
    assert run("gen-data", "--config", tiny_ini) == 0
    assert run("train", "--config", tiny_ini) == 0
    assert run("train", "--config", tiny_ini) == 2
    assert "--resume" in capsys.readouterr().err
    tiny_ini.write_text(tiny_ini.read_text().replace("steps = 4", "steps = 6"))
    assert run("train", "--config", tiny_ini, "--resume") == 0
    assert "resuming from step 4" in capsys.readouterr().out
    assert len((tmp_path / "run" / "metrics.csv").read_text().splitlines()) == 7


def test_same_seed_runs_identical(tiny_ini, tmp_path):
    assert run("gen-data", "--config", tiny_ini) == 0
    for name in ("a", "b"):
        assert run("train", "--config", tiny_ini, "--out", tmp_path / name, "--workers", 1) == 0
        assert run("eval", "--config", tiny_ini, "--out", tmp_path / name) == 0
    for rel in ("checkpoints/latest/tensors.bin", "checkpoints/latest/manifest.json", "report.txt", "report.csv"):
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)


def test_train_too_small_dataset(tiny_ini, capsys):
    assert run("gen-data", "--config", tiny_ini) == 0
    text = tiny_ini.read_text().replace("identities = 2\n", "identities = 5\n", 1)
    tiny_ini.write_text(text)
    assert run("train", "--config", tiny_ini) == 2
    assert "dataset too small" in capsys.readouterr().err


def test_eval_shape_mismatch(tiny_ini, capsys):
    assert run("gen-data", "--config", tiny_ini) == 0
    assert run("train", "--config", tiny_ini) == 0
    tiny_ini.write_text(tiny_ini.read_text().replace("[head]\nheads = 2", "[head]\nheads = 3"))
    assert run("eval", "--config", tiny_ini) == 2
    assert "head.fc2.weight" in capsys.readouterr().err


def test_eval_missing_dataset(tiny_ini, capsys):
    assert run("eval", "--config", tiny_ini) == 2


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_gradcheck_catches_broken_softmax(monkeypatch, capsys):
    monkeypatch.setattr(ops, "_softmax_grad", lambda y, g, axis: 1.1 * g)
    assert run("gradcheck") == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "softmax" in out
