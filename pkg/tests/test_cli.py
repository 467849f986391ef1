import json
import shutil

import pytest

from flier.cli import main
from flier.config import OUT_ENV, RunConfig, dump_config, parse_config

TINY_INI = """\
[data]
n_classes = 3
per_class_train = 6
per_class_test = 5
per_class_pretrain = 10

[diffusion]
ae_steps = 20
denoiser_epochs = 3

[train]
epochs = 2
base_lr = 1e-3

[run]
shots = 4
n_seeds = 2
alphas = 0.3, 0.7
ablate_shots = 1, 4
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """A tiny dataset plus cache shared by the command tests; copied before mutation."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    out = root / "out"
    assert run("gen-data", "--config", ini, "--out", out) == 0
    assert run("build-cache", "--config", ini, "--out", out) == 0
    return ini, out


@pytest.fixture
def work(prepared, tmp_path):
    ini, out = prepared
    dst = tmp_path / "out"
    shutil.copytree(out, dst)
    return ini, dst


def test_config_defaults_and_round_trip():
    cfg = parse_config("")
    assert cfg.data.n_classes == 10 and cfg.diffusion.count == 20
    assert cfg.train.alpha == 0.5 and cfg.run.alphas == (0.1, 0.3, 0.5, 0.7, 0.9)
    tiny = parse_config(TINY_INI)
    assert tiny.run.ablate_shots == (1, 4) and tiny.train.base_lr == 1e-3
    assert parse_config(dump_config(tiny)).to_dict() == tiny.to_dict()


@pytest.mark.parametrize("text,match", [
    ("[train]\nalfa = 0.3\n", "unknown key 'alfa'"),
    ("[model]\nwidth = 3\n", r"unknown section \[model\]"),
    ("[train]\nepochs = many\n", "cannot parse"),
    ("[train]\nalpha = 2\n", "alpha"),
])
def test_config_rejects_bad_input(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config(text, "x.ini")


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envroot"))
    assert RunConfig().path("cache") == tmp_path / "envroot" / "cache"
    monkeypatch.delenv(OUT_ENV)
    assert str(RunConfig().path("report")) == "flier_out/report"


def test_config_command_prints_effective_values(capsys):
    assert run("config", "--seed", 7, "--shots", 2) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.run.seed == 7 and cfg.run.shots == 2


def test_gen_data_single_class_fails_before_writing(tmp_path, capsys):
    ini = tmp_path / "one.ini"
    ini.write_text("[data]\nn_classes = 1\n")
    assert run("gen-data", "--config", ini, "--out", tmp_path / "o") == 1
    assert "n_classes=1" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_gen_data_manifest_hash_is_stable(prepared, tmp_path, capsys):
    ini, out = prepared
    assert run("gen-data", "--config", ini, "--out", tmp_path) == 0
    line = capsys.readouterr().out
    assert (tmp_path / "data" / "dataset.bin").read_bytes() == (out / "data" / "dataset.bin").read_bytes()
    assert run("gen-data", "--config", ini, "--out", tmp_path) == 0
    assert capsys.readouterr().out == line


def test_build_cache_is_a_noop_when_present(work, capsys):
    ini, out = work
    before = (out / "cache" / "manifest.json").read_bytes()
    assert run("build-cache", "--config", ini, "--out", out) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert (out / "cache" / "manifest.json").read_bytes() == before
    m = json.loads(before)
    assert m["count"] == 20 and len(m["classes"]) == 3


def test_missing_dataset_names_the_producing_command(tmp_path, capsys):
    assert run("build-cache", "--out", tmp_path) == 1
    assert "flier gen-data" in capsys.readouterr().err


def test_small_cache_error_names_the_count_flag(work, capsys):
    ini, out = work
    assert run("build-cache", "--config", ini, "--out", out, "--count", 8, "--force") == 0
    assert not (out / "cache.partial").exists()
    capsys.readouterr()
    assert run("train", "--config", ini, "--out", out, "--shots", 16) == 1
    err = capsys.readouterr().err
    assert "--count 8" in err and err.count("\n") == 1


def test_train_eval_and_rerun_determinism(work, capsys):
    ini, out = work
    assert run("train", "--config", ini, "--out", out) == 0
    ckpt = out / "checkpoint" / "flier-shot4.ckpt"
    report = out / "report" / "flier-shot4.report.json"
    first = (ckpt.read_bytes(), report.read_bytes())
    assert run("train", "--config", ini, "--out", out) == 0
    assert (ckpt.read_bytes(), report.read_bytes()) == first
    assert run("eval", "--config", ini, "--out", out) == 0
    ev = json.loads((out / "report" / "flier-shot4.eval.json").read_text())
    assert ev["best"]["top1"] == json.loads(report.read_text())["final"]["best"]["top1"]
    assert "top1" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["finetune", "augdata"])
def test_train_baseline_modes(work, mode):
    ini, out = work
    assert run("train", "--config", ini, "--out", out, "--mode", mode) == 0
    rep = json.loads((out / "report" / f"{mode}-shot4.report.json").read_text())
    assert rep["mode"] == mode


def test_eval_corrupted_checkpoint_writes_nothing(work, capsys):
    ini, out = work
    assert run("train", "--config", ini, "--out", out) == 0
    ckpt = out / "checkpoint" / "flier-shot4.ckpt"
    blob = bytearray(ckpt.read_bytes())
    blob[-10] ^= 0xFF
    ckpt.write_bytes(bytes(blob))
    capsys.readouterr()
    assert run("eval", "--config", ini, "--out", out) != 0
    assert "checksum" in capsys.readouterr().err
    assert not (out / "report" / "flier-shot4.eval.json").exists()


def test_eval_missing_checkpoint(work, capsys):
    ini, out = work
    assert run("eval", "--config", ini, "--out", out) == 1
    assert "flier train" in capsys.readouterr().err


def test_ablate_alpha_grid_and_report(work, capsys):
    ini, out = work
    assert run("ablate", "--config", ini, "--out", out, "--axis", "alpha") == 0
    csvs = list((out / "report").glob("alpha-*.csv"))
    assert len(csvs) == 1
    rows = csvs[0].read_text().splitlines()[1:]
    # 2 alphas x 2 shots x 2 seeds
    assert len(rows) == 8
    first = csvs[0].read_bytes()
    assert run("ablate", "--config", ini, "--out", out, "--axis", "alpha") == 0
    assert csvs[0].read_bytes() == first
    capsys.readouterr()
    assert run("report", "--config", ini, "--out", out) == 0
    assert "== alpha" in capsys.readouterr().out
    summary = (out / "report" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("axis,axis_value") and len(summary) == 5


def test_ablate_order_prints_gap(work, capsys):
    ini, out = work
    assert run("ablate", "--config", ini, "--out", out, "--axis", "order", "--shots", 1) == 0
    assert "top1(V-first) - top1(G-first)" in capsys.readouterr().out


def test_report_without_grids(work, capsys):
    ini, out = work
    assert run("report", "--config", ini, "--out", out) == 1
    assert "flier ablate" in capsys.readouterr().err


def test_seed_flag_changes_outputs(work):
    ini, out = work
    assert run("train", "--config", ini, "--out", out, "--mode", "finetune") == 0
    a = (out / "report" / "finetune-shot4.report.json").read_bytes()
    assert run("train", "--config", ini, "--out", out, "--mode", "finetune", "--seed", 1) == 0
    assert (out / "report" / "finetune-shot4.report.json").read_bytes() != a
