import hashlib
import io
import json
import zipfile

import pytest
from click.testing import CliRunner

from merlearn import config as cfgmod
from merlearn.checkpoint import load_checkpoint
from merlearn.cli import main
from merlearn.errors import ConfigError
from merlearn.metrics import read_csv


@pytest.fixture
def cli():
    return CliRunner()


def run(cli, *args):
    return cli.invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "run"
    res = CliRunner().invoke(main, ["train", "-c", "desk/smoke", "--set", "seed=3", "--out", str(out), "--quiet"],
                             catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return out


# -- train / eval -----------------------------------------------------------


def test_smoke_train_writes_artifacts(smoke_run):
    records = read_csv(smoke_run / "metrics.csv")
    assert [r.iteration for r in records] == list(range(1, 11))
    manifest = json.loads((smoke_run / "manifest.json").read_text())
    assert manifest["notes"]["status"] == "complete"
    assert manifest["config"]["learner"] == "maml"
    params, meta = load_checkpoint(smoke_run / "checkpoint.bin")
    assert meta["learner"] == "maml" and len(params) > 0


def test_overrides_recorded_verbatim(smoke_run):
    notes = json.loads((smoke_run / "manifest.json").read_text())["notes"]
    assert notes["source"] == "desk/smoke"
    assert notes["overrides"][0] == "seed=3"


def test_from_manifest_reproduces_metrics_bytewise(cli, smoke_run, tmp_path):
    res = run(cli, "train", "--from-manifest", smoke_run / "manifest.json", "--out", tmp_path / "again", "--quiet")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (smoke_run / "metrics.csv").read_bytes()


def test_from_manifest_excludes_config(cli, smoke_run):
    res = run(cli, "train", "--from-manifest", smoke_run / "manifest.json", "-c", "desk/smoke")
    assert res.exit_code == 2


def test_eval_is_deterministic_and_appends(cli, smoke_run, tmp_path):
    csv_path = tmp_path / "eval.csv"
    a = run(cli, "eval", smoke_run / "checkpoint.bin", "--episodes", 20, "--csv", csv_path)
    b = run(cli, "eval", smoke_run / "checkpoint.bin", "--episodes", 20, "--csv", csv_path)
    assert a.exit_code == 0 and a.output == b.output
    assert "post-adaptation acc" in a.output
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 3 and lines[1] == lines[2]


def test_eval_learner_mismatch_is_config_error(cli, smoke_run):
    res = run(cli, "eval", smoke_run / "checkpoint.bin", "--set", "learner=mann")
    assert res.exit_code == 2
    assert "trained as maml" in res.output


def test_eval_rejects_zero_episodes(cli, smoke_run):
    assert run(cli, "eval", smoke_run / "checkpoint.bin", "--episodes", 0).exit_code == 2


def test_invalid_config_exit_2(cli, tmp_path):
    res = run(cli, "train", "-c", "desk/smoke", "--set", "mer.k_pairs=0", "--out", tmp_path / "x")
    assert res.exit_code == 2
    assert "mer.k_pairs" in res.output


def test_unknown_key_exit_2(cli, tmp_path):
    assert run(cli, "train", "-c", "desk/smoke", "--set", "no.such=1", "--out", tmp_path / "x").exit_code == 2


def test_numeric_abort_exit_3_keeps_log(cli, tmp_path):
    out = tmp_path / "nan"
    res = run(cli, "train", "-c", "desk/smoke", "--set", "optim.alpha=1e150", "--out", out, "--quiet")
    assert res.exit_code == 3
    assert "task 0" in res.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["notes"]["status"].startswith("aborted")
    assert (out / "metrics.csv").exists()
    assert not (out / "checkpoint.bin").exists()


def test_gradcheck_threshold_exit_4(cli, monkeypatch):
    from merlearn import gradcheck

    monkeypatch.setattr(gradcheck, "run_all", lambda seed: [gradcheck.CheckResult("fake", 1.0, 1e-4)])
    res = run(cli, "gradcheck")
    assert res.exit_code == 4
    assert "fake" in res.output


# -- sweep, render, fixtures ------------------------------------------------


def test_one_cell_sweep(cli, tmp_path):
    res = run(cli, "sweep", "-c", "desk/smoke", "--set", "iterations=2", "--grid", "mer.eta=2",
              "--out", tmp_path / "sw", "--episodes", 5)
    assert res.exit_code == 0, res.output
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("cell,mer.eta,pre_accuracy,post_accuracy")
    assert len(rows) == 2 and rows[1].endswith(",ok")
    assert (tmp_path / "sw" / "cell-000" / "checkpoint.bin").exists()


def test_sweep_records_failing_cell(cli, tmp_path):
    res = run(cli, "sweep", "-c", "desk/smoke", "--set", "iterations=1", "--grid", "mer.k_pairs=1,99",
              "--out", tmp_path / "sw", "--episodes", 3)
    assert res.exit_code == 0
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert rows[1].endswith(",ok") and "failed" in rows[2]


def test_bad_grid_exit_2(cli, tmp_path):
    assert run(cli, "sweep", "-c", "desk/smoke", "--grid", "mer.eta", "--out", tmp_path).exit_code == 2


def test_render(cli, smoke_run, tmp_path):
    out = tmp_path / "c.svg"
    res = run(cli, "render", smoke_run / "metrics.csv", "--columns", "task_loss,train_acc", "--out", out)
    assert res.exit_code == 0 and out.read_text().count("<polyline") == 2
    assert run(cli, "render", smoke_run / "metrics.csv", "--columns", "bogus", "--out", out).exit_code == 1


def test_make_fixture_then_train_on_tree(cli, tmp_path):
    root = tmp_path / "tree"
    assert run(cli, "make-fixture", root, "--classes", 12, "--images", 3).exit_code == 0
    assert len(list(root.glob("*/*/*.png"))) == 36
    res = run(cli, "train", "-c", "desk/smoke", "--set", "dataset=omniglot", "--set", f"data.root={root}",
              "--set", "data.split=6,3,3", "--set", "n_way=3", "--set", "iterations=2", "--out", tmp_path / "r", "--quiet")
    assert res.exit_code == 0, res.output


def test_missing_data_root_exit_2(cli, tmp_path):
    res = run(cli, "train", "-c", "desk/smoke", "--set", "dataset=omniglot", "--set", f"data.root={tmp_path / 'none'}",
              "--out", tmp_path / "r")
    assert res.exit_code == 2


def _fake_archive(name):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(f"{name}/Alpha/character01/0101_01.png", b"not really a png")
    return buf.getvalue()


def test_fetch_verifies_checksum(tmp_path):
    from merlearn import runner

    src = tmp_path / "mirror"
    src.mkdir()
    blob = _fake_archive("images_background")
    (src / "images_background.zip").write_bytes(blob)
    good = {"images_background": hashlib.md5(blob).hexdigest()}
    root = runner.fetch_omniglot(tmp_path / "data", src.as_uri(), good)
    assert (root / "images_background" / "Alpha" / "character01" / "0101_01.png").exists()
    # second call is a no-op
    runner.fetch_omniglot(tmp_path / "data", src.as_uri(), good)

    # the CLI checks the published md5, which the fake archive cannot match
    res = CliRunner().invoke(main, ["fetch-omniglot", "--root", str(tmp_path / "other"), "--url-base", src.as_uri()])
    assert res.exit_code == 2
    assert "checksum mismatch" in res.output


def test_fetch_unreachable_exit_2(cli, tmp_path):
    res = run(cli, "fetch-omniglot", "--root", tmp_path / "d", "--url-base", (tmp_path / "nowhere").as_uri())
    assert res.exit_code == 2


def test_presets_listed(cli):
    names = run(cli, "presets").output.split()
    assert "desk/smoke" in names and "omniglot/maml-20way-mer" in names


# -- config -----------------------------------------------------------------


def test_every_preset_resolves_and_round_trips():
    for name in cfgmod.preset_names():
        cfg, _ = cfgmod.load(name)
        assert cfgmod.resolve(cfgmod.parse_text(cfgmod.to_text(cfg))) == cfg


def test_learner_defaults():
    mann, _ = cfgmod.load(None, ["learner=mann"])
    maml, _ = cfgmod.load(None, ["learner=maml", "mer.method=mer"])
    assert mann["meta_batch"] == 32 and mann["mer.lambda"] == 1.0
    assert maml["meta_batch"] == 10 and maml["mer.lambda"] == 0.1
    assert maml["optim.eval_inner_steps"] == maml["optim.inner_steps"]


def test_comments_and_blank_lines_ignored():
    assert cfgmod.parse_text("# c\n\nlearner = mann  # trailing\n") == {"learner": "mann"}


@pytest.mark.parametrize("text", ["learner mann", "n_way = five", "learner = svm", "bogus = 1"])
def test_bad_lines_rejected(text):
    with pytest.raises(ConfigError):
        cfgmod.resolve(cfgmod.parse_text(text))


@pytest.mark.parametrize("overrides", [
    ["learner=mann", "dataset=synth_regression"],
    ["learner=maml", "mer.method=m3"],
    ["learner=maml", "optim.alpha=0"],
    ["learner=maml_simple", "mer.method=none"],
    ["learner=maml", "mer.method=mer", "meta_batch=4", "mer.k_pairs=7"],
])
def test_cross_field_rules(overrides):
    with pytest.raises(ConfigError):
        cfgmod.load(None, overrides)
