import json

import pytest

from hagmil.cli import main

TINY = {
    "synth": {"num_slides": 12, "coarse_grid": [4, 4], "feature_dim": 16, "seed": 1},
    "train": {"k_per_level": [2, 3], "lr": 1e-3, "max_epochs": 2, "early_stop_patience": 5,
              "model": {"d_in": 16, "dims": [8], "d_f": 8, "heads": 2, "attn_hidden": 4}},
}


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(root / "tiny.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.json"),
                 "--out-run", str(root / "run")]) == 0
    return root


def test_synth_and_train_outputs(workspace):
    man = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(man["slides"]) == 12
    run = workspace / "run"
    cfg = json.loads((run / "config.json").read_text())
    assert {"train", "data", "config_digest", "best_epoch"} <= set(cfg)
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    assert all((run / f"level_{j}.ckpt").exists() for j in range(3))


def test_eval_report(workspace, capsys, tmp_path):
    code, out, _ = _run(capsys, "eval", "--run", workspace / "run", "--threshold-mode", "youden",
                        "--report", tmp_path / "r.json")
    assert code == 0 and 0.0 <= out["auc"] <= 1.0 and out["k_override"] is None
    saved = json.loads((tmp_path / "r.json").read_text())
    assert saved["auc"] == out["auc"] and saved["config_digest"] == out["config_digest"]


def test_k_override_beyond_grid_saturates(workspace, capsys):
    _, a, _ = _run(capsys, "eval", "--run", workspace / "run", "--k-override", "64")
    _, b, _ = _run(capsys, "eval", "--run", workspace / "run", "--k-override", "1000")
    assert a["auc"] == b["auc"]


def test_sweep(workspace, capsys):
    code, out, _ = _run(capsys, "sweep-k", "--run", workspace / "run", "--ks", "1,64")
    assert code == 0 and [r["k"] for r in out["sweep"]] == [1, 64]
    assert out["sweep"][1]["planted_recall"] == 1.0


@pytest.mark.parametrize("fmt", ["csv", "pgm"])
def test_heatmap(workspace, capsys, tmp_path, fmt):
    code, out, _ = _run(capsys, "heatmap", "--run", workspace / "run", "--slide", "slide_00", "--level", 0,
                        "--format", fmt, "--out", tmp_path / f"h.{fmt}")
    assert code == 0 and out["shape"] == [16, 16] and out["selected"] == 12
    assert (tmp_path / f"h.{fmt}").exists()


def test_inspect(workspace, capsys):
    code, out, _ = _run(capsys, "inspect", "--file", workspace / "data" / "slide_00" / "level_2.hagf")
    assert code == 0 and out["kind"] == "features" and (out["n"], out["d"], out["level"]) == (16, 16, 2)
    code, out, _ = _run(capsys, "inspect", "--file", workspace / "run" / "level_1.ckpt")
    assert code == 0 and out["kind"] == "checkpoint" and out["meta"]["level"] == 1


def test_errors_are_json(workspace, capsys, tmp_path):
    code, _, err = _run(capsys, "eval")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"
    (tmp_path / "junk").write_bytes(b"JUNK" + bytes(40))
    code, _, err = _run(capsys, "inspect", "--file", tmp_path / "junk")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "BadMagicError"
    code, _, err = _run(capsys, "heatmap", "--run", workspace / "run", "--slide", "nope")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "KeyError"
    code, _, err = _run(capsys, "--threads", 0, "inspect", "--file", tmp_path / "junk")
    assert code == 2


def test_tampered_run_is_rejected(workspace, capsys, tmp_path):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(workspace / "run", run)
    cfg = json.loads((run / "config.json").read_text())
    cfg["train"]["lr"] = 0.5
    (run / "config.json").write_text(json.dumps(cfg))
    code, _, err = _run(capsys, "eval", "--run", run)
    assert code == 1 and "different config" in err
