import json

import pytest

from scenead.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main, resolve_seed


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Fixture + trained checkpoint produced through the command line."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "scene"
    assert main(["fixture", "--out", str(data), "--seed", "3", "--n-train", "8", "--n-query", "6",
                 "--image-size", "64"]) == EXIT_OK
    cfg = {
        "model": {"backbone": "tiny_random", "use_attention_modules": True, "input_size": [64, 64]},
        "train": {"max_epochs": 2, "batch_size": 4, "seed": 0},
        "dataset": str(data),
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == EXIT_OK
    return root, data


def _read(p):
    return json.loads(p.read_text())


def test_fixture_manifest(ws):
    root, data = ws
    man = _read(data / "command_manifest.json")
    assert man["command"] == "fixture" and man["resolved"]["seed"] == 3
    assert "--seed" in man["argv"]


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("SCENEAD_SEED", "11")
    assert resolve_seed(None, 0) == 11
    assert resolve_seed(4, 0) == 4
    monkeypatch.delenv("SCENEAD_SEED")
    assert resolve_seed(None, 5) == 5


def test_augment_and_densify(ws, tmp_path):
    import shutil

    root, data = ws
    d = tmp_path / "scene"
    shutil.copytree(data, d)
    assert main(["augment", "--dataset", str(d), "--variant", "both", "--k", "2"]) == EXIT_OK
    assert len(list((d / "train" / "inv").glob("*.png"))) == 2 * 7
    assert len(list((d / "train" / "qanv").glob("*.png"))) == 6
    assert _read(d / "augment_both" / "command_manifest.json")["outputs"] == {"inv": 14, "qanv": 6}
    assert main(["augment", "--dataset", str(d), "--variant", "qanv", "--localizer", "noisy"]) == EXIT_OK

    out = tmp_path / "dense.json"
    assert main(["poses", "densify", "--dataset", str(data), "--k", "3", "--out", str(out)]) == EXIT_OK
    assert len(_read(out)) == 3 * 7
    assert _read(tmp_path / "dense.manifest.json")["outputs"]["n_poses"] == 21


def test_train_outputs(ws):
    root, _ = ws
    man = _read(root / "run" / "run_manifest.json")
    assert man["best_epoch"] >= 0 and man["test_report"]["pixel_f1"] >= 0


def test_eval_excludes_validation(ws):
    root, data = ws
    out = root / "eval.json"
    assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--dataset", str(data),
                 "--out", str(out), "--dump-maps", str(root / "maps")]) == EXIT_OK
    rep = _read(out)
    train_man = _read(root / "run" / "run_manifest.json")
    assert set(rep["excluded_val_refs"]) == set(train_man["val_refs"])
    assert rep["image_refs"] == train_man["test_refs"]
    assert rep["pixel_f1"] == pytest.approx(train_man["test_report"]["pixel_f1"], rel=1e-6)
    assert "imbalance" in rep
    assert len(list((root / "maps").glob("*_heatmap.png"))) == len(rep["image_refs"])


def test_replay_reproduces_eval_and_train(ws):
    root, _ = ws
    first = _read(root / "eval.json") if (root / "eval.json").exists() else None
    if first is None:
        pytest.skip("eval output missing")
    assert main(["replay", str(root / "eval.manifest.json")]) == EXIT_OK
    again = _read(root / "eval.json")
    assert again["pixel_f1"] == pytest.approx(first["pixel_f1"], rel=1e-6)
    assert again["pixel_auroc"] == pytest.approx(first["pixel_auroc"], rel=1e-6)

    before = _read(root / "run" / "run_manifest.json")
    assert main(["train", "--config", str(root / "run" / "run_manifest.json"),
                 "--out", str(root / "rerun")]) == EXIT_OK
    after = _read(root / "rerun" / "run_manifest.json")
    assert after["test_report"]["pixel_f1"] == pytest.approx(before["test_report"]["pixel_f1"], rel=1e-6)
    assert after["config_hash"] == before["config_hash"]


def test_erf_command(ws):
    root, data = ws
    out = root / "erf.json"
    assert main(["erf", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--out", str(out),
                 "--locations", "2", "--dataset", str(data), "--images", "1", "--gates", "0.5"]) == EXIT_OK
    rep = _read(out)
    assert set(rep["levels"]) == {"level0", "level1", "level2"}
    assert rep["n_images"] == 2
    assert all(len(v["per_location"]) == 4 for v in rep["levels"].values())
    assert len(list((root / "erf_heatmaps").glob("*.png"))) == 6


def test_grid_and_report(ws):
    root, data = ws
    grid = root / "grid.json"
    assert main(["grid", "--dataset", str(data), "--out", str(grid), "--epochs", "1", "--input-size", "64",
                 "--methods", "RD", "OmniAD", "--variants", "none"]) == EXIT_OK
    rep = _read(grid)
    assert set(rep["cells"]) == {"RD", "OmniAD"}
    out = root / "tables.json"
    assert main(["report", "--grid", str(grid), "--names", "toy", "--out", str(out)]) == EXIT_OK
    md = out.with_suffix(".md").read_text()
    assert "Pixel F1 (toy)" in md and "Improvement over RD" in md


def test_usage_and_failure_codes(ws, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--dataset", str(tmp_path),
                 "--out", str(tmp_path / "x.json")]) == EXIT_FAIL
    assert main(["augment", "--dataset", str(ws[1]), "--variant", "inv", "--renderer", "external"]) == EXIT_USAGE
