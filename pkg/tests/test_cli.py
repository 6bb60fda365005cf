import json

import pytest

from nailguard.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """small end-to-end workspace: synth data + manifest + split"""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth-data", "--out", str(data), "--per-category", "10", "--seed", "0"]) == 0
    run = root / "run"
    assert main(["ingest", "--data", str(data), "--out", str(run)]) == 0
    assert main(["split", "--manifest", str(run / "dataset_manifest.json"), "--seed", "1", "--out", str(run)]) == 0
    return {"data": data, "run": run}


def test_no_arguments_usage_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def test_unknown_subcommand_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_unknown_flag_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["synth-data", "--out", "/tmp/x", "--frequency", "9"])
    assert err.value.code == 2


def test_train_defaults_mirror_reference_table():
    parser = build_parser()
    args = parser.parse_args(["train", "--manifest", "m", "--split", "s", "--out", "o"])
    assert args.arch == "tiny_test"
    assert args.lr == 0.0001
    assert args.batch_size == 32
    assert args.max_epochs == 200
    assert args.patience == 10


def test_adv_sweep_default_epsilons():
    parser = build_parser()
    args = parser.parse_args(["adv-sweep", "--manifest", "m", "--split", "s", "--out", "o"])
    assert args.epsilons == "0,0.1,0.12,0.14,0.16,0.18,0.2"


def test_synth_and_ingest_outputs(workspace):
    run = workspace["run"]
    manifest = json.loads((run / "dataset_manifest.json").read_text())
    assert manifest["total"] == 60
    assert (run / "skip_report.json").exists()
    split = json.loads((run / "split.json").read_text())
    assert split["ratios"] == [0.7, 0.2, 0.1]


def test_missing_manifest_is_typed_error(tmp_path, capsys):
    rc = main(["split", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_train_evaluate_explain_cycle(workspace, tmp_path):
    run = workspace["run"]
    data = workspace["data"]
    out = tmp_path / "train"
    rc = main([
        "train",
        "--arch", "tiny_test",
        "--manifest", str(run / "dataset_manifest.json"),
        "--split", str(run / "split.json"),
        "--data", str(data),
        "--max-epochs", "1",
        "--batch-size", "4",
        "--no-augment",
        "--out", str(out),
    ])
    assert rc == 0
    assert (out / "checkpoint" / "weights.npz").exists()
    assert (out / "history.csv").exists()
    assert (out / "curves.png").exists()
    index = json.loads((out / "manifest.json").read_text())
    assert index["runs"][0]["subcommand"] == "train"

    eval_out = tmp_path / "eval"
    rc = main([
        "evaluate",
        "--checkpoint", str(out / "checkpoint"),
        "--manifest", str(run / "dataset_manifest.json"),
        "--split", str(run / "split.json"),
        "--data", str(data),
        "--partition", "val",
        "--out", str(eval_out),
    ])
    assert rc == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert 0.0 <= report["accuracy"] <= 1.0
    assert (eval_out / "confusion.png").exists()

    cmp_out = tmp_path / "cmp"
    rc = main([
        "compare",
        "--report", f"tiny={eval_out / 'report.json'}",
        "--include-reference",
        "--out", str(cmp_out),
    ])
    assert rc == 0
    rows = json.loads((cmp_out / "comparison.json").read_text())
    assert any(not r["reproduced"] for r in rows)

    image = next((data / "pitting").glob("*.png"))
    exp_out = tmp_path / "explain"
    rc = main([
        "explain",
        "--checkpoint", str(out / "checkpoint"),
        "--image", str(image),
        "--method", "gradcam",
        "--out", str(exp_out),
    ])
    assert rc == 0
    assert (exp_out / "overlay.png").exists()
    assert json.loads((exp_out / "attribution.json").read_text())["method"] == "gradcam"


def test_adv_sweep_writes_table(workspace, tmp_path):
    run = workspace["run"]
    out = tmp_path / "sweep"
    rc = main([
        "adv-sweep",
        "--manifest", str(run / "dataset_manifest.json"),
        "--split", str(run / "split.json"),
        "--data", str(workspace["data"]),
        "--max-epochs", "1",
        "--batch-size", "4",
        "--no-augment",
        "--epsilons", "0,0.1",
        "--out", str(out),
    ])
    assert rc == 0
    lines = (out / "epsilon_sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "epsilon,val_loss,val_accuracy,optimal_epochs"
    assert len(lines) == 3
