import csv
import json

import pytest
from click.testing import CliRunner

from lesionforge.cli import main
from lesionforge.manifest import parse_manifest, summarize
from lesionforge.volume import load_mask, load_nifti


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    runner = CliRunner()
    spec = {"dims": [16, 16, 16], "n_lesions": 2,
            "lesion_radius_range_mm": [1.0, 1.8]}
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(spec))
    result = runner.invoke(main, [
        "synth", "--spec", str(spec_path), "--subjects", "4",
        "--timepoints", "2", "--seed", "21", "--name", "clid",
        "--out", str(out / "data")])
    assert result.exit_code == 0, result.output
    return out / "data"


def test_synth_writes_parseable_manifest(dataset_dir):
    m = parse_manifest(dataset_dir / "manifest.json")
    counts = summarize(m)
    assert counts["train_subjects"] == 3
    assert counts["test_subjects"] == 1


def test_assemble_writes_channels_and_flags(runner, dataset_dir, tmp_path):
    m = parse_manifest(dataset_dir / "manifest.json")
    subject = m.subjects[0].id
    out = tmp_path / "asm"
    result = runner.invoke(main, [
        "assemble", "--manifest", str(dataset_dir / "manifest.json"),
        "--subject", subject, "--pair", "1,2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    for name in ("image_t1", "image_t2", "prior_t1", "wm_t2"):
        assert (out / f"{name}.nii.gz").exists()
    flags = json.loads((out / "flags.json").read_text())
    assert set(flags) == {"t2_duplicated", "label_zero_substituted",
                          "label_from_prediction"}
    assert not flags["t2_duplicated"]


def test_augment_balances_train_split(runner, dataset_dir, tmp_path):
    out = tmp_path / "aug"
    result = runner.invoke(main, [
        "augment", "--manifest", str(dataset_dir / "manifest.json"),
        "--target-per-dataset", "5", "--seed", "3", "--out", str(out)])
    assert result.exit_code == 0, result.output
    balanced = parse_manifest(out / "manifest.json")
    assert summarize(balanced)["train_subjects"] == 5
    plans = list(out.glob("*/plan.json"))
    assert len(plans) == 2


def test_train_predict_score_pipeline(runner, dataset_dir, tmp_path):
    model_path = tmp_path / "model.json"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs": 30, "seed": 1,
                                    "patch_size": 16}))
    result = runner.invoke(main, [
        "train-toy", "--manifest", str(dataset_dir / "manifest.json"),
        "--config", str(cfg_path), "--out", str(model_path),
        "--history-figure", str(tmp_path / "history.png")])
    assert result.exit_code == 0, result.output
    assert model_path.exists()
    assert (tmp_path / "history.png").stat().st_size > 0

    pred_dir = tmp_path / "preds"
    result = runner.invoke(main, [
        "predict", "--model", str(model_path),
        "--manifest", str(dataset_dir / "manifest.json"),
        "--split", "test", "--out", str(pred_dir)])
    assert result.exit_code == 0, result.output
    prob_files = list(pred_dir.glob("*_prob.nii.gz"))
    mask_files = [p for p in pred_dir.glob("*.nii.gz")
                  if not p.name.endswith("_prob.nii.gz")]
    assert len(prob_files) == 8      # 1 test subject x 2 tps x 4 heads
    assert len(mask_files) == 8
    sample = load_nifti(prob_files[0])
    assert 0.0 <= sample.data.min() and sample.data.max() <= 1.0

    # ground-truth directory keyed by matching names
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    m = parse_manifest(dataset_dir / "manifest.json")
    subject = m.test_subjects()[0]
    from lesionforge.volume import save_nifti
    for t, tp in enumerate(subject.timepoints, start=1):
        gt = load_mask(tp.all)
        save_nifti(gt, gt_dir / f"{subject.id}_t{t}_all_t2.nii.gz")

    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    fig_dir = tmp_path / "figs"
    result = runner.invoke(main, [
        "score", "--pred", str(pred_dir), "--gt", str(gt_dir),
        "--task", "all", "--rule", "lower_only",
        "--json", str(report_path), "--csv", str(csv_path),
        "--figures", str(fig_dir)])
    assert result.exit_code == 0, result.output

    report = json.loads(report_path.read_text())
    assert report["rule"] == "lower_only"
    assert len(report["subjects"]) == 2
    assert 0.0 <= report["summary"]["mean_dice"] <= 1.0
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert "dice" in rows[0]
    assert (fig_dir / "scores.png").stat().st_size > 0
    assert (fig_dir / "volume_trajectories.png").stat().st_size > 0


def test_summarize_prints_table(runner, dataset_dir, tmp_path):
    out = tmp_path / "table.tsv"
    result = runner.invoke(main, [
        "summarize", str(dataset_dir / "manifest.json"), "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert lines[0].startswith("name\t")
    assert lines[-1].startswith("total\t")
    assert out.read_text().strip() == result.output.strip()


def test_loss_check_passes(runner):
    result = CliRunner().invoke(main, ["loss-check", "--instances", "3",
                                       "--seed", "77"])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert "FAIL" not in result.output


def test_score_errors_on_disjoint_dirs(runner, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    result = runner.invoke(main, ["score", "--pred", str(a), "--gt", str(b),
                                  "--json", str(tmp_path / "r.json")])
    assert result.exit_code != 0
