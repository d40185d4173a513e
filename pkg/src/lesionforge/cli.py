"""Command-line entry points.

    lesionforge synth      generate phantom datasets (NIfTI + manifest)
    lesionforge assemble   write the four model-input channels for a subject
    lesionforge augment    balance a dataset with synthesized pairs
    lesionforge train-toy  train the desk-scale segmenter
    lesionforge predict    run inference, write probability maps and masks
    lesionforge score      evaluate predictions (JSON + CSV + figures)
    lesionforge loss-check finite-difference verification of all gradients
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import click
import numpy as np

from . import assembly, lesionmix, losses, metrics, phantom, plots, toytrain
from .manifest import (parse_manifest, serialize_manifest, summarize,
                       summarize_table)
from .volume import load_mask, load_nifti, save_nifti


@click.group()
def main():
    """Longitudinal lesion segmentation toolkit."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              help="PhantomSpec JSON; defaults apply when omitted.")
@click.option("--subjects", default=8, show_default=True,
              help="Subject count; one in four goes to the test split.")
@click.option("--timepoints", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--name", default="phantoms", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(spec_path, subjects, timepoints, seed, name, out_dir):
    """Generate a synthetic phantom dataset with full ground truth."""
    spec_dict = {}
    if spec_path:
        with open(spec_path) as fh:
            spec_dict = json.load(fh)
    spec_dict.setdefault("seed", seed)
    spec = phantom.PhantomSpec.from_dict(spec_dict)
    n_test = max(1, subjects // 4) if subjects > 1 else 0
    n_train = subjects - n_test
    manifest = phantom.write_dataset(spec, out_dir, n_train, n_test,
                                     n_timepoints=timepoints, name=name,
                                     seed=seed)
    click.echo(f"wrote {len(manifest.subjects)} subjects "
               f"({n_train} train / {n_test} test) to {out_dir}")


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--subject", "subject_id", required=True)
@click.option("--pair", default="1,1", show_default=True,
              help="Timepoint pair a,b (1-based).")
@click.option("--prior", type=click.Choice(["ground_truth", "zero"]),
              default="ground_truth", show_default=True)
@click.option("--prior-prob", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def assemble(manifest_path, subject_id, pair, prior, prior_prob, seed, out_dir):
    """Write the four input channels plus a flags sidecar for one subject."""
    m = parse_manifest(manifest_path)
    subject = m.subject(subject_id)
    a, b = (int(v) for v in pair.split(","))
    model_input = assembly.assemble(subject, (a, b), prior,
                                    provide_prior_prob=prior_prob, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_nifti(model_input.image_t1, out / "image_t1.nii.gz")
    save_nifti(model_input.image_t2, out / "image_t2.nii.gz")
    save_nifti(model_input.prior_t1, out / "prior_t1.nii.gz")
    save_nifti(model_input.wm_t2, out / "wm_t2.nii.gz")
    with open(out / "flags.json", "w") as fh:
        json.dump(model_input.flags.as_dict(), fh, indent=2)
    click.echo(f"assembled {subject_id} pair ({a},{b}) -> {out}")


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--bank-from", default="train", show_default=True,
              type=click.Choice(["train", "all"]),
              help="Which split feeds the lesion bank.")
@click.option("--target-per-dataset", default=80, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def augment(manifest_path, bank_from, target_per_dataset, seed, out_dir):
    """Pad the train split with synthesized longitudinal subjects."""
    m = parse_manifest(manifest_path)
    subjects = m.train_subjects() if bank_from == "train" else list(m.subjects)
    pairs = []
    for s in subjects:
        for tp in s.timepoints:
            if tp.all is not None:
                pairs.append((load_nifti(tp.image), load_mask(tp.all)))
    bank = lesionmix.build_bank(pairs)
    balanced = lesionmix.balance_dataset(m, bank, target_per_dataset,
                                         out_dir, rng=seed)
    out_manifest = Path(out_dir) / "manifest.json"
    serialize_manifest(balanced, out_manifest)
    counts = summarize(balanced)
    click.echo(f"balanced {m.name}: {counts['train_subjects']} train subjects "
               f"-> {out_manifest}")


@main.command(name="train-toy")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TrainConfig JSON; defaults apply when omitted.")
@click.option("--out", "model_path", required=True, type=click.Path())
@click.option("--history-figure", type=click.Path(),
              help="Optional loss-history PNG.")
def train_toy(manifest_path, config_path, model_path, history_figure):
    """Train the per-voxel segmenter and serialize it as JSON."""
    m = parse_manifest(manifest_path)
    cfg_dict = {}
    if config_path:
        with open(config_path) as fh:
            cfg_dict = json.load(fh)
    cfg = toytrain.TrainConfig.from_dict(cfg_dict)
    model, history = toytrain.train(m, cfg)
    model.save(model_path)
    if history_figure:
        plots.training_history(history, history_figure)
    click.echo(f"trained {cfg.epochs} epochs; final total loss "
               f"{history[-1]['total']:.6f}; model -> {model_path}")


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "test", "all"]))
@click.option("--with-prior/--no-prior", default=True, show_default=True,
              help="Supply the stored t1 label at the first window.")
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def predict(model_path, manifest_path, split, with_prior, threshold, out_dir):
    """Write the four probability maps and binarized masks per timepoint."""
    model = toytrain.ToyModel.load(model_path)
    m = parse_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = [s for s in m.subjects if split == "all" or s.split == split]
    for subject in subjects:
        preds = toytrain.predict_subject(model, subject,
                                         with_prior=with_prior,
                                         threshold=threshold)
        for t, pred in enumerate(preds, start=1):
            for head, vol in pred.maps().items():
                save_nifti(vol, out / f"{subject.id}_t{t}_{head}_prob.nii.gz")
                save_nifti(assembly.binarize(vol, threshold),
                           out / f"{subject.id}_t{t}_{head}.nii.gz")
    click.echo(f"predicted {len(subjects)} subject(s) -> {out}")


_TIMEPOINT_RE = re.compile(r"^(?P<subject>.+?)_t(?P<tp>\d+)(?:_.*)?$")


@main.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True))
@click.option("--task", default="all", show_default=True,
              type=click.Choice(["all", "new", "vanishing"]))
@click.option("--rule", default="lower_only", show_default=True,
              type=click.Choice(list(metrics.DETECTION_RULES)))
@click.option("--min-volume-mm3", default=3.0, show_default=True)
@click.option("--json", "json_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path(),
              help="Also write the per-subject table as CSV.")
@click.option("--figures", "figures_dir", type=click.Path(),
              help="Also render score bars and volume trajectories.")
def score(pred_dir, gt_dir, task, rule, min_volume_mm3, json_path, csv_path,
          figures_dir):
    """Score predictions against ground truth, matched by file name.

    Files whose stem contains the task token (eg ``_all``) are compared;
    when none carry it, every common file name is scored. Stems shaped
    ``<subject>_t<k>...`` are grouped into per-subject volume
    trajectories for the figures.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)

    def stem(p: Path) -> str:
        return p.name.removesuffix(".gz").removesuffix(".nii")

    gt_files = {stem(p): p for p in sorted(gt_dir.iterdir())
                if p.name.endswith((".nii", ".nii.gz"))}
    pred_files = {stem(p): p for p in sorted(pred_dir.iterdir())
                  if p.name.endswith((".nii", ".nii.gz"))}
    common = sorted(set(gt_files) & set(pred_files))
    tagged = [s for s in common if f"_{task}" in s]
    if tagged:
        common = tagged
    if not common:
        raise click.ClickException("no matching files between pred and gt")

    rows = []
    for name in common:
        pred_mask = load_mask(pred_files[name])
        gt_mask = load_mask(gt_files[name])
        report = metrics.detection_f1(pred_mask, gt_mask,
                                      min_volume_mm3=min_volume_mm3, rule=rule)
        rows.append({
            "id": name,
            "dice": metrics.dice_score(pred_mask, gt_mask),
            "pred_volume_mm3": pred_mask.volume_mm3(),
            "gt_volume_mm3": gt_mask.volume_mm3(),
            **{k: v for k, v in report.as_dict().items() if k != "per_lesion"},
        })

    def _mean(key):
        return sum(r[key] for r in rows) / len(rows)

    report_doc = {
        "task": task, "rule": rule, "min_volume_mm3": min_volume_mm3,
        "subjects": rows,
        "summary": {"n": len(rows), "mean_dice": _mean("dice"),
                    "mean_f1": _mean("f1"),
                    "mean_sensitivity": _mean("sensitivity"),
                    "mean_precision": _mean("precision")},
    }
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(report_doc, fh, indent=2)
        fh.write("\n")

    if csv_path:
        fields = ["id", "dice", "f1", "sensitivity", "precision", "tp",
                  "n_gt_lesions", "n_pred_lesions", "pred_volume_mm3",
                  "gt_volume_mm3"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)

    if figures_dir:
        figdir = Path(figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        plots.score_bars(rows, figdir / "scores.png",
                         title=f"{task} ({rule})")
        series: dict[str, list] = {}
        for r in rows:
            match = _TIMEPOINT_RE.match(r["id"])
            if match:
                series.setdefault(match["subject"], []).append(
                    (int(match["tp"]), r))
        trajectories = []
        rhos = {}
        for subject, entries in sorted(series.items()):
            entries.sort()
            if len(entries) < 2:
                continue
            traj = metrics.VolumeTrajectory(
                subject_id=subject,
                predicted_mm3=tuple(e[1]["pred_volume_mm3"] for e in entries),
                ground_truth_mm3=tuple(e[1]["gt_volume_mm3"] for e in entries))
            trajectories.append(traj)
            try:
                rhos[subject] = metrics.pearson(traj.predicted_mm3,
                                                traj.ground_truth_mm3)
            except Exception:
                pass
        if trajectories:
            plots.volume_trajectories(trajectories,
                                      figdir / "volume_trajectories.png",
                                      rho_values=rhos)

    click.echo(f"scored {len(rows)} file(s): mean Dice "
               f"{report_doc['summary']['mean_dice']:.4f}, mean F1 "
               f"{report_doc['summary']['mean_f1']:.4f} -> {json_path}")


@main.command(name="summarize")
@click.argument("manifests", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(),
              help="Also write the table to a TSV file.")
def summarize_cmd(manifests, out_path):
    """Print availability/split counts per dataset, tab-delimited."""
    parsed = [parse_manifest(p, check_files=False) for p in manifests]
    table = summarize_table(parsed)
    click.echo(table)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(table + "\n")


@main.command(name="loss-check")
@click.option("--instances", default=25, show_default=True)
@click.option("--seed", default=2024, show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
def loss_check(instances, seed, tolerance):
    """Verify every analytic gradient against central finite differences."""
    results = losses.fd_check_losses(n_instances=instances, seed=seed)

    # chained model gradient on a random small input
    rng = np.random.Generator(np.random.Philox(seed))
    from .assembly import InputFlags, ModelInput
    from .volume import Mask, Volume

    shape = (6, 6, 6)
    x1 = Volume(rng.random(shape), (1, 1, 1))
    x2 = Volume(rng.random(shape), (1, 1, 1))
    wm = Mask((rng.random(shape) < 0.6).astype(np.uint8), (1, 1, 1))
    prior = Mask((rng.random(shape) < 0.3).astype(np.uint8), (1, 1, 1))
    mi = ModelInput(x1, x2, prior, wm, InputFlags())
    labels = losses.SampleLabels(
        all_t1=(rng.random(shape) < 0.3).astype(float),
        all_t2=(rng.random(shape) < 0.3).astype(float),
        new_t2=(rng.random(shape) < 0.2).astype(float),
        vanishing_t2=(rng.random(shape) < 0.2).astype(float))
    model = toytrain.ToyModel(weights=rng.normal(0, 0.5, (4, 8)))
    results["toy_model_chain"] = toytrain.grad_check(
        model, mi, labels, losses.LossConfig())

    width = max(len(k) for k in results)
    failed = False
    for name, err in results.items():
        ok = err <= tolerance
        failed |= not ok
        click.echo(f"{name:<{width}}  max rel err {err:.3e}  "
                   f"{'PASS' if ok else 'FAIL'}")
    if failed:
        raise click.ClickException(f"gradient check exceeded {tolerance:g}")
    click.echo(f"all gradients within {tolerance:g} of finite differences "
               f"({instances} instances)")


if __name__ == "__main__":
    main()
