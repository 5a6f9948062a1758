"""Command-line entry point: dataset generation, projection simulation, training,
hyperparameter search, fine-tuning, evaluation, and the step-wise experiment ladder.

Every generation/training command requires an explicit --seed and is deterministic
given it.  Commands exit 0 on success and nonzero with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import drr, evalstat, phantom, trainer, volgrid
from .nnreg.checkpoint import CheckpointError, load_model
from .trainer import SplitOverlapError, TrainConfig


def _phantom_params(name: str) -> phantom.PhantomParams:
    if name == "default":
        return phantom.PhantomParams()
    if name == "small":
        return phantom.small_test_params()
    raise ValueError(f"unknown phantom family {name!r} (use 'default' or 'small')")


def _parse_split(text: str, n: int) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"split must have 3 comma-separated values, got {text!r}")
    values = [float(p) for p in parts]
    if all(float(v).is_integer() for v in values) and sum(values) == n:
        return tuple(int(v) for v in values)
    if abs(sum(values) - 1.0) < 1e-9:
        counts = [int(round(v * n)) for v in values]
        counts[0] += n - sum(counts)
        return tuple(counts)
    raise ValueError(f"split {text!r} must be counts summing to {n} or fractions summing to 1")


def cmd_phantom_gen(args) -> int:
    params = _phantom_params(args.params)
    noise = phantom.LabelNoiseModel.parse(args.noise)
    split = _parse_split(args.split, args.n)
    records = phantom.make_dataset(
        n=args.n, params=params, noise=noise, seed=args.seed, out_dir=args.out,
        split_counts=split, image_size=args.image_size,
        save_volumes=args.save_volumes, write_previews=args.previews, jobs=args.jobs,
    )
    tlvs = np.array([r.true_tlv_liters for r in records])
    print(f"generated {len(records)} cases in {args.out}: "
          f"TLV min {tlvs.min():.3f} L, median {np.median(tlvs):.3f} L, max {tlvs.max():.3f} L")
    return 0


def cmd_simulate(args) -> int:
    vol = volgrid.read_rvol(args.volume)
    if not isinstance(vol, volgrid.Volume3D):
        print("error: expected an f32 volume, got a u8 mask", file=sys.stderr)
        return 1
    frontal, lateral = drr.simulate_pair(vol, target_spacing_mm=args.spacing, size=args.size)
    drr.write_rimg(args.out_frontal, frontal)
    drr.write_rimg(args.out_lateral, lateral)
    if args.previews:
        drr.write_pgm_preview(Path(args.out_frontal).with_suffix(".pgm"), frontal)
        drr.write_pgm_preview(Path(args.out_lateral).with_suffix(".pgm"), lateral)
    print(f"simulated {args.out_frontal} and {args.out_lateral}")
    return 0


def _load_sets(manifest, train_split="train", val_split="val"):
    records = phantom.read_manifest(manifest)
    train_set = trainer.load_split(manifest, records, train_split)
    val_set = trainer.load_split(manifest, records, val_split)
    return records, train_set, val_set


def _config_from_args(args, input_size: int) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_json(Path(args.config).read_text())
        return replace(config, variant=args.view, seed=args.seed, input_size=input_size)
    return TrainConfig(
        variant=args.view, input_size=input_size, learning_rate=args.lr,
        optimizer=args.optimizer, batch_size=args.batch_size,
        max_epochs=args.epochs, patience=args.patience, seed=args.seed,
    )


def cmd_train(args) -> int:
    _, train_set, val_set = _load_sets(args.manifest)
    config = _config_from_args(args, train_set.frontal.shape[-1])
    result = trainer.train(config, train_set, val_set, out_dir=args.out, verbose=args.verbose)
    print(f"trained {config.variant}: best epoch {result.best_epoch} "
          f"(val MSE {result.best_val_mse:.6f}), stopped after epoch {result.stop_epoch}; "
          f"checkpoint in {args.out}")
    return 0


def cmd_search(args) -> int:
    _, train_set, val_set = _load_sets(args.manifest)
    base = TrainConfig(variant=args.view, input_size=train_set.frontal.shape[-1],
                       max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    draws = trainer.HyperDraw(n_draws=args.draws, seed=args.seed)
    ranked = trainer.random_search(draws, train_set, val_set, base,
                                   out_dir=args.out, verbose=args.verbose, jobs=args.jobs)
    best = ranked[0]
    if best.result is None:
        print("error: every search draw failed", file=sys.stderr)
        return 1
    print(f"search done: best draw {best.draw_index} "
          f"(val MAPE {best.val_mape:.3f}%, val MSE {best.val_mse:.6f}); "
          f"ranking in {args.out}/search_ranking.csv")
    return 0


def cmd_finetune(args) -> int:
    _, train_set, val_set = _load_sets(args.manifest, args.train_split, args.val_split)
    config = _config_from_args(args, train_set.frontal.shape[-1])
    result = trainer.finetune(args.checkpoint, config, train_set, val_set,
                              out_dir=args.out, verbose=args.verbose)
    print(f"fine-tuned from {args.checkpoint}: best epoch {result.best_epoch} "
          f"(val MSE {result.best_val_mse:.6f}); checkpoint in {args.out}")
    return 0


def _evaluate_model(model, manifest, split: str):
    records = phantom.read_manifest(manifest)
    ds = trainer.load_split(manifest, records, split)
    preds = trainer.predict_dataset(model, ds)
    return ds, preds


def cmd_evaluate(args) -> int:
    model = load_model(args.checkpoint)
    ds, preds = _evaluate_model(model, args.manifest, args.split)
    report = evalstat.evaluate_pairs(ds.case_ids, preds, ds.labels)
    evalstat.write_report_files(report, args.out, args.name,
                                model_name=args.name, architecture=model.spec.backbone)
    r_text = "n/a" if report.pearson_r is None else f"{report.pearson_r:.4f}"
    print(f"{args.name}: N={report.n} MAPE {report.mape_pct:.3f}% "
          f"MAE {report.mae_ml:.1f} ml r {r_text}; report in {args.out}")
    return 0


def cmd_report(args) -> int:
    model_a = load_model(args.ensemble[0])
    model_b = load_model(args.ensemble[1])
    if model_a.spec.variant == "dual" or model_b.spec.variant == "dual":
        print("error: ensemble expects two single-view checkpoints", file=sys.stderr)
        return 1
    ds, preds_a = _evaluate_model(model_a, args.manifest, args.split)
    _, preds_b = _evaluate_model(model_b, args.manifest, args.split)
    from .nnreg.models import ensemble_predict
    preds = ensemble_predict(preds_a, preds_b)
    report = evalstat.evaluate_pairs(ds.case_ids, preds, ds.labels)
    arch = f"{model_a.spec.backbone}+{model_b.spec.backbone}"
    evalstat.write_report_files(report, args.out, "ensemble",
                                model_name="ensemble", architecture=arch)
    r_text = "n/a" if report.pearson_r is None else f"{report.pearson_r:.4f}"
    print(f"ensemble: N={report.n} MAPE {report.mape_pct:.3f}% "
          f"MAE {report.mae_ml:.1f} ml r {r_text}; report in {args.out}")
    return 0


def cmd_compare(args) -> int:
    a = np.loadtxt(args.a, delimiter=",")
    b = np.loadtxt(args.b, delimiter=",")
    report = evalstat.compare_measurements(a, b, args.label_a, args.label_b, args.out)
    r_text = "n/a" if report.pearson_r is None else f"{report.pearson_r:.4f}"
    print(f"compare {args.label_a} vs {args.label_b}: N={report.n} r {r_text} "
          f"bias {report.bias_ml:.1f} ml limits [{report.p2_5_ml:.1f}, {report.p97_5_ml:.1f}] ml")
    return 0


# ---------------------------------------------------------------------------
# Experiment ladder: sim-exact -> real-noisy -> finetune-gold
# ---------------------------------------------------------------------------

def _write_stage_metrics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(evalstat.METRICS_HEADER + "\n")
        for name, arch, report in rows:
            r_text = "degenerate" if report.pearson_r is None else f"{report.pearson_r:.6f}"
            f.write(f"{name},{arch},{report.mape_pct:.6f},{report.mae_ml:.6f},{r_text},{report.n}\n")


def cmd_ladder(args) -> int:
    from .nnreg.models import ensemble_predict

    out = Path(args.out)
    params = _phantom_params(args.params)
    split = _parse_split(args.split, args.n)
    data_dir = out / "data"

    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        phantom.make_dataset(n=args.n, params=params, noise=phantom.LabelNoiseModel("exact"),
                             seed=args.seed, out_dir=data_dir, split_counts=split,
                             image_size=args.image_size, jobs=args.jobs)
    records = phantom.read_manifest(manifest)
    train_set = trainer.load_split(manifest, records, "train")
    val_set = trainer.load_split(manifest, records, "val")
    test_set = trainer.load_split(manifest, records, "test")
    size = train_set.frontal.shape[-1]

    def fit(view: str, tr, va, seed_offset: int, stage_dir: Path):
        config = TrainConfig(variant=view, input_size=size, max_epochs=args.epochs,
                             patience=args.patience, learning_rate=args.lr,
                             batch_size=args.batch_size, seed=args.seed + seed_offset)
        return trainer.train(config, tr, va, out_dir=stage_dir / view, verbose=args.verbose)

    def report_for(model, ds) -> evalstat.EvalReport:
        preds = trainer.predict_dataset(model, ds)
        return evalstat.evaluate_pairs(ds.case_ids, preds, ds.labels)

    # stage 1: sim-exact, all four table rows
    stage1 = out / "sim_exact"
    results = {view: fit(view, train_set, val_set, i, stage1)
               for i, view in enumerate(("frontal", "lateral", "dual"))}
    rows = []
    for view in ("frontal", "lateral", "dual"):
        report = report_for(results[view].model, test_set)
        rows.append((view, "six_layer", report))
        evalstat.write_report_files(report, stage1, view, view, "six_layer")
    pf = trainer.predict_dataset(results["frontal"].model, test_set)
    pl = trainer.predict_dataset(results["lateral"].model, test_set)
    ens_report = evalstat.evaluate_pairs(test_set.case_ids, ensemble_predict(pf, pl), test_set.labels)
    rows.append(("ensemble", "six_layer+six_layer", ens_report))
    evalstat.write_report_files(ens_report, stage1, "ensemble", "ensemble", "six_layer+six_layer")
    _write_stage_metrics(stage1 / "metrics.csv", rows)
    print(f"sim-exact: dual MAPE {rows[2][2].mape_pct:.3f}% (metrics in {stage1 / 'metrics.csv'})")

    # stage 2: real-noisy analogue, multiplicative label noise on train/val/eval
    stage2 = out / "real_noisy"
    noise = phantom.LabelNoiseModel("mult", args.noise_sigma)
    noisy = phantom.relabel(records, noise, args.seed + 100)
    phantom.write_manifest(data_dir / "manifest_noisy.csv", noisy)
    tr_noisy = trainer.load_split(manifest, noisy, "train")
    va_noisy = trainer.load_split(manifest, noisy, "val")
    te_noisy = trainer.load_split(manifest, noisy, "test")
    noisy_result = fit("dual", tr_noisy, va_noisy, 10, stage2)
    noisy_report = report_for(noisy_result.model, te_noisy)
    evalstat.write_report_files(noisy_report, stage2, "dual", "dual", "six_layer")
    _write_stage_metrics(stage2 / "metrics.csv", [("dual", "six_layer", noisy_report)])
    print(f"real-noisy: dual MAPE {noisy_report.mape_pct:.3f}% (vs sim-exact {rows[2][2].mape_pct:.3f}%)")

    # stage 3: finetune-gold analogue, exact labels on a small held-in subset
    stage3 = out / "finetune_gold"
    n_val = len(val_set)
    n_ft = max(2, int(n_val * 0.75))
    ft_train = val_set.subset(np.arange(0, n_ft))
    ft_val = val_set.subset(np.arange(n_ft, n_val))
    config = TrainConfig(variant="dual", input_size=size, max_epochs=args.epochs,
                         patience=args.patience, learning_rate=args.lr,
                         batch_size=args.batch_size, seed=args.seed + 20)
    ft_result = trainer.finetune(stage2 / "dual" / "best.rnnckpt", config, ft_train, ft_val,
                                 out_dir=stage3 / "dual", verbose=args.verbose)
    ft_report = report_for(ft_result.model, test_set)
    evalstat.write_report_files(ft_report, stage3, "dual", "dual", "six_layer")
    _write_stage_metrics(stage3 / "metrics.csv", [("dual", "six_layer", ft_report)])
    print(f"finetune-gold: dual MAPE {ft_report.mape_pct:.3f}%")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lungvol",
                                     description="Lung volume regression workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset with projections")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", default="exact", help="exact | mult:SIGMA | add:SIGMA_ML | bias:DELTA_ML")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="1,0,0", help="train,val,test counts or fractions")
    p.add_argument("--params", default="default", choices=("default", "small"))
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--save-volumes", action="store_true")
    p.add_argument("--previews", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("simulate", help="volume -> frontal/lateral projection pair")
    p.add_argument("--volume", required=True)
    p.add_argument("--out-frontal", required=True)
    p.add_argument("--out-lateral", required=True)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--previews", action="store_true")
    p.set_defaults(func=cmd_simulate)

    def add_train_flags(p, with_view=True):
        p.add_argument("--manifest", required=True)
        if with_view:
            p.add_argument("--view", choices=("frontal", "lateral", "dual"), required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--config", default=None, help="TrainConfig JSON file")
        p.add_argument("--epochs", type=int, default=300)
        p.add_argument("--patience", type=int, default=50)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train", help="train one model on a dataset manifest")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="random hyperparameter search")
    add_train_flags(p)
    p.add_argument("--draws", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel draws; results independent of N")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--val-split", default="val")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="evaluate the output-average of two single-view checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ensemble", nargs=2, required=True, metavar=("CKPT_A", "CKPT_B"))
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="agreement report for two measurement CSV columns")
    p.add_argument("--a", required=True, help="CSV with one value per line (liters)")
    p.add_argument("--b", required=True)
    p.add_argument("--label-a", default="measurement A")
    p.add_argument("--label-b", default="measurement B")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ladder", help="run the step-wise experiment ladder end to end")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--split", default="0.6,0.2,0.2")
    p.add_argument("--params", default="default", choices=("default", "small"))
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=12)
    p.add_argument("--lr", type=float, default=7e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ladder)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return 1
    except SplitOverlapError as e:
        print(f"error: split overlap: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return 1
    except (volgrid.VolumeFormatError, drr.ImageFormatError) as e:
        print(f"error: file format: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
