"""Command-line interface.

Subcommands: synth, crossval, train, eval, finetune, report, gradcheck.
Global flags: --config <json>, --seed <int>, --out <dir>,
--precision {f32,f64}.  Machine-readable results land under --out;
a short human summary goes to stdout.  Exit codes: 0 success, 2 for
configuration/schema problems (the offending JSON path is named),
1 for runtime failures.
"""

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import DatasetConfig, ExperimentConfig, load_config
from .data import DatasetIndex, load_manifest, synth_generate, write_dataset
from .errors import CardisegError, ConfigError
from .evaluation import evaluate_model
from .experiments import (
    FinetuneSpec,
    finetune_sweep,
    gap_report,
    improvement_summary,
    run_crossval,
    save_model_checkpoint,
    sweep_curves_rows,
)
from .rng import derive_seed, pcg
from .svgplot import bar_chart_svg, boxplot_svg, line_chart_svg
from .training import fit
from .unet import ModelConfig, build
from .verify import TOLERANCE, full_suite

__all__ = ["main"]


def _build_dataset(dataset_cfg: DatasetConfig, seed_override: int | None = None) -> DatasetIndex:
    if dataset_cfg.kind == "manifest":
        return load_manifest(dataset_cfg.manifest, provenance=dataset_cfg.distribution)
    seed = dataset_cfg.seed if seed_override is None else seed_override
    return synth_generate(dataset_cfg.phantom_spec(), seed=seed)


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    model, train, dataset, experiment = config.model, config.train, config.dataset, config.experiment
    if args.seed is not None:
        model = replace(model, seed=args.seed)
        train = replace(train, seed=args.seed)
        dataset = replace(dataset, seed=args.seed)
        experiment = replace(experiment, pipeline=replace(experiment.pipeline, seed=args.seed))
    if args.precision is not None:
        model = replace(model, precision=args.precision)
    return replace(config, model=model, train=train, dataset=dataset, experiment=experiment)


def _split_train_val(index: DatasetIndex, val_fraction: float, seed: int):
    patients = sorted(index.patients())
    order = [patients[i] for i in pcg(derive_seed(seed, "valsplit")).permutation(len(patients))]
    n_val = max(1, int(round(val_fraction * len(patients))))
    if n_val >= len(patients):
        raise ConfigError("val_fraction leaves no training patients", path="experiment.val_fraction")
    val = set(order[:n_val])
    return index.subset([p for p in patients if p not in val]), index.subset(sorted(val))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_synth(config: ExperimentConfig, args) -> int:
    out = Path(args.out)
    index = _build_dataset(config.dataset)
    manifest = write_dataset(index, out)
    print(f"wrote {len(index)} volumes ({len(index.patients())} patients) to {manifest.parent}")
    return 0


def cmd_train(config: ExperimentConfig, args) -> int:
    out = Path(args.out)
    index = _build_dataset(config.dataset)
    train_idx, val_idx = _split_train_val(
        index, config.experiment.val_fraction, config.train.seed
    )
    model = build(config.model)
    pipeline = replace(config.experiment.pipeline, train_mode=True, seed=config.train.seed)
    result = fit(model, train_idx, val_idx, config.train, pipeline=pipeline, out_dir=out)
    train_eval = evaluate_model(model, train_idx, replace(pipeline, train_mode=False))
    val_eval = evaluate_model(model, val_idx, replace(pipeline, train_mode=False))
    save_model_checkpoint(out / "final_checkpoint.bin", model)
    _write_json(
        out / "metrics.json",
        {
            "train_patients": sorted(train_idx.patients()),
            "val_patients": sorted(val_idx.patients()),
            "epochs_trained": len(result.history),
            "best_val_loss": result.best_val_loss,
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "train": train_eval.to_dict(),
            "val": val_eval.to_dict(),
        },
    )
    last = result.history[-1] if result.history else None
    dsc = f"{last.dsc_labels:.4f}" if last else "n/a"
    print(f"trained {len(result.history)} epochs; final val dice {dsc}; results in {out}")
    return 0


def cmd_crossval(config: ExperimentConfig, args) -> int:
    out = Path(args.out)
    index = _build_dataset(config.dataset)
    pipeline = replace(config.experiment.pipeline, train_mode=True, seed=config.train.seed)
    result = run_crossval(
        index,
        config.model,
        config.train,
        k=config.experiment.k,
        strategy=config.experiment.split,
        pipeline=pipeline,
        out_dir=out,
    )
    aggregate = {
        "k": result.k,
        "folds": [
            {
                "fold": f.fold,
                "epochs_trained": len(f.fit.history),
                "train": f.train_eval.to_dict(),
                "test": f.test_eval.to_dict(),
            }
            for f in result.folds
        ],
    }

    if config.experiment.unseen is not None:
        unseen_idx = _build_dataset(config.experiment.unseen)
        infer_pipe = replace(pipeline, train_mode=False)
        unseen_evals = []
        for fold in result.folds:
            model = build(config.model)
            arrays, _ = load_checkpoint(fold.checkpoint_path)
            model.load_state_dict(arrays)
            unseen_evals.append(evaluate_model(model, unseen_idx, infer_pipe))
        report = gap_report(
            result,
            unseen_evals,
            training_dataset=index.provenance,
            unseen_dataset=unseen_idx.provenance,
        )
        _write_json(out / "gap_report.json", report.to_dict())
        aggregate["unseen"] = [e.to_dict() for e in unseen_evals]
        print(
            "gap (labels): train-test "
            f"{report.gaps['test']['labels']:.4f}, train-unseen "
            f"{report.gaps['unseen']['labels']:.4f}"
        )
    _write_json(out / "metrics.json", aggregate)
    means = [f.test_eval.mean["labels"] for f in result.folds]
    print(f"crossval k={result.k} test dice per fold: {[round(m, 4) for m in means]}")
    return 0


def cmd_eval(config: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint", path="checkpoint")
    out = Path(args.out)
    arrays, meta = load_checkpoint(args.checkpoint)
    if "model_config" not in meta:
        raise ConfigError(f"{args.checkpoint}: missing model_config meta", path="checkpoint")
    model = build(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(arrays)
    index = _build_dataset(config.dataset)
    result = evaluate_model(model, index)
    _write_json(out / "metrics.json", {"dataset": index.name, "eval": result.to_dict()})
    print(
        f"dice on {index.name}: labels={result.mean['labels']:.4f} "
        f"rv={result.mean['rv']:.4f} lv={result.mean['lv']:.4f} myo={result.mean['myo']:.4f}"
    )
    return 0


def cmd_finetune(config: ExperimentConfig, args) -> int:
    out = Path(args.out)
    baseline = args.checkpoint or config.experiment.baseline_checkpoint
    if baseline is None:
        raise ConfigError(
            "finetune needs a baseline (--checkpoint or experiment.baseline_checkpoint)",
            path="experiment.baseline_checkpoint",
        )
    if config.experiment.unseen is None:
        raise ConfigError("finetune needs experiment.unseen (dataset B)", path="experiment.unseen")
    index_a = _build_dataset(config.dataset)
    index_b = _build_dataset(config.experiment.unseen)
    a_train, a_test = _split_train_val(
        index_a, config.experiment.val_fraction, config.train.seed
    )
    pipeline = replace(config.experiment.pipeline, train_mode=True, seed=config.train.seed)

    arrays, meta = load_checkpoint(baseline)
    base_model = build(ModelConfig.from_dict(meta["model_config"]))
    base_model.load_state_dict(arrays)
    infer_pipe = replace(pipeline, train_mode=False)
    baseline_evals = {
        "a_train": evaluate_model(base_model, a_train, infer_pipe),
        "a_test": evaluate_model(base_model, a_test, infer_pipe),
        "b_unseen": evaluate_model(base_model, index_b, infer_pipe),
    }

    sweeps = []
    for method in config.experiment.methods:
        spec = FinetuneSpec(
            method=method,
            n_schedule=config.experiment.n_schedule,
            baseline_checkpoint=baseline,
        )
        sweep = finetune_sweep(
            spec,
            a_train,
            a_test,
            index_b,
            config.train,
            pipeline=pipeline,
            out_dir=out / f"sweep_method{method}",
        )
        sweeps.append(sweep)
        best = sweep.points[-1]
        summary = improvement_summary(baseline_evals, best.evals)
        _write_json(out / f"improvement_method{method}.json", summary)
        print(
            f"method {method}: B dice {sweep.points[0].evals['b_unseen'].mean['labels']:.4f}"
            f" -> {best.evals['b_unseen'].mean['labels']:.4f} over n={list(spec.n_schedule)}"
        )

    rows = sweep_curves_rows(sweeps)
    with open(out / "sweep_curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "n_added", "eval_set", "label", "dice"])
        writer.writeheader()
        for row in rows:
            row = dict(row)
            row["dice"] = repr(row["dice"])
            writer.writerow(row)
    print(f"sweep curves written to {out / 'sweep_curves.csv'}")
    return 0


def cmd_report(config: ExperimentConfig, args) -> int:
    out = Path(args.out)
    produced = []
    metrics_path = out / "metrics.json"
    if metrics_path.exists():
        payload = json.loads(metrics_path.read_text())
        if "folds" in payload:
            groups: dict[str, list[float]] = {}
            for label in ("rv", "lv", "myo", "labels"):
                for split in ("train", "test"):
                    key = f"{label}/{split}"
                    groups[key] = [f[split]["mean"][label] for f in payload["folds"]]
            svg = boxplot_svg(groups, title="Cross-validated dice per label", ylabel="dice")
            (out / "crossval_boxplot.svg").write_text(svg)
            produced.append("crossval_boxplot.svg")

    curves_path = out / "sweep_curves.csv"
    if curves_path.exists():
        with open(curves_path) as fh:
            rows = list(csv.DictReader(fh))
        methods = sorted({r["method"] for r in rows})
        labels = sorted({r["label"] for r in rows})
        for method in methods:
            for label in labels:
                series: dict[str, list[tuple[float, float]]] = {}
                for r in rows:
                    if r["method"] == method and r["label"] == label:
                        series.setdefault(r["eval_set"], []).append(
                            (float(r["n_added"]), float(r["dice"]))
                        )
                if not series:
                    continue
                svg = line_chart_svg(
                    {k: sorted(v) for k, v in series.items()},
                    title=f"Finetuning method {method}: {label}",
                    xlabel="added patients",
                    ylabel="dice",
                )
                name = f"sweep_method{method}_{label}.svg"
                (out / name).write_text(svg)
                produced.append(name)

    for imp_path in sorted(out.glob("improvement_method*.json")):
        deltas = json.loads(imp_path.read_text())
        svg = bar_chart_svg(
            {es: vals for es, vals in deltas.items()},
            title=f"Dice change ({imp_path.stem.replace('improvement_', '')})",
            ylabel="dice delta",
        )
        name = imp_path.stem + ".svg"
        (out / name).write_text(svg)
        produced.append(name)

    if not produced:
        print(f"warning: no renderable results found under {out}", file=sys.stderr)
        return 0
    print(f"rendered: {', '.join(produced)}")
    return 0


def cmd_gradcheck(config: ExperimentConfig, args) -> int:
    results = full_suite()
    failed = []
    for name, err in results.items():
        status = "PASS" if err < TOLERANCE else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"{name:40s} {err:12.3e}  {status}")
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 0 if not failed else 1


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiseg",
        description="2D U-Net cardiac segmentation toolkit with generalization-gap experiments",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="experiment configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override every seed")
    parser.add_argument("--out", default="cardiseg_out", help="output directory")
    parser.add_argument("--precision", choices=("f32", "f64"), default=None)
    parser.add_argument("--checkpoint", default=None, help="model checkpoint (eval/finetune)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        config = _apply_overrides(config, args)
        config.validate()
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CardisegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
