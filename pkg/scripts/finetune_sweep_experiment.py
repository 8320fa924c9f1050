#!/usr/bin/env python3
"""Desk-scale finetuning sweep: three gap-closing methods on phantoms.

Trains a baseline on cohort A, then runs the three finetuning protocols
over an increasing number of added B patients and plots the dice curves
per label (baseline-train, held-out A, unseen B).

    python scripts/finetune_sweep_experiment.py --out runs/sweep --seed 7
"""

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cardiseg.data import PhantomSpec, synth_generate
from cardiseg.evaluation import evaluate_model
from cardiseg.experiments import (
    FinetuneSpec,
    finetune_sweep,
    improvement_summary,
    save_model_checkpoint,
    sweep_curves_rows,
)
from cardiseg.losses import LossSpec
from cardiseg.preprocess import PipelineConfig
from cardiseg.svgplot import bar_chart_svg, line_chart_svg
from cardiseg.training import TrainConfig, fit
from cardiseg.unet import ModelConfig, build


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/sweep")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--b-patients", type=int, default=20)
    parser.add_argument("--n-schedule", type=int, nargs="+", default=[2, 4, 8, 12])
    parser.add_argument("--baseline-epochs", type=int, default=25)
    parser.add_argument("--finetune-epochs", type=int, default=10)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = PhantomSpec(distribution="A", n_patients=24, size_range=(64, 88))
    index_a = synth_generate(spec, seed=args.seed)
    index_b = synth_generate(
        replace(spec, distribution="B", n_patients=args.b_patients), seed=args.seed + 100
    )
    pa = index_a.patients()
    a_train, a_test = index_a.subset(pa[:16]), index_a.subset(pa[16:])

    model_cfg = ModelConfig(
        input_size=(64, 64),
        base_channels=8,
        dropout_schedule=(0.0, 0.0, 0.05, 0.05, 0.05),
        seed=args.seed,
    )
    pipeline = PipelineConfig(target_size=model_cfg.input_size, train_mode=True, seed=args.seed)
    base_cfg = TrainConfig(
        batch_size=8, max_epochs=args.baseline_epochs, seed=args.seed, loss=LossSpec("BCE")
    )

    print("training the A baseline ...")
    model = build(model_cfg)
    fit(model, a_train, a_test, base_cfg, pipeline=pipeline, out_dir=out / "baseline")
    ckpt = out / "baseline" / "final_baseline.bin"
    save_model_checkpoint(ckpt, model)
    infer_pipe = replace(pipeline, train_mode=False)
    baseline_evals = {
        "a_train": evaluate_model(model, a_train, infer_pipe),
        "a_test": evaluate_model(model, a_test, infer_pipe),
        "b_unseen": evaluate_model(model, index_b, infer_pipe),
    }
    print(
        f"baseline dice: A-train {baseline_evals['a_train'].mean['labels']:.3f} "
        f"A-test {baseline_evals['a_test'].mean['labels']:.3f} "
        f"B {baseline_evals['b_unseen'].mean['labels']:.3f}"
    )

    ft_cfg = replace(base_cfg, max_epochs=args.finetune_epochs)
    sweeps = []
    for method in (1, 2, 3):
        print(f"running finetuning method {method} ...")
        spec_ft = FinetuneSpec(
            method=method, n_schedule=tuple(args.n_schedule), baseline_checkpoint=str(ckpt)
        )
        sweep = finetune_sweep(
            spec_ft, a_train, a_test, index_b, ft_cfg, pipeline=pipeline,
            out_dir=out / f"sweep_method{method}",
        )
        sweeps.append(sweep)
        deltas = improvement_summary(baseline_evals, sweep.points[-1].evals)
        (out / f"improvement_method{method}.json").write_text(
            json.dumps(deltas, indent=2, sort_keys=True) + "\n"
        )
        (out / f"improvement_method{method}.svg").write_text(
            bar_chart_svg(deltas, title=f"Dice change, method {method} (max n)")
        )
        for label in ("rv", "lv", "myo", "labels"):
            series = {es: sweep.curve(es, label) for es in ("a_train", "a_test", "b_unseen")}
            (out / f"sweep_method{method}_{label}.svg").write_text(
                line_chart_svg(
                    series,
                    title=f"Method {method}: {label}",
                    xlabel="added B patients",
                )
            )

    with open(out / "sweep_curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "n_added", "eval_set", "label", "dice"])
        writer.writeheader()
        for row in sweep_curves_rows(sweeps):
            writer.writerow({**row, "dice": repr(row["dice"])})
    print(f"results in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
