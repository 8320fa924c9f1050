"""Experiment orchestration: cross-validation, gap reports, finetuning.

``run_crossval`` trains one model per fold and evaluates each on its
own train and test split.  ``evaluate_on_dataset`` applies a frozen
model to a whole (typically unseen) dataset.  ``gap_report`` assembles
the mean/sd table over folds plus the train-vs-test and train-vs-unseen
differences.  ``finetune_sweep`` implements the three gap-closing
protocols, each over an increasing, nested number of added patients
from the second cohort:

  method 1: retrain from scratch on A-train + n B patients
  method 2: continue the baseline model on A-train + n B patients
  method 3: continue the baseline model on n B patients only

Patients used for finetuning are always excluded from the B evaluation
set of that run.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetIndex, FoldAssignment, random_kfold, stratified_kfold
from .errors import ConfigError
from .evaluation import EvalResult, evaluate_model
from .preprocess import PipelineConfig
from .rng import derive_seed, pcg
from .training import FitResult, TrainConfig, fit
from .unet import ModelConfig, UNet, build

__all__ = [
    "FoldOutcome",
    "CrossvalResult",
    "GapReport",
    "FinetuneSpec",
    "SweepPoint",
    "SweepResult",
    "run_crossval",
    "evaluate_on_dataset",
    "gap_report",
    "finetune_sweep",
    "improvement_summary",
    "default_n_schedule",
]

GAP_LABELS = ("labels", "rv", "lv", "myo")
EVAL_SETS = ("a_train", "a_test", "b_unseen")


@dataclass
class FoldOutcome:
    fold: int
    fit: FitResult
    train_eval: EvalResult
    test_eval: EvalResult
    checkpoint_path: str | None = None


@dataclass
class CrossvalResult:
    k: int
    folds: list[FoldOutcome]
    assignment: FoldAssignment

    def fold_means(self, split: str, label: str) -> list[float]:
        evals = [f.train_eval if split == "train" else f.test_eval for f in self.folds]
        return [e.mean[label] for e in evals]


def _fit_fold(model, train_idx, test_idx, train_cfg, pipeline, out_dir):
    result = fit(model, train_idx, test_idx, train_cfg, pipeline=pipeline, out_dir=out_dir)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    infer_pipe = replace(pipeline, train_mode=False) if pipeline is not None else None
    train_eval = evaluate_model(model, train_idx, infer_pipe)
    test_eval = evaluate_model(model, test_idx, infer_pipe)
    return result, train_eval, test_eval


def run_crossval(
    index: DatasetIndex,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 4,
    strategy: str = "auto",
    pipeline: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
) -> CrossvalResult:
    """Train and evaluate one model per fold.

    Stratified splitting is used when the index carries more than one
    pathology tag (strategy "auto"), random splitting otherwise.
    """
    if strategy not in ("auto", "stratified", "random"):
        raise ConfigError(f"unknown split strategy {strategy!r}")
    if strategy == "auto":
        strategy = "stratified" if len(set(index.pathology_of().values())) > 1 else "random"
    splitter = stratified_kfold if strategy == "stratified" else random_kfold
    assignment = splitter(index, k=k, seed=train_config.seed)

    empty = [f for f in range(k) if not assignment.test_patients(f)]
    if empty:
        raise ConfigError(
            f"folds {empty} have no test patients ({len(index.patients())} patients "
            f"over k={k} {strategy} folds); reduce k or add patients"
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    folds = []
    for fold in range(k):
        train_idx = index.subset(assignment.train_patients(fold))
        test_idx = index.subset(assignment.test_patients(fold))
        model = build(model_config)
        fold_dir = out_dir / f"fold_{fold}" if out_dir is not None else None
        result, train_eval, test_eval = _fit_fold(
            model, train_idx, test_idx, train_config, pipeline, fold_dir
        )
        ckpt = str(fold_dir / "checkpoint.bin") if fold_dir is not None else None
        outcome = FoldOutcome(fold, result, train_eval, test_eval, ckpt)
        folds.append(outcome)
        if fold_dir is not None:
            _write_metrics(
                fold_dir / "metrics.json",
                {
                    "fold": fold,
                    "train_patients": sorted(train_idx.patients()),
                    "test_patients": sorted(test_idx.patients()),
                    "epochs_trained": len(result.history),
                    "best_val_loss": result.best_val_loss,
                    "train": train_eval.to_dict(),
                    "test": test_eval.to_dict(),
                },
            )
    return CrossvalResult(k=k, folds=folds, assignment=assignment)


def evaluate_on_dataset(
    model: UNet, index: DatasetIndex, pipeline: PipelineConfig | None = None
) -> EvalResult:
    """Per-label dice aggregates of a frozen model over a dataset."""
    return evaluate_model(model, index, pipeline)


@dataclass
class GapReport:
    """Means/sds over folds per (evaluation set, label), plus gaps.

    Rows mirror the cross-dataset dice table: the training rows and test
    rows come from the k fold models on their own splits, the unseen
    rows from the same models applied to the other dataset.  Gaps are
    train minus test and train minus unseen, computed from the stored
    means at full precision.
    """

    k: int
    training_dataset: str
    evaluation_datasets: dict[str, str]  # modality -> dataset name
    mean: dict[str, dict[str, float]]  # modality -> label -> mean over folds
    sd: dict[str, dict[str, float]]
    gaps: dict[str, dict[str, float]]  # "test"/"unseen" -> label -> gap

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "k": self.k,
            "training_dataset": self.training_dataset,
            "evaluation_datasets": dict(sorted(self.evaluation_datasets.items())),
            "mean": {m: dict(sorted(v.items())) for m, v in sorted(self.mean.items())},
            "sd": {m: dict(sorted(v.items())) for m, v in sorted(self.sd.items())},
            "gaps": {m: dict(sorted(v.items())) for m, v in sorted(self.gaps.items())},
        }


def _stats(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def gap_report(
    crossval: CrossvalResult,
    unseen_evals: list[EvalResult],
    training_dataset: str = "A",
    unseen_dataset: str = "B",
) -> GapReport:
    """Assemble the dice table and generalization gaps from fold results.

    ``unseen_evals`` holds one evaluation per fold model on the unseen
    dataset, in fold order.
    """
    if len(unseen_evals) != len(crossval.folds):
        raise ConfigError(
            f"need one unseen evaluation per fold: {len(unseen_evals)} != {len(crossval.folds)}"
        )
    mean: dict[str, dict[str, float]] = {}
    sd: dict[str, dict[str, float]] = {}
    per_modality = {
        "train": [f.train_eval for f in crossval.folds],
        "test": [f.test_eval for f in crossval.folds],
        "unseen": list(unseen_evals),
    }
    for modality, evals in per_modality.items():
        mean[modality] = {}
        sd[modality] = {}
        for label in GAP_LABELS:
            m, s = _stats([e.mean[label] for e in evals])
            mean[modality][label] = m
            sd[modality][label] = s
    gaps = {
        "test": {lb: mean["train"][lb] - mean["test"][lb] for lb in GAP_LABELS},
        "unseen": {lb: mean["train"][lb] - mean["unseen"][lb] for lb in GAP_LABELS},
    }
    return GapReport(
        k=crossval.k,
        training_dataset=training_dataset,
        evaluation_datasets={
            "train": training_dataset,
            "test": training_dataset,
            "unseen": unseen_dataset,
        },
        mean=mean,
        sd=sd,
        gaps=gaps,
    )


@dataclass(frozen=True)
class FinetuneSpec:
    """One gap-closing protocol over an increasing added-patient count."""

    method: int  # 1, 2 or 3
    n_schedule: tuple[int, ...] = (5, 21, 37, 53, 69, 85, 101, 117, 133, 150)
    baseline_checkpoint: str | None = None

    def validate(self, b_patient_count: int | None = None) -> None:
        if self.method not in (1, 2, 3):
            raise ConfigError(f"method must be 1, 2 or 3, got {self.method}")
        if not self.n_schedule:
            raise ConfigError("n_schedule must not be empty")
        if any(b <= a for a, b in zip(self.n_schedule, self.n_schedule[1:])) or any(
            n < 1 for n in self.n_schedule
        ):
            raise ConfigError("n_schedule must be strictly increasing positive integers")
        if self.method in (2, 3) and self.baseline_checkpoint is None:
            raise ConfigError(f"method {self.method} needs a baseline checkpoint")
        if b_patient_count is not None and self.n_schedule[-1] > b_patient_count:
            raise ConfigError(
                f"n={self.n_schedule[-1]} exceeds the {b_patient_count} available patients"
            )


def default_n_schedule(lo: int = 5, hi: int = 150, points: int = 10) -> tuple[int, ...]:
    """Evenly spaced integer schedule over [lo, hi] (floored interior)."""
    return tuple(int(v) for v in np.linspace(lo, hi, points))


@dataclass
class SweepPoint:
    method: int
    n_added: int
    added_patients: list[str]
    evals: dict[str, EvalResult]  # keys: a_train, a_test, b_unseen
    checkpoint_path: str | None = None


@dataclass
class SweepResult:
    method: int
    points: list[SweepPoint]

    def curve(self, eval_set: str, label: str) -> list[tuple[int, float]]:
        return [(p.n_added, p.evals[eval_set].mean[label]) for p in self.points]


def _load_baseline(spec: FinetuneSpec) -> tuple[ModelConfig, dict]:
    arrays, meta = load_checkpoint(spec.baseline_checkpoint)
    if "model_config" not in meta:
        raise ConfigError(f"{spec.baseline_checkpoint}: checkpoint lacks model_config meta")
    return ModelConfig.from_dict(meta["model_config"]), arrays


def finetune_sweep(
    spec: FinetuneSpec,
    a_train: DatasetIndex,
    a_test: DatasetIndex,
    b_index: DatasetIndex,
    train_config: TrainConfig,
    pipeline: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
) -> SweepResult:
    """Run one finetuning protocol across the n schedule.

    Added B patients are drawn from a single seeded shuffle, so larger
    n values are supersets of smaller ones and curves differ only by
    data quantity.  Every evaluation on B excludes the added patients.
    """
    b_patients = sorted(b_index.patients())
    spec.validate(b_patient_count=len(b_patients))
    model_config, baseline_arrays = _load_baseline(spec)

    order = [b_patients[i] for i in pcg(derive_seed(train_config.seed, "sweep")).permutation(len(b_patients))]
    out_dir = Path(out_dir) if out_dir is not None else None
    points = []
    for n in spec.n_schedule:
        added = sorted(order[:n])
        b_eval_idx = b_index.subset([p for p in b_patients if p not in set(added)])
        added_idx = b_index.subset(added)

        if spec.method == 1:
            cfg_dict = model_config.to_dict()
            cfg_dict["seed"] = derive_seed(model_config.seed, "retrain", n)
            model = build(ModelConfig.from_dict(cfg_dict))
        else:
            model = build(model_config)
            model.load_state_dict(baseline_arrays)

        if spec.method in (1, 2):
            train_idx = DatasetIndex(
                name=f"{a_train.name}+{n}B",
                samples=list(a_train.samples) + list(added_idx.samples),
                provenance=a_train.provenance,
            )
        else:
            train_idx = added_idx

        run_dir = out_dir / f"n_{n:03d}" if out_dir is not None else None
        # evaluate the model as finetuned (final state): selecting the
        # best-A-validation epoch would systematically discard B gains
        result = fit(model, train_idx, a_test, train_config, pipeline=pipeline, out_dir=run_dir)

        infer_pipe = replace(pipeline, train_mode=False) if pipeline is not None else None
        evals = {
            "a_train": evaluate_model(model, a_train, infer_pipe),
            "a_test": evaluate_model(model, a_test, infer_pipe),
            "b_unseen": evaluate_model(model, b_eval_idx, infer_pipe),
        }
        point = SweepPoint(
            method=spec.method,
            n_added=n,
            added_patients=added,
            evals=evals,
            checkpoint_path=str(run_dir / "checkpoint.bin") if run_dir is not None else None,
        )
        points.append(point)
        if run_dir is not None:
            _write_metrics(
                run_dir / "metrics.json",
                {
                    "method": spec.method,
                    "n_added": n,
                    "added_patients": added,
                    "epochs_trained": len(result.history),
                    **{k: e.to_dict() for k, e in evals.items()},
                },
            )
    return SweepResult(method=spec.method, points=points)


def improvement_summary(
    baseline: dict[str, EvalResult], finetuned: dict[str, EvalResult]
) -> dict[str, dict[str, float]]:
    """Dice deltas (finetuned - baseline) per evaluation set and label."""
    out: dict[str, dict[str, float]] = {}
    for eval_set in baseline:
        if eval_set not in finetuned:
            continue
        out[eval_set] = {
            label: finetuned[eval_set].mean[label] - baseline[eval_set].mean[label]
            for label in GAP_LABELS
        }
    return out


def sweep_curves_rows(sweeps: list[SweepResult]) -> list[dict]:
    """Flatten sweeps into CSV-ready rows (method, n, eval set, label, dice)."""
    rows = []
    for sweep in sweeps:
        for point in sweep.points:
            for eval_set in EVAL_SETS:
                for label in GAP_LABELS:
                    rows.append(
                        {
                            "method": sweep.method,
                            "n_added": point.n_added,
                            "eval_set": eval_set,
                            "label": label,
                            "dice": point.evals[eval_set].mean[label],
                        }
                    )
    return rows


def _write_metrics(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_model_checkpoint(path, model: UNet, extra_meta: dict | None = None) -> None:
    meta = {"model_config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, model.state_dict(), meta=meta)
