"""Acceptance gate: every criterion checked at its stated tolerance.

Each test prints one PASS/FAIL line (visible with `pytest -s`, or in the
captured output on failure).  Training-based criteria use fixed seeds;
the toolkit is deterministic, so these checks are reproducible bit for
bit on a given platform.
"""

import json
import time

import numpy as np
import pytest

from cardiseg.autodiff import Tensor
from cardiseg.cli import main as cli_main
from cardiseg.data import DatasetIndex, PhantomSpec, VolumeSample, synth_generate
from cardiseg.data import random_kfold, stratified_kfold
from cardiseg.evaluation import EvalResult, evaluate_model
from cardiseg.experiments import (
    CrossvalResult,
    FinetuneSpec,
    FoldOutcome,
    finetune_sweep,
    gap_report,
    save_model_checkpoint,
)
from cardiseg.losses import LossSpec, bce, dsc_class, jdl, sdl, wce
from cardiseg.preprocess import PipelineConfig, apply_pipeline, grid_distort
from cardiseg.rng import pcg
from cardiseg.training import TrainConfig, fit
from cardiseg.unet import ModelConfig, build
from cardiseg.verify import TOLERANCE, full_suite


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- shared fixtures -----------------------------------------------------------

DESK_DROPOUT = (0.05, 0.05, 0.1, 0.1, 0.1)
GAP_DROPOUT = (0.0, 0.0, 0.05, 0.05, 0.05)


@pytest.fixture(scope="module")
def desk_dataset_a():
    """16 A patients at mixed sizes (criterion 5)."""
    return synth_generate(
        PhantomSpec(distribution="A", n_patients=16, phases=("ED", "ES"), slices_per_volume=4),
        seed=101,
    )


@pytest.fixture(scope="module")
def gap_datasets():
    """24 A + 20 B patients, crop-path sizes (criteria 6 and 7)."""
    a = synth_generate(
        PhantomSpec(
            distribution="A", n_patients=24, phases=("ED", "ES"),
            slices_per_volume=4, size_range=(64, 88),
        ),
        seed=101,
    )
    b = synth_generate(
        PhantomSpec(
            distribution="B", n_patients=20, phases=("ED", "ES"),
            slices_per_volume=4, size_range=(64, 88),
        ),
        seed=201,
    )
    patients = a.patients()
    return {"a_train": a.subset(patients[:16]), "a_test": a.subset(patients[16:]), "b": b}


@pytest.fixture(scope="module")
def baseline(gap_datasets, tmp_path_factory):
    """BCE baseline trained on A-train, shared by criteria 6 and 7."""
    model = build(
        ModelConfig(
            input_size=(64, 64), base_channels=8, dropout_schedule=GAP_DROPOUT, seed=2
        )
    )
    config = TrainConfig(batch_size=8, max_epochs=30, seed=3, loss=LossSpec("BCE"))
    fit(model, gap_datasets["a_train"], gap_datasets["a_test"], config)
    ckpt = tmp_path_factory.mktemp("baseline") / "baseline.bin"
    save_model_checkpoint(ckpt, model)
    evals = {
        "a_train": evaluate_model(model, gap_datasets["a_train"]),
        "a_test": evaluate_model(model, gap_datasets["a_test"]),
        "b": evaluate_model(model, gap_datasets["b"]),
    }
    return {"model": model, "checkpoint": str(ckpt), "evals": evals}


# -- criterion 1: gradient fidelity ---------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.time()
    results = full_suite(include_network=True)
    elapsed = time.time() - start
    worst = max(results.values())
    failed = [k for k, v in results.items() if v >= TOLERANCE]
    _report(
        1,
        not failed and elapsed < 120.0,
        f"{len(results)} checks, worst rel err {worst:.2e} (< {TOLERANCE:g}), "
        f"runtime {elapsed:.1f}s (< 120s)",
    )


# -- criterion 2: loss identities ------------------------------------------------


def test_criterion_2_loss_identities():
    rng = pcg(0)
    pred = rng.uniform(0.02, 0.98, (2, 3, 6, 6))
    truth = (rng.random((2, 3, 6, 6)) < 0.4).astype(np.float64)
    wce_val = wce(Tensor(pred), truth, [1.0, 1.0, 1.0]).item()
    bce_val = bce(Tensor(pred), truth).item()

    perfect = np.zeros((1, 4, 4, 4))
    perfect[0, 0] = 1.0
    perfect[0, 1, 1, 1] = 1.0
    perfect[0, 0, 1, 1] = 0.0
    sdl_perfect = sdl(Tensor(perfect), perfect).item()

    g = np.array([1.0, 1.0, 0.0, 0.0])
    p = np.array([1.0, 0.0, 0.0, 1.0])
    ident = dsc_class(Tensor(g), g).item()
    hand_dice = dsc_class(Tensor(p), g, smooth=1.0).item()
    hand_jdl = jdl(Tensor(p), g, smooth=1.0).item()

    checks = {
        "wce(1)==bce": wce_val == bce_val,
        "sdl(perfect)==0": sdl_perfect == 0.0,
        "dsc(identical)==1": ident == 1.0,
        "dsc hand pair == 0.6": abs(hand_dice - 0.6) < 1e-9,
        "jdl hand pair == 0.5": abs(hand_jdl - 0.5) < 1e-9,
    }
    _report(2, all(checks.values()), ", ".join(f"{k}:{v}" for k, v in checks.items()))


# -- criterion 3: splitting -------------------------------------------------------


def _flat_index(n, pathologies):
    samples = [
        VolumeSample(
            patient_id=f"p{i:03d}",
            pathology=pathologies[i % len(pathologies)],
            phase="ED",
            image=np.zeros((1, 4, 4), dtype=np.float32),
            mask=np.zeros((1, 4, 4), dtype=np.uint8),
            spacing=(1.0, 1.0, 1.0),
        )
        for i in range(n)
    ]
    return DatasetIndex(name="flat", samples=samples)


def test_criterion_3_splitting():
    strat_index = _flat_index(100, ("NOR", "MINF", "DCM", "HCM", "ARV"))
    folds = stratified_kfold(strat_index, k=4, seed=5)
    pathology = strat_index.pathology_of()
    strat_ok = True
    for fold in range(4):
        test = folds.test_patients(fold)
        train = folds.train_patients(fold)
        for tag in ("NOR", "MINF", "DCM", "HCM", "ARV"):
            strat_ok &= sum(pathology[p] == tag for p in test) == 5
            strat_ok &= sum(pathology[p] == tag for p in train) == 15

    rand_index = _flat_index(203, ("TOF",))
    rfolds = random_kfold(rand_index, k=4, seed=5)
    sizes = sorted(len(rfolds.test_patients(f)) for f in range(4))
    rand_ok = sizes == [50, 51, 51, 51]
    _report(
        3,
        strat_ok and rand_ok,
        f"stratified 5x20 -> 15 train/5 test per pathology per fold: {strat_ok}; "
        f"random 203 -> fold sizes {sizes}",
    )


# -- criterion 4: pipeline invariants (>= 1000 random cases) -----------------------


def test_criterion_4_pipeline_invariants():
    rng = pcg(4242)
    cases = 0
    for i in range(1000):
        h = int(rng.integers(33, 110))
        w = int(rng.integers(33, 110))
        scale = float(rng.uniform(10, 4000))
        img = rng.uniform(0, scale, (h, w))
        mask = rng.integers(0, 4, (h, w)).astype(np.uint8)
        cfg = PipelineConfig(
            target_size=(48, 48),
            train_mode=bool(rng.random() < 0.6),
            distortion_probability=float(rng.random()),
            distortion_steps=int(rng.integers(2, 12)),
            distortion_limit=float(rng.uniform(0.05, 0.45)),
        )
        out_img, out_mask = apply_pipeline(img, mask, cfg, seed=i)
        assert out_img.shape == (48, 48)
        assert out_mask.shape == (4, 48, 48)
        assert 0.0 <= out_img.min() and out_img.max() <= 1.0
        assert np.array_equal(out_mask.sum(axis=0), np.ones((48, 48), dtype=np.float32))
        present = {c for c in range(4) if out_mask[c].any()}
        assert present <= set(np.unique(mask))
        if i % 10 == 0:
            # probability-0 distortion is the identity
            di, dm = grid_distort(img, mask, probability=0.0, seed=i)
            assert np.array_equal(di, img) and np.array_equal(dm, mask)
            # full train pipeline deterministic under seed
            again = apply_pipeline(img, mask, cfg, seed=i)
            assert np.array_equal(again[0], out_img) and np.array_equal(again[1], out_mask)
        cases += 1
    _report(4, cases >= 1000, f"{cases} random cases: size/range/one-hot/label-set/determinism")


# -- criterion 5: desk-scale training, all four losses ------------------------------


@pytest.mark.parametrize(
    "loss_spec",
    [
        LossSpec("BCE"),
        LossSpec("WCE", class_weights=(1.0, 2.0, 2.0, 2.0)),
        LossSpec("JDL"),
        LossSpec("SDL"),
    ],
    ids=lambda s: s.kind,
)
def test_criterion_5_desk_scale_training(desk_dataset_a, loss_spec):
    patients = desk_dataset_a.patients()
    train_idx = desk_dataset_a.subset(patients[:12])
    val_idx = desk_dataset_a.subset(patients[12:])
    model = build(
        ModelConfig(
            input_size=(64, 64), base_channels=8, dropout_schedule=DESK_DROPOUT, seed=0
        )
    )
    config = TrainConfig(
        batch_size=8, max_epochs=60, seed=3, loss=loss_spec, target_dsc=0.85
    )
    start = time.time()
    result = fit(model, train_idx, val_idx, config)
    elapsed = time.time() - start
    best = max(h.dsc_labels for h in result.history)
    _report(
        5,
        best >= 0.85 and len(result.history) <= 60 and elapsed < 1800.0,
        f"{loss_spec.kind}: val DSC_labels {best:.4f} (>= 0.85) in "
        f"{len(result.history)} epochs (<= 60), {elapsed:.0f}s (< 1800s)",
    )


# -- criterion 6: generalization-gap shape --------------------------------------------


def test_criterion_6_generalization_gap(baseline):
    ev = baseline["evals"]
    tr, te, b = (ev[k].mean["labels"] for k in ("a_train", "a_test", "b"))
    gaps = {lb: ev["a_train"].mean[lb] - ev["b"].mean[lb] for lb in ("rv", "lv", "myo")}
    ordering = tr >= te >= b
    rv_largest = gaps["rv"] > max(gaps["lv"], gaps["myo"])
    _report(
        6,
        ordering and rv_largest,
        f"dice A-train {tr:.4f} >= A-test {te:.4f} >= B {b:.4f}: {ordering}; "
        f"gaps rv={gaps['rv']:.4f} lv={gaps['lv']:.4f} myo={gaps['myo']:.4f}, "
        f"rv largest: {rv_largest}",
    )


# -- criterion 7: finetuning shape ------------------------------------------------------


@pytest.mark.parametrize("method,epochs", [(1, 18), (2, 8), (3, 6)])
def test_criterion_7_finetuning_shape(gap_datasets, baseline, method, epochs):
    spec = FinetuneSpec(method=method, n_schedule=(2, 12), baseline_checkpoint=baseline["checkpoint"])
    config = TrainConfig(batch_size=8, max_epochs=epochs, seed=7, loss=LossSpec("BCE"))
    sweep = finetune_sweep(
        spec, gap_datasets["a_train"], gap_datasets["a_test"], gap_datasets["b"], config
    )
    b_lo = sweep.points[0].evals["b_unseen"].mean["labels"]
    b_hi = sweep.points[1].evals["b_unseen"].mean["labels"]
    a_test_hi = sweep.points[1].evals["a_test"].mean["labels"]
    a_test_base = baseline["evals"]["a_test"].mean["labels"]
    rises = b_hi > b_lo
    stable = abs(a_test_hi - a_test_base) <= 0.05
    _report(
        7,
        rises and stable,
        f"method {method}: dice-on-B {b_lo:.4f} -> {b_hi:.4f} (rising: {rises}); "
        f"A-test {a_test_hi:.4f} vs baseline {a_test_base:.4f} (within 0.05: {stable})",
    )


# -- criterion 8: report schema from mocked metrics ----------------------------------


def _mock_eval(labels, rv, lv, myo):
    mean = {"labels": labels, "rv": rv, "lv": lv, "myo": myo}
    return EvalResult(per_volume={}, mean=mean, sd={k: 0.0 for k in mean}, n_volumes=4)


def test_criterion_8_gap_schema_from_mocked_metrics():
    # the absolute cross-dataset table values are NOT reproducible here
    # (non-public cohort, full-scale compute); the report schema and its
    # arithmetic are checked exactly on mocked fold metrics instead
    folds = [
        FoldOutcome(
            fold=i,
            fit=None,
            train_eval=_mock_eval(0.917, 0.916, 0.951, 0.883),
            test_eval=_mock_eval(0.899, 0.889, 0.941, 0.866),
        )
        for i in range(4)
    ]
    crossval = CrossvalResult(k=4, folds=folds, assignment=None)
    unseen = [_mock_eval(0.781, 0.751, 0.879, 0.719) for _ in range(4)]
    report = gap_report(crossval, unseen)
    exact = all(
        report.gaps[m][lb] == report.mean["train"][lb] - report.mean[m][lb]
        for m in ("test", "unseen")
        for lb in ("labels", "rv", "lv", "myo")
    )
    labels_gap = report.gaps["unseen"]["labels"]
    rv_gap = report.gaps["unseen"]["rv"]
    payload_a = json.dumps(gap_report(crossval, unseen).to_dict(), sort_keys=True)
    payload_b = json.dumps(gap_report(crossval, unseen).to_dict(), sort_keys=True)
    _report(
        8,
        exact
        and abs(labels_gap - 0.136) < 1e-9
        and abs(rv_gap - 0.165) < 1e-9
        and payload_a == payload_b,
        f"0.917 - 0.781 = {labels_gap:.3f} (=0.136), rv gap {rv_gap:.3f} (=0.165), "
        f"gap==mean-subtraction exact: {exact}, schema byte-stable: {payload_a == payload_b}",
    )


# -- criterion 9: end-to-end determinism -----------------------------------------------


def test_criterion_9_crossval_determinism(tmp_path):
    config = {
        "dataset": {"kind": "synthetic", "n_patients": 6, "phases": ["ED"], "slices_per_volume": 2},
        "model": {"input_size": [32, 32], "base_channels": 2, "dropout_schedule": [0.1, 0.1, 0.2, 0.2, 0.2]},
        "train": {"batch_size": 4, "max_epochs": 2, "seed": 11},
        "experiment": {"k": 4, "split": "random"},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    assert cli_main(["crossval", "--config", str(cfg_path), "--out", str(tmp_path / "r1")]) == 0
    assert cli_main(["crossval", "--config", str(cfg_path), "--out", str(tmp_path / "r2")]) == 0
    a = (tmp_path / "r1" / "metrics.json").read_bytes()
    b = (tmp_path / "r2" / "metrics.json").read_bytes()
    fold_a = (tmp_path / "r1" / "fold_0" / "metrics.json").read_bytes()
    fold_b = (tmp_path / "r2" / "fold_0" / "metrics.json").read_bytes()
    _report(
        9,
        a == b and fold_a == fold_b,
        f"two crossval runs: aggregate metrics.json identical ({len(a)} bytes), "
        f"fold metrics identical",
    )
