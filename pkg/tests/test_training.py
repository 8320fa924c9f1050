import csv

import numpy as np
import pytest

from cardiseg.autodiff import Tensor
from cardiseg.data import PhantomSpec, synth_generate
from cardiseg.errors import ConfigError, TrainingAbort
from cardiseg.losses import LossSpec
from cardiseg.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainState,
    adam_step,
    early_stop_check,
    fit,
    lr_schedule_update,
)
from cardiseg.unet import ModelConfig, build


def tiny_dataset(seed=11, n=6):
    return synth_generate(
        PhantomSpec(
            distribution="A",
            n_patients=n,
            phases=("ED",),
            slices_per_volume=2,
            size_range=(40, 56),
        ),
        seed=seed,
    )


def tiny_model(seed=0):
    return build(
        ModelConfig(
            input_size=(32, 32),
            base_channels=2,
            dropout_schedule=(0.0, 0.0, 0.0, 0.0, 0.0),
            seed=seed,
        )
    )


def tiny_train_config(**kw):
    base = dict(batch_size=4, max_epochs=2, seed=5, loss=LossSpec("SDL"))
    base.update(kw)
    return TrainConfig(**base)


# -- adam -------------------------------------------------------------------


def test_adam_zero_lr_keeps_params():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    state = TrainState(current_lr=0.0)
    adam_step({"p": p}, {"p": np.array([0.5, 0.5], dtype=np.float32)}, state, lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    # bias correction makes the first update lr * g/(|g| + eps), i.e. ~lr
    lr, g = 1e-3, 0.37
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = TrainState(current_lr=lr)
    adam_step({"p": p}, {"p": np.array([g])}, state, lr=lr)
    update = 2.0 - float(p.data[0])
    assert update == pytest.approx(lr * g / (g + 1e-8), rel=1e-9)
    assert update == pytest.approx(lr, rel=1e-6)


def test_adam_deterministic_trajectories():
    def run():
        p = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
        state = TrainState(current_lr=1e-2)
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = rng.standard_normal(3).astype(np.float32)
            adam_step({"p": p}, {"p": g}, state, lr=1e-2)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_aborts_on_non_finite_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = TrainState(current_lr=1e-3)
    with pytest.raises(TrainingAbort, match="p"):
        adam_step({"p": p}, {"p": np.array([np.inf])}, state, lr=1e-3)


# -- lr schedule --------------------------------------------------------------


def test_lr_drops_after_sixth_stale_epoch():
    cfg = TrainConfig(lr_patience=5)
    state = TrainState(current_lr=1e-3)
    lrs = []
    for _ in range(7):
        lr_schedule_update(state, 1.0, cfg)
        lrs.append(state.current_lr)
    # first call sets the best; the 6th non-improving epoch triggers the halving
    assert lrs == [1e-3] * 6 + [5e-4]


def test_lr_never_changes_when_improving():
    cfg = TrainConfig()
    state = TrainState(current_lr=1e-3)
    for loss in np.linspace(1.0, 0.1, 20):
        lr_schedule_update(state, float(loss), cfg)
    assert state.current_lr == 1e-3


def test_lr_clamps_at_min():
    cfg = TrainConfig(lr_patience=1, min_lr=1e-8)
    state = TrainState(current_lr=1e-3)
    for _ in range(200):
        lr_schedule_update(state, 1.0, cfg)
    assert state.current_lr == 1e-8


def test_min_delta_defines_improvement():
    cfg = TrainConfig(min_delta=1e-4)
    state = TrainState(current_lr=1e-3)
    lr_schedule_update(state, 1.0, cfg)
    lr_schedule_update(state, 1.0 - 5e-5, cfg)  # below min_delta: not an improvement
    assert state.epochs_since_improvement == 1
    lr_schedule_update(state, 0.9, cfg)
    assert state.epochs_since_improvement == 0


# -- early stopping ------------------------------------------------------------


def test_early_stop_after_eleven_flat_epochs():
    cfg = TrainConfig(early_stop_patience=10)
    state = TrainState(current_lr=1e-3)
    lr_schedule_update(state, 0.5, cfg)  # initial improvement
    stops = []
    for _ in range(11):
        lr_schedule_update(state, 0.5, cfg)
        stops.append(early_stop_check(state, cfg))
    assert stops == [False] * 10 + [True]


def test_early_stop_never_fires_with_improvement():
    cfg = TrainConfig(early_stop_patience=10)
    state = TrainState(current_lr=1e-3)
    for loss in np.linspace(1.0, 0.0, 30):
        lr_schedule_update(state, float(loss), cfg)
        assert not early_stop_check(state, cfg)


def test_improvement_resets_counter():
    cfg = TrainConfig(early_stop_patience=10)
    state = TrainState(current_lr=1e-3)
    lr_schedule_update(state, 1.0, cfg)
    for _ in range(9):
        lr_schedule_update(state, 1.0, cfg)
    assert state.epochs_since_improvement == 9
    lr_schedule_update(state, 0.5, cfg)
    assert state.epochs_since_improvement == 0


# -- fit -------------------------------------------------------------------------


def test_fit_zero_epochs_returns_empty_history():
    idx = tiny_dataset()
    patients = idx.patients()
    result = fit(
        tiny_model(),
        idx.subset(patients[:4]),
        idx.subset(patients[4:]),
        tiny_train_config(max_epochs=0),
    )
    assert result.history == []
    assert result.best_state is None


def test_fit_requires_disjoint_patients():
    idx = tiny_dataset()
    with pytest.raises(ConfigError):
        fit(tiny_model(), idx, idx, tiny_train_config())


def test_fit_rejects_empty_training_set():
    idx = tiny_dataset()
    with pytest.raises(ConfigError):
        fit(tiny_model(), idx.subset([]), idx, tiny_train_config())


def test_fit_smoke_and_history(tmp_path):
    idx = tiny_dataset()
    patients = idx.patients()
    result = fit(
        tiny_model(),
        idx.subset(patients[:4]),
        idx.subset(patients[4:]),
        tiny_train_config(max_epochs=3),
        out_dir=tmp_path,
    )
    assert len(result.history) == 3
    assert (tmp_path / "checkpoint.bin").exists()
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(HISTORY_COLUMNS)
    assert len(rows) == 4
    assert result.best_val_loss == min(h.val_loss for h in result.history)
    lrs = [h.lr for h in result.history]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))  # non-increasing


def test_fit_deterministic():
    idx = tiny_dataset()
    patients = idx.patients()

    def run():
        result = fit(
            tiny_model(seed=4),
            idx.subset(patients[:4]),
            idx.subset(patients[4:]),
            tiny_train_config(max_epochs=2, seed=9),
        )
        return [(h.train_loss, h.val_loss, h.dsc_labels) for h in result.history]

    assert run() == run()


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
def test_fit_training_loss_decreases_for_every_loss(loss_spec):
    idx = tiny_dataset(n=8)
    patients = idx.patients()
    result = fit(
        tiny_model(seed=1),
        idx.subset(patients[:6]),
        idx.subset(patients[6:]),
        tiny_train_config(max_epochs=6, seed=2, loss=loss_spec),
    )
    assert result.history[5].train_loss < result.history[0].train_loss


def test_fit_aborts_on_nan_with_checkpoint(tmp_path):
    idx = tiny_dataset()
    patients = idx.patients()
    model = tiny_model()
    model.params["head.kernel"].data[:] = np.nan
    with pytest.raises(TrainingAbort):
        fit(
            model,
            idx.subset(patients[:4]),
            idx.subset(patients[4:]),
            tiny_train_config(max_epochs=1),
            out_dir=tmp_path,
        )
    assert (tmp_path / "aborted_checkpoint.bin").exists()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_factor=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(min_lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_patience=0).validate()
    TrainConfig().validate()
