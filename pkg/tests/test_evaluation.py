import numpy as np

from cardiseg.data import PhantomSpec, synth_generate
from cardiseg.evaluation import evaluate_model, worker_count
from cardiseg.losses import LossSpec
from cardiseg.preprocess import PipelineConfig
from cardiseg.unet import ModelConfig, build


def _setup():
    idx = synth_generate(
        PhantomSpec(distribution="A", n_patients=3, phases=("ED",), slices_per_volume=3),
        seed=21,
    )
    model = build(
        ModelConfig(
            input_size=(32, 32),
            base_channels=2,
            dropout_schedule=(0.0, 0.0, 0.0, 0.0, 0.0),
            seed=5,
        )
    )
    return idx, model


def test_evaluate_twice_gives_identical_numbers():
    idx, model = _setup()
    a = evaluate_model(model, idx)
    b = evaluate_model(model, idx)
    assert a.mean == b.mean and a.per_volume == b.per_volume


def test_evaluate_reports_per_volume_and_aggregates():
    idx, model = _setup()
    result = evaluate_model(model, idx)
    assert result.n_volumes == 3
    assert set(result.per_volume) == {s.key() for s in idx.samples}
    for key in ("rv", "lv", "myo", "labels"):
        vals = [v[key] for v in result.per_volume.values()]
        assert result.mean[key] == float(np.mean(vals))
        assert result.sd[key] == float(np.std(vals))


def test_evaluate_can_report_loss():
    idx, model = _setup()
    result = evaluate_model(model, idx, loss_spec=LossSpec("SDL"))
    assert result.loss is not None and np.isfinite(result.loss)


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("CARDISEG_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("CARDISEG_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("CARDISEG_THREADS", "junk")
    assert worker_count() == 1
    monkeypatch.setenv("CARDISEG_THREADS", "0")
    assert worker_count() == 1


def test_results_independent_of_worker_count(monkeypatch):
    idx, model = _setup()
    monkeypatch.setenv("CARDISEG_THREADS", "1")
    a = evaluate_model(model, idx)
    monkeypatch.setenv("CARDISEG_THREADS", "4")
    b = evaluate_model(model, idx)
    assert a.mean == b.mean and a.per_volume == b.per_volume


def test_train_mode_pipeline_is_forced_to_infer():
    idx, model = _setup()
    train_pipe = PipelineConfig(target_size=(32, 32), train_mode=True, seed=1)
    a = evaluate_model(model, idx, train_pipe)
    b = evaluate_model(model, idx, PipelineConfig(target_size=(32, 32), train_mode=False))
    assert a.mean == b.mean
