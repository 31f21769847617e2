import pytest

from experiments import job_config, run_experiment
from tasks import gen_classification, gen_extraction
from trainer import TrainConfig


@pytest.fixture(scope="module")
def cls_data():
    return gen_classification(seed=0, n_samples=40, vocab=32, n_noise=3)


def _base(**kw):
    cfg = dict(task="cls", c=1, schedule=["drop"], hidden=[8], batch_size=8, epochs=1)
    cfg.update(kw)
    return TrainConfig(**cfg)


def test_compare_rows_follow_input_order(cls_data):
    out = run_experiment("compare", _base(), cls_data, strategies=["max", "cmp", "average"], seeds=[3, 1])
    assert [(r["strategy"], r["seed"]) for r in out["rows"]] == [
        ("max", 3), ("max", 1), ("cmp", 3), ("cmp", 1), ("average", 3), ("average", 1)]
    means = [r for r in out["summary"] if r["seed"] == "mean"]
    assert [r["strategy"] for r in means] == ["max", "cmp", "average"]
    assert "accuracy" in out["columns"] and "forward_per_sample" in out["columns"]


def test_single_arm_single_seed_is_one_row(cls_data):
    out = run_experiment("compare", _base(), cls_data, strategies=["cmp"], seeds=[0])
    assert len(out["rows"]) == 1 and out["summary"] == []


def test_compare_is_reproducible(cls_data):
    a = run_experiment("compare", _base(), cls_data, strategies=["cmp", "first"], seeds=[0, 1])
    b = run_experiment("compare", _base(), cls_data, strategies=["cmp", "first"], seeds=[0, 1])
    assert a == b


def test_unknown_strategy(cls_data):
    with pytest.raises(ValueError):
        run_experiment("compare", _base(), cls_data, strategies=["cmp", "median"], seeds=[0])


def test_duplicate_seeds(cls_data):
    with pytest.raises(ValueError):
        run_experiment("compare", _base(), cls_data, strategies=["cmp"], seeds=[1, 1])


def test_sweep_c(cls_data):
    out = run_experiment("sweep", _base(), cls_data, strategies=["cmp"], seeds=[0], axis="c", values=[1, 2])
    assert [r["value"] for r in out["rows"]] == [1, 2]
    assert [r["forward_per_sample"] for r in out["rows"]] == [2.0, 3.0]


def test_sweep_axis_unsupported_for_task(cls_data):
    with pytest.raises(ValueError):
        run_experiment("sweep", _base(), cls_data, seeds=[0], axis="depth", values=[1, 2])


def test_sweep_context_on_span():
    data = gen_extraction(seed=0, n_samples=10, n_distractors=3)
    base = TrainConfig(task="span", c=1, schedule=["crop"], d_model=8, d_ff=8, batch_size=5, epochs=1)
    out = run_experiment("sweep", base, data, seeds=[0], axis="context", values=[0, 1, 2, 3])
    assert [r["value"] for r in out["rows"]] == [0, 1, 2, 3]
    assert all("em" in r and "f1" in r for r in out["rows"])


def test_job_config_axes():
    base = _base(schedule=["crop", "drop"], c=2).model_dump()
    assert job_config(base, {"strategy": "cmp", "seed": 0, "axis": "c", "value": 3}).schedule == [
        "crop", "drop", "crop"]
    assert job_config(base, {"strategy": "cmp", "seed": 0, "axis": "hidden", "value": 12}).hidden == [12]


def test_sweep_schedule(cls_data):
    out = run_experiment("sweep", _base(), cls_data, strategies=["cmp"], seeds=[0], axis="schedule",
                         values=["drop", "crop+drop", "none"])
    assert [r["value"] for r in out["rows"]] == ["drop", "crop+drop", "none"]
    fps = [r["forward_per_sample"] for r in out["rows"]]
    assert fps[0] == 2.0 and fps[2] == 1.0
    assert 2.0 < fps[1] <= 3.0


def test_sweep_schedule_rejects_unknown_step(cls_data):
    with pytest.raises(ValueError):
        run_experiment("sweep", _base(), cls_data, seeds=[0], axis="schedule", values=["drop+mask"])


def test_job_config_schedule_axis():
    base = _base().model_dump()
    cfg = job_config(base, {"strategy": "cmp", "seed": 0, "axis": "schedule", "value": "crop+drop+drop"})
    assert cfg.c == 3 and cfg.schedule == ["crop", "drop", "drop"]
    plain = job_config(base, {"strategy": "average", "seed": 0, "axis": "schedule", "value": "none"})
    assert plain.c == 0 and plain.schedule == []
