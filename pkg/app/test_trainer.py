import json

import numpy as np
import pytest

import autodiff as ad
import trainer
from ablation import CropChain, MaskChain, RngStream, crop_step, drop_step, masks_for_step
from artifacts import read_csv
from cmploss import ComparisonChain, comparative_loss
from errors import ConfigError, ContractError, DivergenceError, NumericError
from models import ModelConfig, ModelParams, forward, init_params, load_checkpoint, site_widths
from tasks import gen_classification, gen_extraction, gen_ranking, task_loss
from trainer import (RunRecord, TrainConfig, build_model_config, evaluate, mean_task_loss, order_violation_rate,
                     robustness_index, run_chain, sgd_update, train, train_erm, train_step)


@pytest.fixture(scope="module")
def cls_data():
    return gen_classification(seed=0, n_samples=100, vocab=32, n_noise=3)


def _cfg(**kw):
    base = dict(task="cls", hidden=[8], lr=0.1, batch_size=4, epochs=1)
    base.update(kw)
    return TrainConfig(**base)

# ------------------------------
# Config
# ------------------------------

def test_config_rejects_inconsistent_schedule():
    with pytest.raises(ValueError):
        TrainConfig(c=2, schedule=["drop"])
    with pytest.raises(ValueError):
        TrainConfig(c=0, strategy="second")
    with pytest.raises(ValueError):
        TrainConfig(task="span", arch="mlp")
    with pytest.raises(ValueError):
        TrainConfig(c=1, schedule=["drop"], unknown_key=1)


def test_config_default_arch():
    assert TrainConfig(task="cls").resolved_arch == "mlp"
    assert TrainConfig(task="span").resolved_arch == "encoder"


def test_model_config_must_match_task(cls_data):
    with pytest.raises(ConfigError):
        build_model_config(TrainConfig(task="span"), cls_data)
    mc = build_model_config(_cfg(), cls_data)
    assert mc.dims == [32, 8, 4]


def test_crop_needs_non_support_segments():
    ds = gen_classification(seed=0, n_samples=10, vocab=32, n_noise=0)
    with pytest.raises(ConfigError):
        train(_cfg(c=1, schedule=["crop"]), ds)

# ------------------------------
# Optimizer
# ------------------------------

def _scalar_params(w):
    return ModelParams(config=ModelConfig(arch="mlp", dims=[1, 1]),
                       tensors={"mlp.l0.W": [[w]], "mlp.l0.b": [0.0]})


def test_sgd_examples():
    p = _scalar_params(1.0)
    grads = {"mlp.l0.W": np.array([[2.0]])}
    assert sgd_update(p, grads, 0.0).equals(p)
    assert float(sgd_update(p, grads, 0.1).tensors["mlp.l0.W"][0, 0]) == pytest.approx(0.8, abs=1e-15)


def test_sgd_reverse_update():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=0)
    rng = np.random.default_rng(0)
    grads = {k: rng.normal(size=v.shape) for k, v in params.tensors.items()}
    back = sgd_update(sgd_update(params, grads, 0.05), grads, -0.05)
    for k in params.tensors:
        assert np.allclose(back.tensors[k], params.tensors[k], atol=1e-15, rtol=0)


def test_sgd_non_finite_gradient():
    with pytest.raises(NumericError):
        sgd_update(_scalar_params(1.0), {"mlp.l0.W": np.array([[np.nan]])}, 0.1)


def test_nan_hidden_weights_raise_numeric_error(cls_data):
    cfg = _cfg(c=1, schedule=["drop"])
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    name = "mlp.l0.W"
    broken = params.replace(dict(params.tensors, **{name: np.full(params.tensors[name].shape, np.nan)}))
    with pytest.raises(NumericError):
        train_step(broken, cls_data.samples[:2], cfg, RngStream(seed=0))


def test_verbose_training_keeps_chains(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], verbose=True, max_steps=2)
    _, record = train(cfg, cls_data)
    chains = record.steps[0].chains
    assert set(chains) == {"drop", "crop"}
    assert len(chains["drop"]) == 1 and chains["crop"] == []


def test_momentum_accumulates_velocity():
    velocity = {}
    grads = {"mlp.l0.W": np.array([[2.0]])}
    p = trainer.momentum_update(_scalar_params(1.0), grads, 0.1, 0.5, velocity)
    assert float(p.tensors["mlp.l0.W"][0, 0]) == pytest.approx(0.8)
    p = trainer.momentum_update(p, grads, 0.1, 0.5, velocity)
    assert float(velocity["mlp.l0.W"][0, 0]) == pytest.approx(3.0)
    assert float(p.tensors["mlp.l0.W"][0, 0]) == pytest.approx(0.5)

# ------------------------------
# Chains and steps
# ------------------------------

def test_crop_then_drop_chain():
    ds = gen_extraction(seed=0, n_samples=2, n_distractors=3)
    cfg = TrainConfig(task="span", c=2, schedule=["crop", "drop"], d_model=8, d_ff=8)
    params = init_params(build_model_config(cfg, ds), seed=0)
    ctx = ds.samples[0]
    res = run_chain(params, ctx, cfg.schedule, cfg.p, RngStream(seed=1), ad.Graph(), keep_chains=True)
    assert len(res.losses) == 3 and not res.shortened

    rng = RngStream(seed=1)
    cropped = crop_step(CropChain(original=ctx), rng).context_at(1)
    assert len(cropped.segments) < len(ctx.segments)
    l1 = task_loss("span", forward(params, cropped), cropped.target()).item()
    masks = masks_for_step(drop_step(MaskChain(p=cfg.p, widths=site_widths(params.config)), rng), 1)
    l2 = task_loss("span", forward(params, cropped, masks), cropped.target()).item()
    assert res.losses[1].item() == l1
    assert res.losses[2].item() == l2
    assert res.chains["crop"] == [list(crop_step(CropChain(original=ctx), RngStream(seed=1)).retained(1))]


def test_chain_shortened_when_crops_run_out():
    ds = gen_extraction(seed=0, n_samples=1, n_distractors=1)
    cfg = TrainConfig(task="span", c=3, schedule=["crop", "crop", "drop"], d_model=8, d_ff=8)
    params = init_params(build_model_config(cfg, ds), seed=0)
    res = run_chain(params, ds.samples[0], cfg.schedule, cfg.p, RngStream(seed=0), ad.Graph())
    assert res.shortened and len(res.losses) == 3


def test_forward_count_is_one_plus_c(cls_data):
    cfg = _cfg(c=2, schedule=["drop", "drop"], epochs=1)
    _, record = train(cfg, cls_data)
    assert all(r.fwd_count == 3 for r in record.steps)
    cost = record.cost_summary()
    assert cost["forward_per_sample"] == 3.0 and cost["ratio_to_erm"] == 3.0
    assert cost["forward_passes"] == 3 * len(cls_data)


def test_batch_gradient_is_mean_of_sample_gradients(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], lr=0.5)
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    rng = RngStream(seed=0).derive(0)
    a, b = cls_data.samples[:2]
    both, _ = train_step(params, [a, b], cfg, rng)
    only_a, _ = train_step(params, [a], cfg, rng)
    only_b, _ = train_step(params, [b], cfg, rng)
    for k in params.tensors:
        expected = params.tensors[k] + 0.5 * ((only_a.tensors[k] - params.tensors[k])
                                              + (only_b.tensors[k] - params.tensors[k]))
        assert np.allclose(both.tensors[k], expected, atol=1e-12)


def test_step_record_weights(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], b_policy="full_model_loss")
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    _, recs = train_step(params, cls_data.samples[:4], cfg, RngStream(seed=0))
    for r in recs:
        assert r.b == r.losses[0]
        l0, l1 = r.losses
        assert r.alphas == ([1, -1] if l0 > l1 else [0, 1] if l1 > l0 else [0, 0])
        assert r.cmp_loss == pytest.approx(abs(l0 - l1))


def test_second_strategy_optimizes_dropout_loss(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], strategy="second")
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    _, recs = train_step(params, cls_data.samples[:3], cfg, RngStream(seed=0))
    for r in recs:
        assert r.objective == r.losses[1]


def test_batch_mean_mode_compares_mean_losses(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], batch_mode="batch_mean")
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    _, recs = train_step(params, cls_data.samples[:4], cfg, RngStream(seed=0))
    means = [float(np.mean([r.losses[i] for r in recs])) for i in range(2)]
    expected = comparative_loss(ComparisonChain.from_values(means, 0.0)).item()
    assert all(r.objective == recs[0].objective for r in recs)
    assert recs[0].objective == pytest.approx(expected, abs=1e-12)

# ------------------------------
# Training runs
# ------------------------------

def test_zero_ablation_training_matches_erm_bit_for_bit():
    data = gen_classification(seed=2, n_samples=100, vocab=32, n_noise=3)
    cfg = _cfg(c=0, schedule=[], b_policy="zero", strategy="cmp", batch_size=1, epochs=2, max_steps=200)
    params, record = train(cfg, data)
    erm_params, erm_record = train_erm(cfg, data)
    assert len(record.steps) == 200
    assert params.equals(erm_params)
    assert [r.losses for r in record.steps] == [r.losses for r in erm_record.steps]


def test_erm_uses_momentum(cls_data):
    cfg = _cfg(c=0, schedule=[], b_policy="zero", strategy="cmp", batch_size=1, momentum=0.9, max_steps=20)
    params, _ = train(cfg, cls_data)
    erm_params, _ = train_erm(cfg, cls_data)
    assert params.equals(erm_params)
    plain, _ = train_erm(cfg.model_copy(update={"momentum": 0.0}), cls_data)
    assert not plain.equals(erm_params)


def test_erm_matches_batch_mean_training(cls_data):
    cfg = _cfg(c=0, schedule=[], b_policy="zero", strategy="cmp", batch_size=4, batch_mode="batch_mean",
               max_steps=10)
    params, _ = train(cfg, cls_data)
    erm_params, _ = train_erm(cfg, cls_data)
    sample_mode, _ = train_erm(cfg.model_copy(update={"batch_mode": "sample"}), cls_data)
    assert erm_params.equals(sample_mode)
    for name, t in params.tensors.items():
        np.testing.assert_allclose(t, erm_params.tensors[name], rtol=1e-12, atol=1e-12)


def test_training_is_deterministic(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], epochs=2, eval_every=10)
    p1, r1 = train(cfg, cls_data)
    p2, r2 = train(cfg, cls_data)
    assert p1.equals(p2)
    assert r1.final_metrics() == r2.final_metrics()
    assert r1.step_rows() == r2.step_rows()


def test_max_steps_and_evals(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], epochs=5, eval_every=5, max_steps=12)
    _, record = train(cfg, cls_data)
    assert record.steps[-1].step == 11
    steps = sorted({e.step for e in record.evals})
    assert steps == [5, 10, 12]
    assert set(record.final_metrics()) == {"accuracy", "loss", "order_violation"}


def test_early_stopping_on_flat_metric(cls_data):
    cfg = _cfg(c=1, schedule=["drop"], lr=0.0, eval_every=1, early_stopping=2)
    _, record = train(cfg, cls_data)
    assert record.steps[-1].step == 2
    assert sorted({e.step for e in record.evals}) == [1, 2, 3]


def test_train_writes_checkpoints(cls_data, tmp_path):
    cfg = _cfg(c=1, schedule=["drop"], eval_every=10)
    params, record = train(cfg, cls_data, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "ckpt-step000020.json").config == params.config
    record.write(tmp_path)
    rows = read_csv(tmp_path / "steps.csv")
    assert {"alpha_0", "alpha_1", "l_0", "l_1", "b", "cmp_loss", "fwd_count"} <= set(rows[0])
    assert len(rows) == len(cls_data)
    assert (tmp_path / "steps.csv").read_text().startswith("# cmplab steps generated ")


def test_divergence_aborts_with_checkpoint(cls_data, tmp_path, monkeypatch):
    real_step = trainer.train_step
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("non-finite task loss at chain index 1")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(trainer, "train_step", flaky)
    with pytest.raises(DivergenceError) as info:
        train(_cfg(c=1, schedule=["drop"]), cls_data, out_dir=tmp_path)
    assert info.value.checkpoint == str(tmp_path / "abort.ckpt.json")
    assert json.loads((tmp_path / "abort.ckpt.json").read_text())["extra"]["step"] == 2


def test_ranking_training_runs():
    data = gen_ranking(seed=0, n_queries=12, n_feedback=3)
    cfg = TrainConfig(task="rank", c=1, schedule=["crop"], prf_depth=3, d_model=8, d_ff=8, batch_size=4,
                      epochs=1, lr=0.05)
    params, record = train(cfg, data)
    assert 0.0 <= record.final_metrics()["mrr@10"] <= 1.0
    per_depth = [evaluate(params, data, context_size=k)["mrr@10"] for k in range(4)]
    assert all(0.0 <= v <= 1.0 for v in per_depth)

# ------------------------------
# Evaluation and diagnostics
# ------------------------------

def test_full_context_equals_untruncated():
    data = gen_extraction(seed=1, n_samples=8, n_distractors=4)
    cfg = TrainConfig(task="span", d_model=8, d_ff=8)
    params = init_params(build_model_config(cfg, data), seed=0)
    assert evaluate(params, data, context_size=4) == evaluate(params, data)
    assert mean_task_loss(params, data, context_size=4) == mean_task_loss(params, data)
    rows = [evaluate(params, data, context_size=k) for k in range(5)]
    assert len(rows) == 5 and all(set(r) == {"em", "f1"} for r in rows)


def test_order_violation_rate(cls_data, frozen):
    cfg = _cfg(c=2, schedule=["drop", "drop"])
    params = init_params(build_model_config(cfg, cls_data), seed=0)
    rate = order_violation_rate(params, cls_data, cfg.schedule, cfg, n_chains=2)
    assert 0.0 <= rate <= 1.0
    assert rate == frozen("untrained_order_violation_rate", rate)
    assert rate == order_violation_rate(params, cls_data, cfg.schedule, cfg, n_chains=2)
    with pytest.raises(ContractError):
        order_violation_rate(params, cls_data, [], cfg)


def test_robustness_index():
    with_k = [1] * 6 + [0] * 2 + [0.5] * 2
    without = [0] * 6 + [1] * 2 + [0.5] * 2
    assert robustness_index(with_k, without) == pytest.approx(0.4)
    assert robustness_index([1, 1], [0, 0]) == 1.0
    assert robustness_index([0.3, 0.3], [0.3, 0.3]) == 0.0
    with pytest.raises(ContractError):
        robustness_index([], [])


def test_run_record_header():
    record = RunRecord(c=2)
    assert record.step_header()[:6] == ["step", "sample_id", "l_0", "l_1", "l_2", "b"]
    assert "alpha_2" in record.step_header()
