import numpy as np
import pytest

import autodiff as ad
from errors import ContractError, DimensionError
from models import (ModelConfig, ablated_entries, forward, init_params, load_checkpoint, ones_masks,
                    parameter_roles, rank_score, save_checkpoint, site_widths, zero_ablated)
from tasks import Segment, SegmentedContext, SpanLabel, gen_classification, gen_extraction


def _encoder(head="cls", **kw):
    base = dict(arch="encoder", head=head, vocab=20, d_model=8, d_ff=12, max_len=8, n_out=3)
    base.update(kw)
    return init_params(ModelConfig(**base), seed=5)


def _span_context():
    segs = [Segment(ids=[1, 2, 3], support=True), Segment(ids=[4, 5, 6, 7]),
            Segment(ids=[8, 9, 10, 11], support=True), Segment(ids=[12, 13])]
    return SegmentedContext(task="span", segments=segs, label=SpanLabel(segment=2, start=1, end=2))


def test_mlp_parameter_count():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=0)
    assert params.count() == 212


def test_init_is_deterministic():
    config = ModelConfig(arch="mlp", dims=[8, 16, 4])
    assert init_params(config, 3).equals(init_params(config, 3))
    assert not init_params(config, 3).equals(init_params(config, 4))


def test_params_are_read_only():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=0)
    with pytest.raises(ValueError):
        params.tensors["mlp.l0.W"][0, 0] = 1.0


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        ModelConfig(arch="mlp", head="span", dims=[8, 4])
    with pytest.raises(ValueError):
        ModelConfig(arch="encoder", head="rank", vocab=10)


def test_dropout_sites_declared():
    assert ModelConfig(arch="mlp", dims=[8, 16, 12, 4]).dropout_sites == ["mlp.l0.drop", "mlp.l1.drop"]
    enc = ModelConfig(arch="encoder", vocab=10)
    assert site_widths(enc) == {"enc.attn.drop": 16, "enc.ffn.drop": 16}


def test_identity_masks_match_no_masks():
    params = _encoder()
    ctx = _span_context().model_copy(update={"task": "cls", "label": 1})
    plain = forward(params, ctx).value
    masked = forward(params, ctx, ones_masks(params.config)).value
    assert np.array_equal(plain, masked)


def test_missing_mask_site():
    params = _encoder()
    ctx = _span_context().model_copy(update={"task": "cls", "label": 1})
    with pytest.raises(ContractError):
        forward(params, ctx, {"enc.attn.drop": np.ones(8)})


def test_wrong_mask_width():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=0)
    with pytest.raises(DimensionError):
        forward(params, np.ones(8), {"mlp.l0.drop": np.ones(15)})


def test_mlp_unit_mask_equals_weight_zeroing():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=1)
    x = np.random.default_rng(2).normal(size=8)
    mask = np.ones(16)
    mask[5] = 0.0
    masks = {"mlp.l0.drop": mask}
    masked = forward(params, x, masks).value
    zeroed = forward(zero_ablated(params, masks), x).value
    assert np.allclose(masked, zeroed, atol=1e-12, rtol=0)


@pytest.mark.parametrize("site", ["enc.attn.drop", "enc.ffn.drop"])
def test_encoder_unit_mask_equals_weight_zeroing(site):
    params = _encoder()
    ctx = _span_context().model_copy(update={"task": "cls", "label": 0})
    masks = ones_masks(params.config)
    masks[site] = masks[site].copy()
    masks[site][[1, 6]] = 0.0
    masked = forward(params, ctx, masks).value
    zeroed = forward(zero_ablated(params, masks), ctx).value
    assert np.allclose(masked, zeroed, atol=1e-12, rtol=0)


def test_ablated_entries_cover_wiring():
    config = ModelConfig(arch="mlp", dims=[8, 16, 4])
    mask = np.ones(16)
    mask[[0, 3]] = 0
    entries = ablated_entries(config, {"mlp.l0.drop": mask})
    assert entries["mlp.l0.W"][:, 0].all() and entries["mlp.l0.W"][:, 3].all()
    assert entries["mlp.l0.b"][[0, 3]].all()
    assert entries["mlp.l1.W"][[0, 3], :].all()
    assert not entries["mlp.l1.b"].any()
    assert entries["mlp.l0.W"].sum() == 16
    roles = parameter_roles(config)
    assert roles["mlp.l1.b"] == "u" and roles["mlp.l0.W"] == "vw"


def test_span_head_lengths():
    params = _encoder(head="span")
    ctx = _span_context()
    start, end = forward(params, ctx)
    assert start.shape == (ctx.n_tokens(),) and end.shape == (ctx.n_tokens(),)


def test_permuting_distractors_permutes_token_outputs():
    params = _encoder(head="span")
    ctx = _span_context()
    swapped = ctx.model_copy(update={"segments": [ctx.segments[0], ctx.segments[3], ctx.segments[2],
                                                  ctx.segments[1]]})
    a, _ = forward(params, ctx)
    b, _ = forward(params, swapped)
    a, b = a.value, b.value
    # tokens: q(0..2) d1(3..6) gold(7..10) d2(11..12) vs q(0..2) d2(3..4) gold(5..8) d1(9..12)
    assert np.allclose(a[:3], b[:3], atol=1e-12)
    assert np.allclose(a[3:7], b[9:13], atol=1e-12)
    assert np.allclose(a[7:11], b[5:9], atol=1e-12)
    assert np.allclose(a[11:13], b[3:5], atol=1e-12)


def test_encoder_is_deterministic():
    params = _encoder()
    ctx = _span_context().model_copy(update={"task": "cls", "label": 2})
    assert np.array_equal(forward(params, ctx).value, forward(params, ctx).value)


def test_mlp_on_generated_context():
    ds = gen_classification(seed=0, n_samples=3, vocab=32)
    params = init_params(ModelConfig(arch="mlp", dims=[32, 8, 4], vocab=32), seed=0)
    out = forward(params, ds.samples[0])
    assert out.shape == (4,)


def test_segment_longer_than_max_len():
    ds = gen_extraction(seed=0, n_samples=1, segment_len=10)
    params = _encoder(head="span", vocab=48, max_len=8)
    with pytest.raises(ContractError):
        forward(params, ds.samples[0])


def test_rank_score():
    assert rank_score([1, 0], [1, 0]) == 1.0
    assert rank_score([1, 0], [0, 1]) == 0.0
    assert rank_score([1, 2], [3, 4]) == 11.0
    with pytest.raises(DimensionError):
        rank_score([1, 2], [1, 2, 3])


def test_checkpoint_roundtrip(tmp_path):
    params = _encoder(head="span")
    path = save_checkpoint(params, tmp_path / "m.ckpt.json", extra={"step": 3})
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    assert loaded.equals(params)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"magic": "other"}')
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_shared_parameters_across_passes_accumulate():
    params = init_params(ModelConfig(arch="mlp", dims=[8, 16, 4]), seed=0)
    x = np.ones(8)
    g = ad.Graph()
    l0 = ad.softmax_cross_entropy(forward(params, x, None, g), 0)
    l1 = ad.softmax_cross_entropy(forward(params, x, None, g), 0)
    grads = g.backward(ad.add(l0, l1))
    g1 = ad.Graph()
    single = g1.backward(ad.softmax_cross_entropy(forward(params, x, None, g1), 0))
    assert np.allclose(grads["mlp.l0.W"], 2 * single["mlp.l0.W"])
