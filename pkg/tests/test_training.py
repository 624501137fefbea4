import math

import numpy as np
import pytest

from unittab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from unittab.embedding import prepare_series
from unittab.model import Model, ModelConfig
from unittab.tensor import NumericError, Tensor
from unittab.training import (
    AdamW, ConfigError, LabelError, TrainConfig, apply_masking, finetune,
    masked_token_loss, pretrain, regression_loss,
    smooth_categorical, smooth_neighborhood,
)
from conftest import make_tiny_schema, make_tiny_series


def entropy(p):
    p = np.asarray(p)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# -- smoothing


def test_smooth_categorical_example():
    assert np.allclose(smooth_categorical(2, 5, 0.1), [0.025, 0.025, 0.9, 0.025, 0.025])


def test_smooth_categorical_eps0_one_hot():
    assert smooth_categorical(1, 4, 0.0).tolist() == [0.0, 1.0, 0.0, 0.0]


def test_smooth_categorical_degenerate_vocab():
    assert smooth_categorical(0, 1, 0.1).tolist() == [1.0]


def test_smooth_categorical_out_of_range():
    with pytest.raises(ValueError):
        smooth_categorical(5, 5, 0.1)


def test_smooth_neighborhood_interior():
    p = smooth_neighborhood(50, 100, 0.1, 5)
    assert p[50] == 0.9
    for l in range(45, 56):
        if l != 50:
            assert abs(p[l] - 0.01) < 1e-15
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.count_nonzero(p) == 11


def test_smooth_neighborhood_boundary_renormalizes():
    p = smooth_neighborhood(2, 100, 0.1, 5)
    neighbors = [0, 1, 3, 4, 5, 6, 7]
    for l in neighbors:
        assert abs(p[l] - 0.1 / 7) < 1e-15
    assert p[2] == 0.9
    assert abs(p.sum() - 1.0) < 1e-12


def test_smooth_neighborhood_eps0():
    p = smooth_neighborhood(3, 10, 0.0, 5)
    assert p[3] == 1.0 and p.sum() == 1.0


def test_smooth_neighborhood_radius0_all_mass_at_bin():
    p = smooth_neighborhood(3, 10, 0.1, 0)
    assert p[3] == 1.0 and p.sum() == 1.0


# -- masking


def encoded_fixture(n_rows=6):
    schema = make_tiny_schema()
    expanded, encoded = prepare_series([make_tiny_series(n_rows=n_rows)], schema)
    return expanded, encoded[0]


def test_apply_masking_all_fields():
    expanded, enc = encoded_fixture()
    cfg = TrainConfig(p_f=1.0, p_r=0.0)
    out = apply_masking(enc, expanded, cfg, np.random.default_rng(0))
    assert all(m.all() for m in out.mask)


def test_apply_masking_none():
    expanded, enc = encoded_fixture()
    cfg = TrainConfig(p_f=0.0, p_r=0.0)
    out = apply_masking(enc, expanded, cfg, np.random.default_rng(0))
    assert not any(m.any() for m in out.mask)
    assert out.targets == []


def test_apply_masking_timestamp_atomicity():
    expanded, enc = encoded_fixture()
    cfg = TrainConfig(p_f=0.5, p_r=0.1)
    rng = np.random.default_rng(1)
    ts_slots = [s for s, name in enumerate(expanded.row_types[0].attributes)
                if expanded.attributes[name].group == "timestamp"]
    for _ in range(200):
        out = apply_masking(enc, expanded, cfg, rng)
        for m in out.mask:
            flags = m[ts_slots]
            assert flags.all() or not flags.any()


def test_apply_masking_rate():
    expanded, enc = encoded_fixture(n_rows=6)
    cfg = TrainConfig(p_f=0.15, p_r=0.1)
    rng = np.random.default_rng(2)
    non_ts = [s for s, name in enumerate(expanded.row_types[0].attributes)
              if expanded.attributes[name].group is None]
    hits = total = 0
    for _ in range(2500):
        out = apply_masking(enc, expanded, cfg, rng)
        for m in out.mask:
            hits += int(m[non_ts].sum())
            total += len(non_ts)
    rate = hits / total
    assert abs(rate - 0.235) < 0.01


def test_apply_masking_targets_are_distributions():
    expanded, enc = encoded_fixture()
    cfg = TrainConfig(p_f=0.7, p_r=0.2)
    rng = np.random.default_rng(3)
    out = apply_masking(enc, expanded, cfg, rng)
    assert out.targets
    for tg in out.targets:
        assert abs(tg.dist.sum() - 1.0) < 1e-9
        spec = expanded.attributes[tg.attr]
        if spec.kind == "numerical":
            assert tg.scalar is not None and 0.0 <= tg.scalar <= 1.0
            assert np.count_nonzero(tg.dist) <= 2 * cfg.neighborhood_radius + 1


def test_apply_masking_variant_keeps_targets():
    expanded, enc = encoded_fixture()
    cfg = TrainConfig(p_f=1.0, p_r=0.0, mask_variant="bert_80_10_10")
    rng = np.random.default_rng(4)
    out = apply_masking(enc, expanded, cfg, rng)
    # predicted positions cover every field even when inputs keep/replace
    assert len(out.targets) == sum(len(m) for m in out.mask)
    assert any(not m.all() for m in out.mask)  # some keep/replace happened


def test_apply_masking_does_not_mutate_source():
    expanded, enc = encoded_fixture()
    before = [r.cat_ids.copy() for r in enc.rows]
    cfg = TrainConfig(p_f=1.0, p_r=0.0, mask_variant="bert_80_10_10")
    apply_masking(enc, expanded, cfg, np.random.default_rng(5))
    for r, b in zip(enc.rows, before):
        assert np.array_equal(r.cat_ids, b)


# -- losses


def test_masked_token_loss_uniform():
    logits = Tensor(np.zeros((1, 4)), requires_grad=True)
    dists = np.array([[0.25, 0.25, 0.25, 0.25]])
    loss = masked_token_loss([("x", logits, dists)])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_masked_token_loss_achievable_distribution_gives_entropy():
    target = smooth_categorical(2, 5, 0.1)
    logits = Tensor(np.log(target)[None, :], requires_grad=True)
    loss = masked_token_loss([("x", logits, target[None, :])])
    assert abs(loss.item() - entropy(target)) < 1e-12
    assert abs(entropy(target) - 0.4637124) < 1e-6


def test_masked_token_loss_empty():
    assert masked_token_loss([]).item() == 0.0


def test_masked_token_loss_mixes_groups_by_count():
    l1 = Tensor(np.zeros((3, 4)))
    l2 = Tensor(np.zeros((1, 2)))
    d1 = np.full((3, 4), 0.25)
    d2 = np.full((1, 2), 0.5)
    loss = masked_token_loss([("a", l1, d1), ("b", l2, d2)])
    expected = (3 * math.log(4) + 1 * math.log(2)) / 4
    assert abs(loss.item() - expected) < 1e-12


def test_regression_loss_exact_predictions():
    preds = Tensor(np.array([0.2, 0.8]))
    ce = Tensor(0.3)
    loss = regression_loss(preds, np.array([0.2, 0.8]), ce, 50.0)
    assert abs(loss.item() - 0.3) < 1e-15


def test_regression_loss_constant_offset():
    preds = Tensor(np.array([0.3, 0.5, 0.9]))
    targets = np.array([0.2, 0.4, 0.8])
    loss = regression_loss(preds, targets, Tensor(0.0), 50.0)
    assert abs(loss.item() - 0.5) < 1e-12


def test_regression_loss_mixed_recomputation():
    rng = np.random.default_rng(6)
    preds = rng.random(7)
    targets = rng.random(7)
    ce_val = 1.234
    loss = regression_loss(Tensor(preds), targets, Tensor(ce_val), 50.0)
    manual = ce_val + 50.0 * np.mean((preds - targets) ** 2)
    assert abs(loss.item() - manual) < 1e-12


# -- optimizer


def test_adamw_pure_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.0])
    opt = AdamW({"w": p}, lr=1e-3, weight_decay=1e-2)
    opt.step()
    assert abs(p.data[0] - 0.99999) < 1e-12


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    opt = AdamW({"w": p}, lr=1e-3, weight_decay=0.0)
    opt.step()
    # one-step hand simulation: m-hat/sqrt(v-hat) = sign(g) up to eps
    assert np.allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3], atol=1e-8)


def test_adamw_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        opt = AdamW({"w": p}, lr=1e-2)
        for _ in range(10):
            p.grad = rng.normal(size=(4, 3))
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adamw_nonfinite_grad_aborts_before_mutation():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.1])
    q.grad = np.array([np.inf])
    opt = AdamW({"a": p, "b": q}, lr=1e-3)
    with pytest.raises(NumericError):
        opt.step()
    assert p.data[0] == 1.0 and q.data[0] == 2.0


def test_adamw_skips_gradless_params():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=1e-3, weight_decay=1e-2)
    opt.step()
    assert p.data[0] == 1.0


def test_adamw_excludes_no_decay_names():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.0])
    opt = AdamW({"ln.gamma": p}, lr=1e-3, weight_decay=1e-2, no_decay={"ln.gamma"})
    opt.step()
    assert p.data[0] == 1.0


# -- loops


def small_pretrain_setup(seed=0, n_series=4, **model_overrides):
    schema = make_tiny_schema()
    series = [make_tiny_series(f"e{i}", n_rows=5) for i in range(n_series)]
    expanded, encoded = prepare_series(series, schema)
    defaults = dict(d=8, m=16, field_layers=1, field_heads=2, seq_layers=1, seq_heads=2,
                    freq_count=2, t_max=6, n_row_types=1, dropout=0.0)
    defaults.update(model_overrides)
    model = Model(ModelConfig(**defaults), expanded, seed=seed)
    return model, encoded


def test_pretrain_no_masking_warns_and_stays_zero():
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(p_f=0.0, p_r=0.0, epochs=2, batch_size=2, seed=0)
    with pytest.warns(UserWarning):
        result = pretrain(encoded, model, cfg)
    assert all(l == 0.0 for l in result.losses)


def test_pretrain_loss_curve_deterministic():
    def run():
        model, encoded = small_pretrain_setup()
        cfg = TrainConfig(p_f=0.3, p_r=0.1, lr=1e-3, epochs=3, batch_size=2, seed=5)
        return pretrain(encoded, model, cfg).losses

    assert run() == run()


def test_pretrain_decreases_loss_on_tiny_data():
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(p_f=0.3, p_r=0.1, lr=3e-3, epochs=30, batch_size=4, seed=1)
    result = pretrain(encoded, model, cfg)
    first = np.mean(result.losses[:5])
    last = np.mean(result.losses[-5:])
    assert last < first


def test_pretrain_loss_mode_requires_matching_head():
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(loss_mode="regression_l2")
    with pytest.raises(ConfigError):
        pretrain(encoded, model, cfg)
    model2, encoded2 = small_pretrain_setup(numeric_target="scalar")
    with pytest.raises(ConfigError):
        pretrain(encoded2, model2, TrainConfig(loss_mode="unified_ce"))


def test_pretrain_regression_mode_runs():
    model, encoded = small_pretrain_setup(numeric_target="scalar")
    cfg = TrainConfig(loss_mode="regression_l2", p_f=0.5, lr=1e-3, epochs=2,
                      batch_size=2, seed=2)
    result = pretrain(encoded, model, cfg)
    assert all(np.isfinite(l) for l in result.losses)


def labeled_encoded(n=8, seed=0):
    schema = make_tiny_schema()
    rng = np.random.default_rng(seed)
    series = []
    for i in range(n):
        s = make_tiny_series(f"e{i}", n_rows=4)
        series.append(s)
    expanded, encoded = prepare_series(series, schema)
    for i, s in enumerate(encoded):
        s.label = i % 2
    return expanded, encoded


def test_finetune_requires_labels():
    model, encoded = small_pretrain_setup()
    for s in encoded:
        s.label = None
    with pytest.raises(LabelError):
        finetune(encoded, encoded, model, "binary", TrainConfig(epochs=1))


def test_finetune_binary_smoke():
    expanded, encoded = labeled_encoded()
    model = Model(ModelConfig(d=8, m=16, field_layers=1, field_heads=2, seq_layers=1,
                              seq_heads=2, freq_count=2, t_max=6, dropout=0.0),
                  expanded, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=3)
    result = finetune(encoded[:6], encoded[6:], model, "binary", cfg)
    assert set(result.report.metrics) == {"f1", "average_precision", "roc_auc", "accuracy"}
    assert result.report.confusion is not None


def test_finetune_freeze_backbone_leaves_backbone_params():
    expanded, encoded = labeled_encoded()
    model = Model(ModelConfig(d=8, m=16, field_layers=1, field_heads=2, seq_layers=1,
                              seq_heads=2, freq_count=2, t_max=6, dropout=0.0),
                  expanded, seed=0)
    before = model.params["proj.W.1"].data.copy()
    cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-2, seed=3)
    finetune(encoded[:6], encoded[6:], model, "binary", cfg, freeze_backbone=True)
    assert np.array_equal(model.params["proj.W.1"].data, before)


# -- checkpointing


def test_checkpoint_round_trip_bitwise(tmp_path):
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(p_f=0.3, lr=1e-3, epochs=2, batch_size=2, seed=4)
    result = pretrain(encoded, model, cfg)
    rng = np.random.default_rng(0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, result.optimizer, cfg, rng, result.steps)
    state = load_checkpoint(path, model.schema)
    for name, p in model.params.items():
        assert np.array_equal(state.model.params[name].data, p.data)
    path2 = tmp_path / "again.ckpt"
    save_checkpoint(path2, state.model, state.optimizer, state.train_config,
                    state.rng, state.step)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_forward_identical_after_reload(tmp_path):
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(seed=0)
    batch_rng = np.random.default_rng(9)
    masked = [apply_masking(encoded[0], model.schema, TrainConfig(p_f=0.5, seed=0),
                            batch_rng)]
    before = model.pretrain_forward(masked, rng=None, training=False)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, None, cfg, None, 0)
    state = load_checkpoint(path, model.schema)
    after = state.model.pretrain_forward(masked, rng=None, training=False)
    for (_, la, _), (_, lb, _) in zip(before.cat_groups, after.cat_groups):
        assert np.array_equal(la.data, lb.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    model, _ = small_pretrain_setup()
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path, model.schema)


def test_checkpoint_truncated(tmp_path):
    model, _ = small_pretrain_setup()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, None, TrainConfig(), None, 0)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path, model.schema)


def test_checkpoint_schema_hash_mismatch(tmp_path):
    model, _ = small_pretrain_setup()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, None, TrainConfig(), None, 0)
    other_schema, _ = prepare_series([make_tiny_series(n_rows=9)],
                                     make_tiny_schema())
    other_schema.attributes["amount"].bin_edges = [0.0, 0.5, 3.0]
    with pytest.raises(CheckpointError, match="schema hash"):
        load_checkpoint(path, other_schema)


def test_pretrain_abort_preserves_last_checkpoint(tmp_path):
    model, encoded = small_pretrain_setup()
    cfg = TrainConfig(p_f=0.3, lr=1e-3, batch_size=2, epochs=50, seed=6,
                      checkpoint_every=2)
    path = tmp_path / "m.ckpt"
    original_forward = model.pretrain_forward
    calls = {"n": 0}

    def failing_forward(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 5:
            raise RuntimeError("injected failure")
        return original_forward(*args, **kwargs)

    model.pretrain_forward = failing_forward
    with pytest.raises(RuntimeError):
        pretrain(encoded, model, cfg, checkpoint_path=path)
    state = load_checkpoint(path, model.schema)
    assert state.step == 4  # last periodic checkpoint before the failure
