import numpy as np
import pytest

from _tiny import (TINY_CARDS, TINY_SCHEMA, full_model_grad_check, loss_and_grad, tiny_batch, tiny_config,
                   tiny_model)
from cstwa.data import SynthConfig, gen_synthetic, oracle_auc
from cstwa.errors import ConfigError
from cstwa.model import (ABLATIONS, CstwaModel, ModelConfig, pretrain_ctr, train, train_step)
from cstwa.nn import EVAL, make_rng
from cstwa.objective import LossWeights, ThresholdTracker
from cstwa.pipeline import prepare_synthetic


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(tower_dims=(8, 4), dropout=(0.1, 0.1), d_out=32)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=(0.1, 0.3))
    with pytest.raises(ConfigError):
        ModelConfig.for_ablation("bogus")
    assert ModelConfig.for_ablation("mlp").baseline
    for token in ABLATIONS:
        assert ModelConfig.for_ablation(token).ablation == token


@pytest.mark.parametrize("sm", [False, True])
def test_cp_off_leaves_embedding_bitwise(sm):
    m = tiny_model(tiny_config(enable_sm=sm, enable_cp=False))
    x, _, _ = tiny_batch()
    _, _, cache = m.forward(x)
    assert cache.e_v_hat is cache.e_v or cache.e_v_hat.tobytes() == cache.e_v.tobytes()


def test_zero_info_layer_doubles_embedding():
    m = tiny_model()
    m.info.weight[...] = 0
    m.info.bias[...] = 0
    _, _, cache = m.forward(tiny_batch()[0])
    assert np.all(cache.gate == 0.5) and np.all(cache.mult == 2.0)
    assert np.array_equal(cache.e_v_hat, 2.0 * cache.e_v)


def test_gate_multiplier_range():
    m = tiny_model()
    m.info.weight[...] *= 50
    _, _, cache = m.forward(tiny_batch()[0])
    assert np.all((cache.mult >= 1) & (cache.mult <= 3))
    m2 = tiny_model()
    _, _, cache = m2.forward(tiny_batch()[0])
    assert np.all((cache.mult > 1) & (cache.mult < 3))


def straight_line_forward(m, x):
    """Loop-based re-implementation of the full forward pass."""
    d = m.cfg.d
    ys, zs = [], []

    def tower(blocks, v):
        for blk in blocks:
            v = [max(0.0, sum(v[i] * blk.weight[i, j] for i in range(len(v))) + blk.bias[j])
                 for j in range(blk.weight.shape[1])]
        return v

    def head(blk, v):
        return [sig(sum(v[i] * blk.weight[i, j] for i in range(len(v))) + blk.bias[j])
                for j in range(blk.weight.shape[1])]

    for row in x:
        e_t = []
        for f, idx in enumerate(row):
            e_t += list(m.T.values[m.T.offsets[f] + idx])
        h_t = tower(m.click_tower, e_t)
        y = head(m.click_layer, h_t)[0]
        e_v = list(m.R_user.values[row[0]]) + list(m.R_item.values[row[2]])
        e_v += list(m.V.values[m.V.offsets[4] + row[4]])
        assert len(e_v) == 5 * d
        gate = head(m.info, h_t)
        e_v = [e * (1 + 2 * g) for e, g in zip(e_v, gate)]
        z = head(m.conv_layer, tower(m.conv_tower, e_v))[0]
        ys.append(y)
        zs.append(z)
    return np.array(ys), np.array(zs)


def test_forward_matches_straight_line_oracle():
    m = tiny_model(tiny_config(tower_dims=(4, 3), dropout=(0.0, 0.0), d_out=3))
    x, _, _ = tiny_batch()
    y, z, _ = m.forward(x)
    y_ref, z_ref = straight_line_forward(m, x)
    np.testing.assert_allclose(y, y_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(z, z_ref, rtol=0, atol=1e-12)


def test_zero_upstream_gives_zero_grads():
    m = tiny_model()
    x, _, _ = tiny_batch()
    _, _, cache = m.forward(x)
    sparse = m.backward(cache, np.zeros(4), np.zeros(4))
    assert all(not blk.grad_w.any() and not blk.grad_b.any() for _, blk in m.dense_blocks())
    assert all(not sg.grad.any() for sg in sparse)


def test_cp_off_info_layer_grads_zero():
    m = tiny_model(tiny_config(enable_cp=False))
    _, _, cache = m.forward(tiny_batch()[0])
    m.backward(cache, np.ones(4), np.ones(4))
    assert not m.info.grad_w.any() and not m.info.grad_b.any()


def test_backward_requires_cache():
    with pytest.raises(ConfigError):
        tiny_model().backward(None, np.ones(4), np.ones(4))


@pytest.mark.parametrize("flags", [(True, True, True), (False, True, False), (True, False, False),
                                   (False, False, False)])
def test_whole_model_gradient_check(flags):
    sm, cp, ce = flags
    m = tiny_model(tiny_config(enable_sm=sm, enable_cp=cp, enable_ce=ce))
    assert full_model_grad_check(m) < 1e-4


def test_stop_grad_gate_isolates_click_tower():
    x, y, z = tiny_batch()
    # only the conversion loss: the click tower can then be reached through the gate alone
    w = LossWeights(0.0, 1.0, 0.0)
    ones = np.ones(4)
    m = tiny_model(tiny_config())
    loss_and_grad(m, x, y, z, ones, ones, w)
    assert any(blk.grad_w.any() for blk in m.click_tower)
    m = tiny_model(tiny_config(stop_grad_gate=True))
    loss_and_grad(m, x, y, z, ones, ones, w)
    assert not any(blk.grad_w.any() for blk in m.click_tower)


def test_parameter_coverage():
    m = tiny_model()
    x, y, z = tiny_batch()
    seen = {name: False for name, _ in m.dense_blocks()}
    rows_seen = {name: False for name, _ in m.row_tables()}
    rng = make_rng(0)
    for _ in range(5):
        xs = x[rng.permutation(4)]
        y_hat, z_hat, cache = m.forward(xs, EVAL)
        sparse = m.backward(cache, rng.standard_normal(4), rng.standard_normal(4))
        for name, blk in m.dense_blocks():
            seen[name] |= bool(blk.grad_w.any() and blk.grad_b.any())
        for sg in sparse:
            name = next(n for n, t in m.row_tables() if t is sg.table)
            rows_seen[name] |= bool(sg.grad.any())
    assert all(seen.values()), seen
    assert all(rows_seen.values()), rows_seen


def test_sm_off_has_no_rep_matrices():
    m = tiny_model(tiny_config(enable_sm=False))
    assert m.R_user is None and [n for n, _ in m.row_tables()] == ["T", "V"]
    assert not any(k.startswith("R_") for k in m.state_dict())


def test_sm_requires_graphs():
    with pytest.raises(ConfigError):
        CstwaModel(tiny_config(), TINY_SCHEMA, TINY_CARDS)


def test_predict_contract():
    m = tiny_model()
    x, _, _ = tiny_batch()
    y1, z1 = m.predict(x)
    y2, z2 = m.predict(x)
    yf, zf, _ = m.forward(x, EVAL)
    assert y1.tobytes() == y2.tobytes() and z1.tobytes() == z2.tobytes()
    np.testing.assert_array_equal(y1, yf)
    np.testing.assert_array_equal(z1, zf)
    # batch shape can change gemm rounding, never more than that
    y3, z3 = m.predict(x, batch=3)
    np.testing.assert_allclose(y3, y1, rtol=1e-15, atol=0)
    np.testing.assert_allclose(z3, z1, rtol=1e-15, atol=0)
    assert np.all((y1 > 0) & (y1 < 1) & (z1 > 0) & (z1 < 1))


def test_hinge_monotonic_in_violations():
    # raising z_hat on a violating row never lowers the loss when w3 > 0
    from cstwa.objective import cstwa_objective
    y_hat = np.array([0.2, 0.5])
    y, z = np.array([0, 1]), np.array([0, 0])
    totals = [cstwa_objective(y_hat, np.array([zz, 0.1]), y, z, LossWeights(0, 0, 0.6)).report.total
              for zz in (0.1, 0.3, 0.5, 0.9)]
    assert totals == sorted(totals) and totals[0] == 0.0


def test_train_step_pushes_after_weighting():
    m = tiny_model(tiny_config(dtype="float64"))
    tracker = ThresholdTracker(capacity=100, warmup_min=1)
    x, y, z = tiny_batch()
    rep = train_step(m, x, y, z, tracker, make_rng(0))
    # the first batch saw an empty window, so weighting was off
    assert rep.mean_a == 1.0 and rep.mean_b == 1.0 and tracker.fill == 4


def tiny_synth():
    cfg = SynthConfig(n_users=100, n_items=60, n_user_clusters=4, n_item_clusters=4, n_train=20_000,
                      n_val=4_000, n_test=4_000, base_click_rate=0.2, base_conv_rate_given_click=0.2, seed=2)
    return gen_synthetic(cfg)


@pytest.fixture(scope="module")
def tiny_prep():
    d = tiny_synth()
    return d, prepare_synthetic(d, min_freq=1)


def small_cfg(**kw):
    base = dict(tower_dims=(16, 8), dropout=(0.1, 0.1), d_out=8, batch=500, epochs=3, pretrain_epochs=6, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def test_epochs_zero_returns_initial_params(tiny_prep):
    _, prep = tiny_prep
    cfg = small_cfg(epochs=0, enable_sm=False)
    res = train(cfg, prep.train, prep.val, prep.cardinalities)
    fresh = CstwaModel(cfg, prep.schema, prep.cardinalities)
    assert res.metrics == [] and res.best_epoch == 0
    assert all(np.array_equal(v, fresh.state_dict()[k]) for k, v in res.model.state_dict().items())


def test_pretrain_zero_epochs_and_determinism(tiny_prep):
    _, prep = tiny_prep
    cfg = small_cfg(pretrain_epochs=0)
    r0 = pretrain_ctr(cfg, prep.train, prep.val, prep.cardinalities)
    r0b = pretrain_ctr(cfg, prep.train, prep.val, prep.cardinalities)
    assert r0.history == [] and r0.table.values.tobytes() == r0b.table.values.tobytes()
    r1 = pretrain_ctr(small_cfg(pretrain_epochs=2), prep.train, prep.val, prep.cardinalities)
    r2 = pretrain_ctr(small_cfg(pretrain_epochs=2), prep.train, prep.val, prep.cardinalities)
    assert r1.table.values.tobytes() == r2.table.values.tobytes()
    assert r1.table.name == "T_pre"


def test_pretrain_reaches_oracle_fraction(tiny_prep):
    d, prep = tiny_prep
    res = pretrain_ctr(small_cfg(), prep.train, prep.val, prep.cardinalities)
    val = d.splits["val"]
    oracle = oracle_auc(val.p_click, val.raw.click)
    assert res.history[res.best_epoch - 1]["val_click_auc"] >= 0.9 * oracle


def test_training_is_deterministic_and_logs_rows(tiny_prep):
    _, prep = tiny_prep
    cfg = small_cfg(enable_sm=False, epochs=2)
    a = train(cfg, prep.train, prep.val, prep.cardinalities)
    b = train(cfg, prep.train, prep.val, prep.cardinalities)
    assert a.metrics == b.metrics
    assert [(r["epoch"], r["split"]) for r in a.metrics] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    assert a.best_val_purchase_auc == max(r["purchase_auc"] for r in a.metrics if r["split"] == "val")


def test_baseline_trains_conversion_on_clicked_rows_only(tiny_prep):
    _, prep = tiny_prep
    cfg = ModelConfig.for_ablation("mlp", tower_dims=(16, 8), dropout=(0.1, 0.1), d_out=8, batch=500, epochs=1,
                                   seed=1)
    res = train(cfg, prep.train, prep.val, prep.cardinalities)
    row = res.metrics[0]
    # calibration weight is forced to zero in the baseline regime
    assert row["total"] == pytest.approx(row["l_ctr"] + row["l_ce"], rel=1e-9)
    z_hat = res.model.predict(prep.val)[1]
    # fitted on clicked rows, the conversion head estimates a conditional rate well above the joint rate
    assert z_hat.mean() > 2 * prep.train.z.mean()
