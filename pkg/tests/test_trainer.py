import numpy as np
import pytest

from arat import nn
from arat import trainer as Tr
from arat.attacks import AttackConfig
from arat.data import make_splits
from arat.nn import Arch, Branch
from arat.losses import compute_loss
from arat.tensor import Tape, Tensor
from arat.trainer import SwaState, TrainConfig, TrainError

from conftest import TINY, tiny_config, tiny_splits


def params_of(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


# -- auto-balance and schedule -------------------------------------------------------


@pytest.mark.parametrize("acc, expected", [(0.6, (0.6, 0.4)), (0.0, (0.0, 1.0)), (1.0, (1.0, 0.0))])
def test_auto_balance_examples(acc, expected):
    a, b = Tr.auto_balance_update(acc)
    assert (a, b) == pytest.approx(expected, abs=1e-15)
    assert a + b == 1.0


@pytest.mark.parametrize("acc", [-0.1, 1.1, float("nan")])
def test_auto_balance_rejects_out_of_range(acc):
    with pytest.raises(TrainError):
        Tr.auto_balance_update(acc)


def test_lr_schedule_examples():
    cfg = TrainConfig(epochs=100, base_lr=0.1, lr_drop_epochs=(75, 90))
    assert Tr.lr_at_epoch(cfg, 0) == 0.1
    assert Tr.lr_at_epoch(cfg, 74) == 0.1
    assert Tr.lr_at_epoch(cfg, 75) == pytest.approx(0.01, rel=1e-12)
    assert Tr.lr_at_epoch(cfg, 90) == pytest.approx(0.001, rel=1e-12)
    flat = TrainConfig(epochs=10, lr_drop_epochs=())
    assert {Tr.lr_at_epoch(flat, t) for t in range(10)} == {flat.base_lr}


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr_drop_epochs=(5, 5)), dict(lr_drop_epochs=(30,)),
                                dict(lr_drop_epochs=(10, 3)), dict(batch_size=0), dict(swa_start=30),
                                dict(auto_balance_init=1.5)])
def test_config_rejects_invalid(kw):
    with pytest.raises(TrainError):
        TrainConfig(**kw)


# -- SGD ----------------------------------------------------------------------------


def test_scalar_sgd_oracle():
    p = Tensor(np.array([2.0]), requires_grad=True)
    Tr.SGD(momentum=0.0, weight_decay=0.0).step({"p": p}, {"p": np.array([0.5])}, lr=0.1)
    assert p.data[0] == 2.0 - 0.1 * 0.5


def test_sgd_momentum_and_decay_formula():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Tr.SGD(momentum=0.9, weight_decay=0.01)
    opt.step({"p": p}, {"p": np.array([1.0])}, lr=0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * (1.0 + 0.01 * 1.0), abs=1e-15)
    q = p.data[0]
    opt.step({"p": p}, {"p": np.array([2.0])}, lr=0.1)
    assert p.data[0] == pytest.approx(q - 0.1 * ((0.9 * 1.0 + 2.0) + 0.01 * q), abs=1e-15)


def test_single_batch_scalar_gradient_step_in_train_epoch():
    # one batch, no momentum/decay: every parameter moves by exactly -lr * dL/dp
    train_ds, _ = tiny_splits()
    train_ds = train_ds.subset(np.arange(0, len(train_ds), 10))
    cfg = tiny_config(epochs=1, batch_size=len(train_ds), momentum=0.0, weight_decay=0.0, diagnostics=False,
                      attack=AttackConfig(iterations=0, random_init=False))
    model = nn.init_model(TINY, 3, [TINY.penultimate])
    probe = model.copy()
    with Tape() as tape:
        fw = compute_loss(probe, train_ds.images, train_ds.images, train_ds.labels,
                          cfg.loss.with_weights(0.5, 0.5), nn.Mode.TRAIN)
    ps = probe.parameters()
    grads = dict(zip(ps, tape.gradient(fw.breakdown.total, list(ps.values()))))
    before = params_of(model)
    Tr.train_epoch(model, train_ds, cfg, 0, 0.5, 0.5, Tr.SGD(0.0, 0.0))
    for k, v in params_of(model).items():
        # the epoch sees the batch in shuffled order, so sums differ by rounding only
        np.testing.assert_allclose(v, before[k] - cfg.base_lr * grads[k], rtol=0, atol=1e-14)


def test_zero_lr_leaves_parameters_unchanged():
    train_ds, _ = tiny_splits()
    model = nn.init_model(TINY, 0, [TINY.penultimate])
    before = params_of(model)
    cfg = tiny_config(epochs=1, base_lr=0.0, diagnostics=False)
    Tr.train_epoch(model, train_ds, cfg, 0, 0.5, 0.5, Tr.SGD(cfg.momentum, cfg.weight_decay))
    for k, v in params_of(model).items():
        assert np.array_equal(v, before[k]), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_batch_index():
    train_ds, _ = tiny_splits()
    model = nn.init_model(TINY, 0, [TINY.penultimate])
    model.parameters()["fc.bias"].data[0] = np.nan
    with pytest.raises(Tr.NumericAbort) as exc:
        Tr.train(model, train_ds, tiny_config(epochs=1, diagnostics=False))
    assert exc.value.epoch == 0 and exc.value.batch == 0


# -- training loop -------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_epoch_run():
    train_ds, test_ds = tiny_splits()
    model = nn.init_model(TINY, 0, [TINY.penultimate])
    return Tr.train(model, train_ds, tiny_config(epochs=2), test_ds)


def test_auto_balance_follows_previous_clean_accuracy(two_epoch_run):
    h = two_epoch_run.history
    assert (h[0].alpha, h[0].beta) == (0.5, 0.5)
    assert h[1].alpha == h[0].train_clean_acc and h[1].beta == 1.0 - h[0].train_clean_acc
    assert all(r.alpha + r.beta == pytest.approx(1.0, abs=1e-15) for r in h)


def test_epoch_half_accuracy_gives_even_weights(monkeypatch):
    real = Tr.train_epoch

    def fake(*args, **kw):
        rec = real(*args, **kw)
        rec.train_clean_acc = 0.5
        return rec

    monkeypatch.setattr(Tr, "train_epoch", fake)
    train_ds, _ = tiny_splits()
    res = Tr.train(nn.init_model(TINY, 0, [TINY.penultimate]), train_ds,
                   tiny_config(epochs=2, diagnostics=False, auto_balance_init=0.9))
    assert (res.history[0].alpha, res.history[0].beta) == pytest.approx((0.9, 0.1))
    assert (res.history[1].alpha, res.history[1].beta) == (0.5, 0.5)


def test_fixed_weights_without_auto_balance():
    train_ds, _ = tiny_splits()
    cfg = tiny_config(epochs=1, diagnostics=False, auto_balance=False)
    res = Tr.train(nn.init_model(TINY, 0, [TINY.penultimate]), train_ds, cfg)
    assert (res.history[0].alpha, res.history[0].beta) == (cfg.loss.alpha, cfg.loss.beta)


def test_history_records_and_diagnostics(two_epoch_run):
    h = two_epoch_run.history
    assert [r.epoch for r in h] == [0, 1]
    assert all(0 <= r.test_clean_acc <= 1 and r.test_robust_acc is not None for r in h)
    kinds = {d["instrument"] for d in h[1].diagnostics}
    assert {"gradient_conflict", "loss_gradient_norm", "bn_stat_variance", "feature_distance",
            "representation_similarity", "representation_drift"} <= kinds
    assert "representation_drift" not in {d["instrument"] for d in h[0].diagnostics}
    row = h[0].summary_row()
    assert set(row) >= {"epoch", "clean_acc", "robust_acc", "alpha", "beta", "lr"}


def test_training_is_deterministic(two_epoch_run):
    train_ds, test_ds = tiny_splits()
    again = Tr.train(nn.init_model(TINY, 0, [TINY.penultimate]), train_ds, tiny_config(epochs=2), test_ds)
    for k, v in again.model.state_arrays().items():
        assert np.array_equal(v, two_epoch_run.model.state_arrays()[k]), k
    assert [r.summary_row() for r in again.history] == [r.summary_row() for r in two_epoch_run.history]


def test_training_improves_clean_accuracy():
    train_ds, test_ds = tiny_splits()
    cfg = tiny_config(epochs=6, diagnostics=False, eval_every=0)
    res = Tr.train(nn.init_model(TINY, 0, [TINY.penultimate]), train_ds, cfg, test_ds)
    assert res.history[-1].train_clean_acc > res.history[0].train_clean_acc
    assert res.history[-1].test_clean_acc > 1 / 3 + 0.15


# -- SWA ----------------------------------------------------------------------------


def test_swa_two_snapshots_mean():
    p, q = {"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, -2.0])}
    s = Tr.swa_update(Tr.swa_update(SwaState(), p), q)
    assert s.count == 2 and s.average["w"].tolist() == [2.0, 0.0]


def test_swa_single_snapshot_exact():
    p = {"w": np.random.default_rng(0).normal(size=5)}
    s = Tr.swa_update(SwaState(), p)
    assert np.array_equal(s.average["w"], p["w"]) and s.average["w"] is not p["w"]


def test_swa_three_snapshots_brute_force():
    rng = np.random.default_rng(1)
    snaps = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)} for _ in range(3)]
    s = SwaState()
    for snap in snaps:
        s = Tr.swa_update(s, snap)
    for k in ("a", "b"):
        np.testing.assert_allclose(s.average[k], np.mean([sn[k] for sn in snaps], axis=0), rtol=0, atol=1e-12)


def test_swa_rejects_mismatch():
    s = Tr.swa_update(SwaState(), {"w": np.zeros(2)})
    with pytest.raises(TrainError):
        Tr.swa_update(s, {"w": np.zeros(3)})
    with pytest.raises(TrainError):
        Tr.swa_update(s, {"v": np.zeros(2)})


def test_swa_run_recalibrates_bn():
    train_ds, _ = tiny_splits()
    cfg = tiny_config(epochs=3, swa_start=1, diagnostics=False)
    res = Tr.train(nn.init_model(TINY, 0, [TINY.penultimate]), train_ds, cfg)
    assert res.swa.count == 2
    swa_params = res.swa_model.parameters()
    for k, v in res.swa.average.items():
        assert np.array_equal(swa_params[k].data, v)
    assert any(not np.array_equal(res.swa_model.buffers()[k], v) for k, v in res.model.buffers().items())
    for bn in res.swa_model.bns.values():
        assert all(np.all(bn.running_var[b] > 0) for b in Branch)


# -- evaluation ---------------------------------------------------------------------


def test_untrained_model_is_at_chance():
    arch = Arch(in_channels=1, image_size=8, widths=(4, 8), blocks_per_stage=1, num_classes=10)
    ds, _ = make_splits(classes=10, train_per_class=30, test_per_class=1, size=8, seed=0)
    clean, _ = Tr.evaluate(nn.init_model(arch, 0), ds)
    assert abs(clean - 0.1) <= 3 * np.sqrt(0.09 / len(ds))


def test_evaluate_without_attack_and_with_empty_ball(trained_tiny):
    model, _, test_ds = trained_tiny
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    clean, robust = Tr.evaluate(model, test_ds)
    assert robust == clean
    c0, r0 = Tr.evaluate(model, test_ds, attack=AttackConfig(epsilon=0.0, iterations=5))
    assert (c0, r0) == (clean, clean)
    for k, v in model.state_arrays().items():
        assert np.array_equal(v, before[k])


def test_evaluate_branches_differ_after_split_bn_training(trained_tiny):
    model, _, test_ds = trained_tiny
    main = Tr.evaluate(model, test_ds, Branch.MAIN)
    aux = Tr.evaluate(model, test_ds, Branch.AUX)
    assert all(0 <= v <= 1 for v in main + aux)
    bn = next(iter(model.bns.values()))
    assert not np.array_equal(bn.running_mean[Branch.MAIN], bn.running_mean[Branch.AUX])
