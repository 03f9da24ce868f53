import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arat import diagnostics as D
from arat import losses as L
from arat import nn
from arat.attacks import AttackConfig, pgd
from arat.nn import Branch, Mode
from arat.tensor import Tape

from conftest import TINY, tiny_splits

GRADS = {"a": np.array([1.0, 2.0]), "b": np.array([[0.5, -1.0], [3.0, 0.0]])}


def pair(cls, inv):
    return D.GradientPair(cls, inv)


def test_conflict_identical():
    r = D.conflict_report(pair(GRADS, GRADS))
    assert r.global_cosine == pytest.approx(1.0, abs=1e-12) and r.conflict_fraction == 0.0


def test_conflict_opposed():
    r = D.conflict_report(pair(GRADS, {k: -v for k, v in GRADS.items()}))
    assert r.global_cosine == pytest.approx(-1.0, abs=1e-12) and r.conflict_fraction == 1.0


def test_conflict_two_block_oracle():
    cls = {"p": np.array([1.0, 0.0]), "q": np.array([0.0, 1.0])}
    inv = {"p": np.array([1.0, 0.0]), "q": np.array([0.0, -1.0])}
    r = D.conflict_report(pair(cls, inv))
    assert r.conflict_fraction == 0.5 and r.global_cosine == pytest.approx(0.0, abs=1e-15)
    assert r.per_parameter == {"p": 1.0, "q": -1.0}


def test_zero_gradient_tensors_excluded():
    cls = {"p": np.array([1.0]), "q": np.array([2.0, 1.0])}
    inv = {"p": np.array([-1.0]), "q": np.zeros(2)}
    r = D.conflict_report(pair(cls, inv))
    assert r.counted == 1 and r.conflict_fraction == 1.0 and r.per_parameter["q"] is None


def test_scalar_granularity():
    cls = {"p": np.array([1.0, 1.0, 2.0, 0.0])}
    inv = {"p": np.array([1.0, -1.0, -3.0, 5.0])}
    r = D.conflict_report(pair(cls, inv), "scalar")
    assert r.counted == 3 and r.conflict_fraction == pytest.approx(2 / 3)


def test_conflict_errors():
    with pytest.raises(D.DiagnosticsError):
        pair({"a": np.ones(1)}, {"b": np.ones(1)})
    with pytest.raises(D.DiagnosticsError):
        pair({}, {})
    with pytest.raises(D.DiagnosticsError):
        D.conflict_report(pair(GRADS, GRADS), "layer")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.sampled_from(["tensor", "scalar"]))
def test_conflict_scale_invariance(seed, s1, s2, gran):
    rng = np.random.default_rng(seed)
    cls = {k: rng.normal(size=(3, 2)) for k in "abc"}
    inv = {k: rng.normal(size=(3, 2)) for k in "abc"}
    base = D.conflict_report(pair(cls, inv), gran)
    scaled = D.conflict_report(pair({k: s1 * v for k, v in cls.items()}, {k: s2 * v for k, v in inv.items()}), gran)
    assert scaled.global_cosine == pytest.approx(base.global_cosine, abs=1e-12)
    assert scaled.conflict_fraction == base.conflict_fraction
    for k in cls:
        assert scaled.per_parameter[k] == pytest.approx(base.per_parameter[k], abs=1e-12)


def test_clean_path_gradient_has_no_entries_under_stop_gradient():
    # the invariance gradient on the clean-exclusive path (the aux BN affine) is zero, so nothing is counted
    model = nn.init_model(TINY, 0, [TINY.penultimate])
    x, _ = tiny_splits()
    x_adv = np.clip(x.images[:8] + 0.03, 0, 1)
    aux = {k: v for k, v in model.parameters().items() if ".bn.aux." in k}
    for variant, expect_zero in [("V3", True), ("AsymTRADES", True)]:
        with Tape() as tape:
            fw = L.compute_loss(model, x.images[:8], x_adv, x.labels[:8],
                                L.LossAssembly(variant, capture_tags=(TINY.penultimate,)), Mode.TRAIN)
        p = D.gradient_pair(model, fw, tape, aux)
        assert all(not g.any() for g in p.grad_inv.values()) == expect_zero
        assert D.conflict_report(p).counted == 0


def test_measure_conflict_is_pure():
    model = nn.init_model(TINY, 1, [TINY.penultimate])
    ds, _ = tiny_splits()
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    x, y = ds.images[:8], ds.labels[:8]
    r = D.measure_conflict(model, x, np.clip(x + 0.02, 0, 1), y, L.LossAssembly("V0", capture_tags=(TINY.penultimate,)))
    assert -1 <= r.global_cosine <= 1 and r.counted > 0
    for k, v in model.state_arrays().items():
        assert np.array_equal(v, before[k])


# -- gradient norm ------------------------------------------------------------------


def test_gradient_norm_examples():
    assert D.loss_gradient_norm({"a": np.zeros(3), "b": np.zeros((2, 2))}) == 0.0
    assert D.loss_gradient_norm({"w": np.array([3.0, 4.0])}) == 5.0
    flat = np.concatenate([v.reshape(-1) for v in GRADS.values()])
    assert D.loss_gradient_norm(GRADS) == pytest.approx(np.linalg.norm(flat), abs=1e-12)
    summed = np.concatenate([(2 * v).reshape(-1) for v in GRADS.values()])
    assert D.loss_gradient_norm(pair(GRADS, GRADS)) == pytest.approx(np.linalg.norm(summed), abs=1e-12)


# -- feature space instruments ------------------------------------------------------


@pytest.fixture(scope="module")
def model_and_data():
    ds, _ = tiny_splits()
    model = nn.init_model(TINY, 2, [TINY.penultimate])
    nn.forward(model, ds.images[:32], Branch.MAIN, Mode.TRAIN)
    nn.forward(model, ds.images[32:64], Branch.AUX, Mode.TRAIN)
    return model, ds


def test_feature_distance_zero_ball(model_and_data):
    model, ds = model_and_data
    d = D.feature_distance(model, ds.images[:10], ds.labels[:10], AttackConfig(epsilon=0.0))
    assert d == 0.0


def test_feature_distance_duplicates_and_manual_oracle(model_and_data):
    model, ds = model_and_data
    atk = AttackConfig(epsilon=8 / 255, iterations=0, random_init=False)
    x = np.repeat(ds.images[:1], 2, axis=0)
    z, za = D.penultimate_pair(model, x, ds.labels[[0, 0]], atk)
    assert np.array_equal(z[0], z[1]) and np.array_equal(za[0], za[1])
    # manual composition: two eval forwards on a fixed perturbation
    atk = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=3, seed=4)
    x, y = ds.images[:2], ds.labels[:2]
    x_adv = pgd(model, x, y, atk, np.random.default_rng(9))
    _, rc = nn.forward(model, x, Branch.AUX, Mode.EVAL, [TINY.penultimate])
    _, ra = nn.forward(model, x_adv, Branch.MAIN, Mode.EVAL, [TINY.penultimate])
    manual = np.mean(np.linalg.norm(rc[TINY.penultimate].data - ra[TINY.penultimate].data, axis=1))
    got = D.feature_distance(model, x, y, atk, Branch.AUX, np.random.default_rng(9))
    assert got == pytest.approx(manual, abs=1e-12)


def test_feature_instruments_are_pure(model_and_data):
    model, ds = model_and_data
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    D.feature_distance(model, ds.images[:8], ds.labels[:8], AttackConfig(iterations=2))
    D.representation_similarity(model, ds.subset(np.arange(20)), AttackConfig(iterations=2))
    for k, v in model.state_arrays().items():
        assert np.array_equal(v, before[k])


def test_similarity_zero_ball_and_distance_link(model_and_data):
    model, ds = model_and_data
    sub = ds.subset(np.arange(30))
    assert D.representation_similarity(model, sub, AttackConfig(epsilon=0.0)) == pytest.approx(1.0, abs=1e-12)
    atk = AttackConfig(iterations=3, seed=2)
    sim = D.representation_similarity(model, sub, atk, batch_size=30)
    z, za = D.penultimate_pair(model, sub.images, sub.labels, atk, rng=np.random.default_rng([2, 0]))
    assert sim == pytest.approx(1.0 - float(L.cosine_distance(z, za).data), abs=1e-10)
    assert -1 <= sim <= 1


def test_row_cosines_hand_case():
    u = np.array([[1.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    v = np.array([[0.0, 3.0], [2.0, 2.0], [-1.0, 0.0]])
    np.testing.assert_allclose(D._row_cosines(u, v), [0.0, 1.0, -1.0], atol=1e-12)


def test_drift_examples():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 4))
    assert D.representation_drift(z, z) == pytest.approx(0.0, abs=1e-12)
    assert D.representation_drift(z, -z) == pytest.approx(2.0, abs=1e-12)
    w = rng.normal(size=(6, 4))
    direct = np.mean([1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in zip(z, w)])
    assert D.representation_drift(z, w) == pytest.approx(direct, abs=1e-12)
    with pytest.raises(D.DiagnosticsError):
        D.representation_drift(z, w[:5])


# -- BN statistics ------------------------------------------------------------------


def test_bn_variance_examples():
    assert D.bn_stat_variance([[np.full(5, 0.3)]]) == [0.0]
    assert D.bn_stat_variance([[np.array([0.0, 1.0])]]) == [0.25]
    v = np.random.default_rng(0).normal(size=8)
    assert D.bn_stat_variance([v])[0] == pytest.approx(((v - v.mean()) ** 2).sum() / 8, abs=1e-12)


def test_bn_variance_averages_snapshots_and_temporal_mode():
    snaps = np.array([[0.0, 2.0], [1.0, 1.0]])
    assert D.bn_stat_variance([snaps]) == [0.5]
    assert D.bn_stat_variance([snaps], "temporal") == [0.25]
    with pytest.raises(D.DiagnosticsError):
        D.bn_stat_variance([snaps], "spatial")


def test_bn_running_means_keys():
    model = nn.init_model(TINY, 0)
    keys = D.bn_running_means(model)
    assert set(keys) == {(tag, b.value) for tag in model.bns for b in Branch}


# -- records --------------------------------------------------------------------------


def test_record_shape_is_json_line():
    rec = D.record(3, "bn_stat_variance", "stage1.block1", "aux", value=0.25)
    assert json.loads(json.dumps(rec)) == {"epoch": 3, "instrument": "bn_stat_variance",
                                           "layer": "stage1.block1", "branch": "aux", "value": 0.25}
    assert set(D.record(0, "loss_gradient_norm", value=1.0)) == {"epoch", "instrument", "value"}


def test_probe_indices_fixed_and_sorted():
    a, b = D.probe_indices(100, 64, 3), D.probe_indices(100, 64, 3)
    assert np.array_equal(a, b) and len(set(a)) == 64 and np.all(np.diff(a) > 0)
    assert len(D.probe_indices(10, 64)) == 10


def test_mean_over():
    recs = [D.record(0, "x", value=1.0), D.record(1, "x", value=3.0), D.record(1, "y", value=9.0)]
    assert D.mean_over(recs, "x") == 2.0
    assert np.isnan(D.mean_over(recs, "z"))


def test_symmetric_trades_conflicts_more_than_asymmetric(trained_tiny):
    model, train_ds, _ = trained_tiny
    x, y = train_ds.images[:64], train_ds.labels[:64]
    x_adv = pgd(model, x, y, AttackConfig(iterations=5, seed=1))
    asym = L.LossAssembly("AsymTRADES")
    sym = L.LossAssembly("AsymTRADES", term="full", split_bn=False)
    a = D.measure_conflict(model, x, x_adv, y, asym).global_cosine
    s = D.measure_conflict(model, x, x_adv, y, sym).global_cosine
    assert s < a - 0.1
