import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowfast import numcore as nc
from slowfast.model import ModelConfig, build_model, forward
from slowfast.probe import (CKA_HEADER, CkaRecord, InterventionPlan, MetricsWriter, apply_freeze, apply_reinit,
                            check_plans, cka_slope_gate, gap_header, last_k_layers_plan, least_squares_slope,
                            linear_cka, performance_gap, select_tags, track_cka)
from slowfast.schedule import PolicyConfig, SlowFastScheduler, assign_weight_sets

CFG = ModelConfig(num_layers=4, hidden=8, num_heads=2, ff_width=16, vocab_size=20, max_len=10)


def tiny(seed=0):
    return build_model(CFG, seed)


def ids(seed=0, n=6, t=8):
    rng = np.random.default_rng(seed)
    out = rng.integers(4, CFG.vocab_size, size=(n, t))
    out[:, 0] = 1
    out[0, 6:] = 0
    return out


def cka_oracle(x, y):
    """HSIC-style double loop over example pairs with centred Gram matrices."""
    n = len(x)

    def centred_gram(m):
        cols = len(m[0])
        means = [sum(row[c] for row in m) / n for c in range(cols)]
        c = [[row[k] - means[k] for k in range(cols)] for row in m]
        return [[sum(c[i][k] * c[j][k] for k in range(cols)) for j in range(n)] for i in range(n)]

    kx, ky = centred_gram(x), centred_gram(y)
    xy = xx = yy = 0.0
    for i in range(n):
        for j in range(n):
            xy += kx[i][j] * ky[i][j]
            xx += kx[i][j] * kx[i][j]
            yy += ky[i][j] * ky[i][j]
    return xy / math.sqrt(xx * yy)


# ---- CKA -----------------------------------------------------------------------

def test_cka_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(64, 16)), rng.normal(size=(64, 16))
    assert abs(linear_cka(x, y) - cka_oracle(x.tolist(), y.tolist())) < 1e-10


def test_cka_oracle_on_different_widths():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 9))
    assert abs(linear_cka(x, y) - cka_oracle(x.tolist(), y.tolist())) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 40), st.integers(1, 12), st.floats(0.01, 100))
def test_cka_invariances(seed, n, d, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = rng.normal(size=(n, d)) + 0.3 * x
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    assert abs(linear_cka(x, x) - 1.0) < 1e-9
    assert abs(linear_cka(x, x @ q) - 1.0) < 1e-9
    assert abs(linear_cka(x, scale * x) - 1.0) < 1e-9
    c = linear_cka(x, y)
    assert -1e-9 <= c <= 1 + 1e-9
    assert abs(c - linear_cka(y, x)) < 1e-9
    assert abs(c - linear_cka(x @ q, scale * y)) < 1e-9


def test_cka_degenerate_and_shape_errors():
    with pytest.raises(ValueError, match="degenerate activations"):
        linear_cka(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError, match=r"\(5, 3\)"):
        linear_cka(np.ones((5, 3)), np.ones((4, 3)))


def test_track_cka_self_similarity_is_one():
    p = tiny()
    recs = track_cka(p, p.copy(), ids(), [1, 2, 3, 4], step=9)
    assert [r.layer_index for r in recs] == [1, 2, 3, 4]
    assert all(abs(r.similarity - 1.0) < 1e-12 and r.step == 9 for r in recs)


def test_track_cka_drops_after_reinit():
    p = tiny()
    plan = InterventionPlan("reinitialize", select_tags(p, layers=[2]))
    q = apply_reinit(plan, p, seed=123)
    recs = {r.layer_index: r.similarity for r in track_cka(p, q, ids(), [1, 2])}
    assert recs[1] == pytest.approx(1.0, abs=1e-12)
    assert recs[2] < 0.9


def test_track_cka_rejects_mismatched_models():
    other = build_model(ModelConfig(num_layers=2, hidden=8, num_heads=2, ff_width=16, vocab_size=20), 0)
    with pytest.raises(ValueError, match="config"):
        track_cka(tiny(), other, ids(), [1])


# ---- slope gate ------------------------------------------------------------------

def recs(series, layers=(5, 6)):
    return [CkaRecord(i, layer, v) for i, v in enumerate(series) for layer in layers]


def test_gate_examples():
    assert cka_slope_gate(recs([1.0, 0.9, 0.8, 0.7, 0.6]), window=5)
    assert not cka_slope_gate(recs([0.8] * 6), window=5)
    assert not cka_slope_gate(recs([1.0, 0.9, 0.9, 0.9]), window=3)
    assert least_squares_slope([0.9, 0.9, 0.9]) == 0.0


def test_gate_needs_two_points_and_uses_top_layers():
    assert not cka_slope_gate([])
    assert not cka_slope_gate(recs([0.5]))
    mixed = recs([0.9, 0.8, 0.7], layers=(5, 6)) + recs([0.1, 0.5, 0.9], layers=(1,))
    assert cka_slope_gate(mixed, window=3)
    assert not cka_slope_gate(mixed, window=3, layers=[1])


def test_gate_smoothing():
    noisy = [1.0, 0.7, 0.95, 0.65, 0.9, 0.6, 0.85]
    assert cka_slope_gate(recs(noisy), window=3, smoothing=3)
    assert not cka_slope_gate(recs(noisy), window=2, smoothing=1)


def test_least_squares_slope_matches_polyfit():
    y = np.random.default_rng(1).normal(size=9)
    assert least_squares_slope(y) == pytest.approx(np.polyfit(np.arange(9), y, 1)[0], abs=1e-12)


# ---- gap -----------------------------------------------------------------------

def test_gap_examples():
    assert performance_gap({"en": 84.8, "de": 74.0}, "en").gap == 10.8
    assert performance_gap({0: 70.0, 1: 70.0, 2: 70.0}, 0).gap == 0.0
    rec = performance_gap({0: 70.0, 1: 60.0, 2: 70.0}, 0, step=3)
    assert (rec.step, rec.source_metric, rec.non_source_mean, rec.gap) == (3, 70.0, 65.0, 5.0)


def test_gap_errors():
    with pytest.raises(KeyError):
        performance_gap({1: 5.0}, 0)
    with pytest.raises(ValueError):
        performance_gap({0: 5.0}, 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_gap_antisymmetry(a, b):
    assert performance_gap({0: a, 1: b}, 0).gap == -performance_gap({0: a, 1: b}, 1).gap


# ---- interventions ------------------------------------------------------------------

def test_plan_validation():
    p = tiny()
    with pytest.raises(ValueError):
        InterventionPlan("melt", select_tags(p, layers=[1]))
    with pytest.raises(ValueError, match="empty"):
        InterventionPlan("freeze", frozenset())
    a = InterventionPlan("freeze", select_tags(p, layers=[1]))
    b = InterventionPlan("reinitialize", select_tags(p, layers=[1], sublayers=["attention"]))
    assert a.applied_at == "throughout" and b.applied_at == "before_training"
    with pytest.raises(ValueError, match="more than one plan"):
        check_plans([a, b])


def test_reinit_determinism_and_locality():
    p = tiny()
    target = select_tags(p, layers=[1, 2], sublayers=["feed_forward"])
    plan = InterventionPlan("reinitialize", target)
    q1, q2 = apply_reinit(plan, p, 5), apply_reinit(plan, p, 5)
    for name in p:
        assert np.array_equal(q1[name].data, q2[name].data)
        same = np.array_equal(q1[name].data, p[name].data)
        if p[name].tag in target and p[name].data.ndim == 2:
            assert not same
        elif p[name].tag not in target:
            assert same


def test_reinit_everything_equals_fresh_build():
    p = tiny(seed=0)
    q = apply_reinit(InterventionPlan("reinitialize", frozenset(p.tags)), p, seed=42)
    fresh = tiny(seed=42)
    assert all(np.array_equal(q[k].data, fresh[k].data) for k in p)


def test_reinit_mid_training_rejected():
    p = tiny()
    with pytest.raises(ValueError, match="before step 1"):
        apply_reinit(InterventionPlan("reinitialize", select_tags(p, layers=[1])), p, 0, current_step=3)


def _train(params, plan=None, steps=5):
    sched = SlowFastScheduler(PolicyConfig(slow=False, fast=False), assign_weight_sets(4, params.tags))
    if plan is not None:
        apply_freeze(plan, sched, known_tags=params.tags)
    trainable = params.trainable()
    state = nc.AdamState()
    x = ids()
    for _ in range(steps):
        with nc.ComputationTape():
            logits, _ = forward(params, x, "mlm")
            loss = nc.cross_entropy(nc.reshape(logits, (-1, CFG.vocab_size)), x.reshape(-1))
            nc.backward(loss)
        sched.scheduled_step(trainable, state, loss.item(), 1e-2)
    return params


def test_freeze_keeps_targets_bit_identical():
    p = tiny()
    plan = InterventionPlan("freeze", select_tags(p, layers=[1, 2], sublayers=["feed_forward"]))
    trained = _train(p.copy(), plan)
    for name in p:
        same = np.array_equal(trained[name].data, p[name].data)
        assert same == (p[name].tag in plan.target)


def test_freeze_everything_keeps_output_constant():
    p = tiny()
    trained = _train(p.copy(), InterventionPlan("freeze", frozenset(p.tags)))
    with nc.no_grad():
        assert np.array_equal(forward(p, ids(), "mlm")[0].data, forward(trained, ids(), "mlm")[0].data)


def test_freeze_unknown_tag_is_named():
    p = tiny()
    stranger = select_tags(build_model(ModelConfig(num_layers=6, hidden=8, num_heads=2, ff_width=16,
                                                   vocab_size=20), 0), layers=[6])
    sched = SlowFastScheduler(PolicyConfig(), assign_weight_sets(4, p.tags))
    with pytest.raises(KeyError, match="layer6"):
        apply_freeze(InterventionPlan("freeze", stranger), sched, known_tags=p.tags)


def test_last_k_layers_plan():
    p = tiny()
    plan = last_k_layers_plan(p, 1)
    assert plan.kind == "freeze"
    assert {t.layer_index for t in plan.target} - {None} == {1, 2, 3}
    assert all(t.sublayer != "head" for t in plan.target)
    assert any(t.sublayer == "embedding" for t in plan.target)


# ---- metrics files ---------------------------------------------------------------

def test_metrics_writer_appends_with_single_header(tmp_path):
    path = tmp_path / "gap.csv"
    w = MetricsWriter(path, gap_header([0, 1]))
    w.append([20, 90.0, 70.5, 19.5])
    MetricsWriter(path, gap_header([0, 1])).append([40, 91.0, float("nan"), 1.0])
    assert path.read_text().splitlines() == ["step,lang0,lang1,gap", "20,90.0,70.5,19.5", "40,91.0,,1.0"]
    with pytest.raises(ValueError):
        w.append([1, 2])
    assert list(CKA_HEADER) == ["step", "layer", "similarity"]
