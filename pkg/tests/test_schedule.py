import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowfast import numcore as nc
from slowfast.model import ModelConfig, ParamTag, build_model
from slowfast.schedule import (P1, P2, LossWindow, PhaseState, PolicyConfig, ScheduleConfigError,
                               SlowFastScheduler, WeightSetAssignment, assign_weight_sets, in_phase_one,
                               layer_split, multiplier_for, noisytune_perturb, phi, r_multiplier)


def tiny(num_layers=6, seed=0):
    return build_model(ModelConfig(num_layers=num_layers, hidden=8, num_heads=2, ff_width=16,
                                   vocab_size=16, max_len=8), seed)


def filled(values, w):
    win = LossWindow(w)
    for v in values:
        win.observe(v)
    return win


def tag(layer, sub):
    return ParamTag(f"layer{layer}.{sub}.x", layer, sub)


# ---- loss window / phi / R ---------------------------------------------------

def test_constant_window_sums():
    win = filled([1.0] * 200, 100)
    assert win.recent_sum == 100 and win.prior_sum == 100
    assert phi(win) == 1.0


def test_step_down_window_sums():
    win = filled([2.0] * 100 + [1.0] * 100, 100)
    assert win.recent_sum == 100 and win.prior_sum == 200
    assert phi(win) == 0.5


def test_window_evicts_oldest_and_counts():
    win = filled([5.0] + [1.0] * 40, 20)
    assert win.count == 41 and win.prior_sum == 20.0


def test_zero_recent_gives_zero_phi():
    assert phi(filled([1.0] * 3 + [0.0] * 3, 3)) == 0.0


def test_insufficient_history():
    win = filled([1.0] * 39, 20)
    assert not win.full
    with pytest.raises(ValueError, match="phi needs"):
        phi(win)


def test_zero_prior_sum_rejected():
    with pytest.raises(ValueError, match="positive"):
        phi(filled([0.0] * 4, 2))


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_non_finite_loss_rejected(bad):
    with pytest.raises(nc.NumericalError):
        LossWindow(3).observe(bad)


@pytest.mark.parametrize("p,r,k", [(1.0, 3, 0.0), (0.0, 3, 1.0), (0.5, 3, 0.875), (2.0, 3, 0.0), (0.5, 1, 0.5)])
def test_r_multiplier(p, r, k):
    assert r_multiplier(p, r) == k


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(1, 6))
def test_r_is_monotone_and_bounded(a, b, r):
    lo, hi = sorted((a, b))
    assert r_multiplier(lo, r) >= r_multiplier(hi, r)
    assert 0.0 <= r_multiplier(a, r) <= 1.0
    if a >= 1:
        assert r_multiplier(a, r) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=80), st.integers(1, 10))
def test_window_sums_match_resummation(values, w):
    win = filled(values, w)
    if len(values) >= 2 * w:
        tail = values[-2 * w:]
        assert win.prior_sum == math.fsum(tail[:w])
        assert win.recent_sum == math.fsum(tail[w:])


# ---- phase -------------------------------------------------------------------

def test_steep_drop_is_phase_one():
    state = PhaseState(tau=0.1)
    assert in_phase_one(filled([3.0] * 10 + [1.0] * 10, 10), state)
    assert state.phase == P1


def test_flat_is_phase_two_and_latches():
    state = PhaseState(tau=0.1)
    assert not in_phase_one(filled([1.0] * 20, 10), state)
    assert state.phase == P2
    assert not in_phase_one(filled([3.0] * 10 + [1.0] * 10, 10), state)


def test_bootstrap_is_phase_one():
    assert in_phase_one(filled([1.0] * 5, 10), PhaseState())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=120), st.integers(1, 8), st.floats(-0.5, 0.5))
def test_phase_is_a_prefix(losses, w, tau):
    sched = SlowFastScheduler(PolicyConfig(window_size=w, tau=tau), assign_weight_sets(2, []))
    phases = []
    for v in losses:
        sched.observe(v)
        phases.append(sched.phase == P1)
    k = phases.index(False) if False in phases else len(phases)
    assert all(phases[:k]) and not any(phases[k:])
    assert all(phases[:min(2 * w - 1, len(phases))])


# ---- weight sets -------------------------------------------------------------

def _layers(assign, which, sub=None):
    return sorted({t.layer_index for t in getattr(assign, which) if sub is None or t.sublayer == sub})


def test_twelve_layer_sets():
    params = tiny(12)
    a = assign_weight_sets(12, params.tags)
    assert _layers(a, "s1") == list(range(1, 11))
    assert _layers(a, "s2") == [1, 2, 3, 4] and {t.sublayer for t in a.s2} == {"feed_forward"}
    assert _layers(a, "v1") == [11, 12]
    assert _layers(a, "v2") == [11, 12] and {t.sublayer for t in a.v2} == {"attention"}
    stack = [t for t in params.tags if t.layer_index is not None]
    assert a.s1 | a.v1 == set(stack)
    assert len(a.s2) == len([t for t in stack if t.layer_index <= 4 and t.sublayer == "feed_forward"])


def test_six_layer_sets():
    a = assign_weight_sets(6, tiny(6).tags)
    assert _layers(a, "s1") == [1, 2, 3, 4, 5]
    assert _layers(a, "s2", "feed_forward") == [1, 2] == _layers(a, "s2")
    assert _layers(a, "v1") == [6] and _layers(a, "v2", "attention") == [6] == _layers(a, "v2")


def test_two_layer_sets():
    a = assign_weight_sets(2, tiny(2).tags)
    assert _layers(a, "s1") == [1] and _layers(a, "s2") == [1]
    assert _layers(a, "v1") == [2] and _layers(a, "v2") == [2]


def test_embedding_excluded_unless_requested():
    tags = tiny(6).tags
    assert all(t.layer_index is not None for t in assign_weight_sets(6, tags).s1)
    with_emb = assign_weight_sets(6, tags, include_embedding=True)
    assert any(t.sublayer == "embedding" for t in with_emb.s1)


def test_one_layer_rejected():
    with pytest.raises(ScheduleConfigError):
        layer_split(1)


@pytest.mark.parametrize("num_layers", range(2, 25))
def test_set_algebra_for_every_depth(num_layers):
    tags = [tag(i, s) for i in range(1, num_layers + 1) for s in ("attention", "feed_forward")]
    a = assign_weight_sets(num_layers, tags)
    assert a.s2 <= a.s1 and a.v2 <= a.v1 and not (a.s1 & a.v1)
    assert a.s1 and a.s2 and a.v1 and a.v2


def test_assignment_invariants_enforced():
    t1, t2 = tag(1, "attention"), tag(2, "attention")
    with pytest.raises(ScheduleConfigError, match="subset"):
        WeightSetAssignment(frozenset({t1}), frozenset({t2}), frozenset(), frozenset())
    with pytest.raises(ScheduleConfigError, match="disjoint"):
        WeightSetAssignment(frozenset({t1}), frozenset(), frozenset({t1}), frozenset())


# ---- multipliers -------------------------------------------------------------

@pytest.fixture
def twelve():
    return assign_weight_sets(12, [tag(i, s) for i in range(1, 13) for s in ("attention", "feed_forward")])


def test_multiplier_examples(twelve):
    cfg = PolicyConfig()
    ff3, top_att = tag(3, "feed_forward"), tag(12, "attention")
    assert multiplier_for(ff3, P1, None, cfg, False, twelve) == 0.01
    assert multiplier_for(top_att, P2, 1.0, cfg, True, twelve) == 10.0
    assert multiplier_for(top_att, P1, None, cfg, True, twelve) == 1.0
    assert multiplier_for(ff3, P2, 0.5, cfg, True, twelve) == 0.875


def test_multiplier_respects_method_flags(twelve):
    ff3, top_att = tag(3, "feed_forward"), tag(12, "attention")
    off = PolicyConfig(slow=False, fast=False)
    for t in (ff3, top_att):
        for ph in (P1, P2):
            assert multiplier_for(t, ph, 0.5, off, True, twelve) == 1.0
    assert multiplier_for(top_att, P2, 0.5, PolicyConfig(), False, twelve) == 1.0


def test_overlapping_sets_are_a_configuration_error():
    t = tag(1, "attention")
    broken = object.__new__(WeightSetAssignment)
    for name, value in dict(s1=frozenset({t}), s2=frozenset(), v1=frozenset({t}), v2=frozenset()).items():
        object.__setattr__(broken, name, value)
    with pytest.raises(ScheduleConfigError, match="both"):
        multiplier_for(t, P1, None, PolicyConfig(), False, broken)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.sampled_from(["attention", "feed_forward"]), st.sampled_from([P1, P2]),
       st.floats(0, 3), st.booleans(), st.booleans(), st.booleans())
def test_multiplier_range(layer, sub, phase, p, active, slow, fast):
    cfg = PolicyConfig(slow=slow, fast=fast)
    assign = assign_weight_sets(12, [tag(i, s) for i in range(1, 13) for s in ("attention", "feed_forward")])
    k = multiplier_for(tag(layer, sub), phase, p, cfg, active, assign)
    assert k in (cfg.c1, cfg.c2, 1.0) or 0.0 <= k <= 1.0
    if k == cfg.c2:
        assert phase == P2
    if k == cfg.c1 and phase == P2:
        assert 0.0 <= k <= 1.0


@pytest.mark.parametrize("kw", [dict(c1=-0.1), dict(c1=1.5), dict(c2=0.5), dict(r_exp=0), dict(r_exp=1.5),
                                dict(tau=float("nan")), dict(window_size=0), dict(policy4_mode="sometimes")])
def test_policy_config_validation(kw):
    with pytest.raises(ScheduleConfigError):
        PolicyConfig(**kw)


def test_policy4_modes():
    a = assign_weight_sets(2, [])
    assert not SlowFastScheduler(PolicyConfig(policy4_mode="off"), a).policy4_active(True)
    assert SlowFastScheduler(PolicyConfig(policy4_mode="always"), a).policy4_active(False)
    gated = SlowFastScheduler(PolicyConfig(policy4_mode="cka_gated"), a)
    assert gated.policy4_active(True) and not gated.policy4_active(False)


# ---- scheduled steps -----------------------------------------------------------

def _grads(params, seed):
    rng = np.random.default_rng(seed)
    for t in params:
        t.grad = rng.normal(size=t.shape)


def _run(config, steps=30, force=None):
    params = tiny(6)
    trainable = params.trainable()
    sched = SlowFastScheduler(config, assign_weight_sets(6, params.tags))
    if force:
        sched.force(force(sched), 0.0)
    state = nc.AdamState()
    for i in range(steps):
        _grads(trainable, i)
        sched.scheduled_step(trainable, state, 3.0 / (1 + i), 1e-2, warmup=nc.linear_warmup(3))
    return params, sched


def _plain(steps=30):
    params = tiny(6)
    trainable = params.trainable()
    state = nc.AdamState()
    for i in range(steps):
        _grads(trainable, i)
        nc.adam_step(trainable, [t.grad for t in trainable], state, 1e-2, warmup=nc.linear_warmup(3))
    return params


def test_all_unit_multipliers_match_plain_training():
    neutral = PolicyConfig(c1=1.0, c2=1.0, tau=-math.inf, window_size=5)
    got, sched = _run(neutral)
    assert sched.phase == P1
    ref = _plain()
    for name in ref:
        assert np.array_equal(got[name].data, ref[name].data)


def test_zero_c1_freezes_slow_set_through_phase_one():
    cfg = PolicyConfig(c1=0.0, tau=-math.inf, window_size=5)
    got, sched = _run(cfg)
    init = tiny(6)
    for t in sched.assignment.s1:
        assert np.array_equal(got[t.name].data, init[t.name].data)
    moved = [t for t in sched.assignment.v1 if not np.array_equal(got[t.name].data, init[t.name].data)]
    assert moved


def test_forced_zero_freezes_tensor():
    target = lambda s: [t for t in s.assignment.v1 if t.sublayer == "feed_forward"]
    got, sched = _run(PolicyConfig(), force=target)
    init = tiny(6)
    for t in target(sched):
        assert np.array_equal(got[t.name].data, init[t.name].data)


def test_loss_is_observed_before_multipliers():
    cfg = PolicyConfig(window_size=2, tau=0.1)
    sched = SlowFastScheduler(cfg, assign_weight_sets(6, tiny(6).tags))
    params = tiny(6).trainable()
    for t in params:
        t.grad = np.zeros(t.shape)
    state = nc.AdamState()
    ks = None
    for loss in (1.0, 1.0, 1.0):
        ks = sched.scheduled_step(params, state, loss, 1e-3)
    assert sched.phase == P1 and 0.01 in ks
    ks = sched.scheduled_step(params, state, 1.0, 1e-3)
    assert sched.step == 4
    # the fourth loss fills the flat window and flips to P2 in the same step
    assert sched.phase == P2 and 0.01 not in ks


def test_group_independence_of_update_direction():
    a, _ = _run(PolicyConfig(slow=False, fast=False), steps=1)
    b, _ = _run(PolicyConfig(c1=0.5, tau=-math.inf), steps=1)
    init = tiny(6)
    assign = assign_weight_sets(6, init.tags)
    for name in init:
        tg = init[name].tag
        da = a[name].data - init[name].data
        db = b[name].data - init[name].data
        if tg in assign.s1:
            np.testing.assert_allclose(db, 0.5 * da, rtol=1e-12, atol=1e-18)
        else:
            assert np.array_equal(da, db)


def test_trace_rows_and_file(tmp_path):
    _, sched = _run(PolicyConfig(window_size=5), steps=30)
    assert [row[0] for row in sched.trace] == [5, 10, 15, 20, 25, 30]
    assert sched.trace[0][1] == P1 and math.isnan(sched.trace[0][2])
    assert sched.trace[0][3] == 0.01
    path = tmp_path / "trace.csv"
    sched.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,phase,phi,K_s1,K_s2,K_v2" and len(lines) == 7


# ---- NoisyTune -------------------------------------------------------------

def test_noisytune_zero_is_identity():
    p = tiny(2)
    q = noisytune_perturb(p, 0.0, seed=1)
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)


def test_noisytune_bound_and_determinism():
    p = tiny(2)
    q1, q2 = noisytune_perturb(p, 0.15, 4), noisytune_perturb(p, 0.15, 4)
    changed = 0
    for k in p:
        d = q1[k].data - p[k].data
        assert np.array_equal(q1[k].data, q2[k].data)
        if p[k].data.ndim >= 2 and not k.startswith("head."):
            assert np.abs(d).max() <= 0.15 * p[k].data.std() + 1e-15
            changed += 1
        else:
            assert not d.any()
    assert changed > 0


def test_noisytune_rejects_negative():
    with pytest.raises(ValueError):
        noisytune_perturb(tiny(2), -0.1)
