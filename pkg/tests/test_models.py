import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safelab import demos, seeding
from safelab.approx import Mlp
from safelab.dataset import Dataset
from safelab.env import EpisodeRecord, Transition
from safelab.models import (ModelConfig, TrainingRefused, gaussian_nll, load_bundle,
                            safe_set_target, save_bundle, train_balanced, train_offline,
                            ts1_rollout, update_online, value_offline_target,
                            value_offline_targets, value_online_td_loss)
from safelab.approx import Optimizer

from conftest import SMALL_MODELS

LOG_2PI = math.log(2 * math.pi)


def _episode(n, final=-1.0, c=False):
    trs = [Transition(np.zeros(2), np.zeros(2), -1.0 if i < n - 1 else final, np.zeros(2),
                      c and i == n - 1, i == n - 1) for i in range(n)]
    return EpisodeRecord.from_transitions(trs)


def test_nll_at_mode():
    d = 3
    loss, _, _ = gaussian_nll(np.zeros((1, d)), np.zeros((1, d)), np.zeros((1, d)))
    assert loss == pytest.approx(d / 2 * LOG_2PI)
    doubled, _, _ = gaussian_nll(np.zeros((1, d)), np.full((1, d), math.log(2)), np.zeros((1, d)))
    assert doubled - loss == pytest.approx(d / 2 * math.log(2))


def test_value_offline_target_examples():
    ep = _episode(6)
    # from index 2, rewards r_3, r_4, r_5 remain
    assert value_offline_target(ep, 2, 0.99) == pytest.approx(-2.940399)
    goal = _episode(4, final=0.0)
    assert value_offline_target(goal, 4, 0.99) == 0.0
    assert value_offline_target(ep, 0, 0.0) == 0.0
    with pytest.raises(IndexError):
        value_offline_target(ep, 7, 0.99)


def test_value_targets_vectorised_match_scalar():
    ep = _episode(9, c=True)
    vec = value_offline_targets(ep, 0.97, horizon=20)
    for t in range(len(ep) + 1):
        assert vec[t] == pytest.approx(value_offline_target(ep, t, 0.97, horizon=20))


def test_td_loss_example():
    net, target = Mlp((1, 1)), Mlp((1, 1))
    for p in net.params:
        p[...] = 0.0
    target.params[0][...] = 0.0
    target.params[1][...] = -10.0
    loss, _ = value_online_td_loss(net, target, np.zeros((1, 1)), [-1.0], np.zeros((1, 1)),
                                   [False], 0.99)
    assert loss == pytest.approx(118.81)
    target.params[1][...] = 0.0
    net.params[1][...] = -1.0
    loss, _ = value_online_td_loss(net, target, np.zeros((1, 1)), [-1.0], np.zeros((1, 1)),
                                   [False], 0.99)
    assert loss == pytest.approx(0.0)


def test_safe_set_target_examples():
    assert safe_set_target(1.0, 0.3, 0.0) == 1.0
    assert safe_set_target(0.0, 0.3, 1.0) == pytest.approx(0.3)
    assert safe_set_target(0.0, 0.3, 0.0) == 0.0
    assert safe_set_target(0.0, 0.3, 1.0, terminal=True) == 0.0


@settings(max_examples=100, deadline=None)
@given(success=st.sampled_from([0.0, 1.0]), succ=st.floats(0, 1), g=st.floats(0, 1))
def test_safe_set_target_max_dominance(success, succ, g):
    t = safe_set_target(success, g, succ)
    assert t >= success and t >= g * succ - 1e-12 and 0.0 <= t <= 1.0


def test_ts1_single_member_zero_variance_is_deterministic():
    class Linear:
        dyn = [None]

        def dyn_member(self, m, s, a):
            return s + a, np.zeros_like(s)

    acts = np.ones((5, 2)) * 0.5
    p = ts1_rollout(Linear(), np.zeros(2), acts, 7, np.random.default_rng(0))
    assert p.shape == (7, 6, 2)
    assert np.allclose(p[:, -1], 2.5)
    assert np.allclose(p, p[0])


def test_ts1_seeded(small_bundle):
    acts = np.random.default_rng(0).uniform(-1, 1, size=(4, 2))
    a = ts1_rollout(small_bundle, [10, 37.5], acts, 5, seeding.rng(3))
    b = ts1_rollout(small_bundle, [10, 37.5], acts, 5, seeding.rng(3))
    assert np.array_equal(a, b)


def test_ts1_learns_linear_system():
    # y <- y + a on a wide grid of states and actions, no obstacles involved
    rng = np.random.default_rng(0)
    ds = Dataset()
    for k in range(60):
        s = rng.uniform([5, 5], [95, 70])
        trs = []
        for i in range(20):
            a = rng.uniform(-1, 1, size=2)
            trs.append(Transition(s, a, -1.0, s + a, False, i == 19))
            s = s + a
        ds.add(EpisodeRecord.from_transitions(trs, origin="offline_gr"))
    from safelab.models import build_bundle, train_dynamics
    cfg = ModelConfig(dyn_members=3, dyn_hidden=(32, 32))
    bundle = build_bundle(ds, cfg, rng)
    train_dynamics(bundle, ds.flatten(), 1500, rng)
    s0 = np.array([40.0, 30.0])
    acts = np.array([[1.0, 0.5], [0.5, -1.0], [-0.2, 0.3], [1.0, 1.0], [0.0, -0.5]])
    parts = ts1_rollout(bundle, s0, acts, 20, rng)
    assert np.linalg.norm(parts[:, -1].mean(axis=0) - (s0 + acts.sum(axis=0))) < 0.1


def test_balanced_classifier_separable_blobs():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.5, size=(200, 2)), rng.normal(2, 0.5, size=(20, 2))])
    y = np.r_[np.zeros(200, bool), np.ones(20, bool)]
    net = Mlp((2, 16, 1), "sigmoid", rng=rng)
    train_balanced(net, Optimizer(net, 1e-2), x, y, 300, 64, rng)
    xt = np.vstack([rng.normal(-2, 0.5, size=(500, 2)), rng.normal(2, 0.5, size=(500, 2))])
    yt = np.r_[np.zeros(500), np.ones(500)]
    assert np.mean((net.predict(xt)[:, 0] > 0.5) == yt) >= 0.99
    with pytest.raises(TrainingRefused):
        train_balanced(net, Optimizer(net), x, np.zeros(220, bool), 1, 8, rng)


def test_train_offline_refusals(spb):
    with pytest.raises(TrainingRefused):
        train_offline(Dataset(), SMALL_MODELS, np.random.default_rng(0))
    only_cv = demos.generate_demos(spb, 0, 5, seed=0)
    with pytest.raises(TrainingRefused):
        train_offline(only_cv, SMALL_MODELS, np.random.default_rng(0))


def test_trained_bundle_probes(small_bundle, spb_demos, spb):
    b = spb_demos.flatten()
    pred = np.mean([small_bundle.dyn_member(m, b.states, b.actions)[0]
                    for m in range(len(small_bundle.dyn))], axis=0)
    assert np.mean(np.sum((pred - b.next_states) ** 2, axis=1)) < 0.05
    assert small_bundle.constraint_fn([[50.0, 37.5]])[0] > 0.5
    assert small_bundle.goal_fn([spb.goal])[0] > 0.5
    v = small_bundle.value_fn([spb.start, [85.0, 37.5]])
    assert v[0] < v[1]


def test_bundle_round_trip(small_bundle, tmp_path):
    save_bundle(small_bundle, tmp_path / "m", config_hash="abc")
    back, manifest = load_bundle(tmp_path / "m")
    assert manifest["config_hash"] == "abc"
    for name, nets in small_bundle.networks().items():
        for a, b in zip(nets, back.networks()[name]):
            assert all(pa.tobytes() == pb.tobytes() for pa, pb in zip(a.params, b.params))
    s = np.array([[20.0, 10.0], [50.0, 60.0]])
    assert np.array_equal(back.value_fn(s), small_bundle.value_fn(s))


def test_training_is_seed_deterministic(spb):
    ds = demos.generate_demos(spb, 3, 3, seed=0)
    cfg = ModelConfig(dyn_members=2, dyn_hidden=(8,), value_members=1, value_hidden=(8,),
                      classifier_hidden=(8,), dyn_epochs=2, value_epochs=2, safe_epochs=2,
                      classifier_epochs=2, online_steps=3)
    a, _ = train_offline(ds, cfg, seeding.rng(5))
    b, _ = train_offline(ds, cfg, seeding.rng(5))
    update_online(a, ds, seeding.rng(6))
    update_online(b, ds, seeding.rng(6))
    for name, nets in a.networks().items():
        for x, y in zip(nets, b.networks()[name]):
            assert all(np.array_equal(p, q) for p, q in zip(x.params, y.params))


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-1e4, 1e4), y=st.floats(-1e4, 1e4))
def test_sigmoid_outputs_in_unit_interval(small_bundle, x, y):
    s = [[x, y]]
    for fn in (small_bundle.safe_fn, small_bundle.constraint_fn, small_bundle.goal_fn):
        assert 0.0 <= fn(s)[0] <= 1.0
