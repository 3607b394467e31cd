import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from prognet.checkpoint import to_bytes
from prognet.envs import N_ACTIONS
from prognet.network import LayerSpec, add_column, desk_layers, new_network, trainable_params
from prognet.trainer import (ENTROPY_COEFS, GRAD_CLIPS, LEARNING_RATES, LOG_COLUMNS, EnvBatch,
                             Hyper, RMSProp, TrainingDiverged, Trajectory, a2c_update,
                             clip_by_global_norm, collect_rollout, make_batch, n_step_returns,
                             sample_actions, sample_hyper, train)


class Bandit:
    """One state, two arms; arm 0 pays 1, arm 1 pays 0. Every step ends the episode."""
    obs_shape = (1, 2, 2)

    def reset(self, seed):
        return np.ones(self.obs_shape)

    def step(self, action):
        return np.ones(self.obs_shape), 1.0 if action == 0 else 0.0, True


def _bandit_net(seed=0):
    return new_network([LayerSpec.dense(4)], 2, seed, obs_shape=Bandit.obs_shape)


def _policy(net, obs):
    from prognet.network import forward
    return forward(net, net.n_columns, obs).policy.data


def _run_bandit(hyper, updates, seed=0):
    net = _bandit_net(seed)
    envs = EnvBatch([Bandit() for _ in range(hyper.n_workers)], seed)
    rng, opt = np.random.default_rng(seed), RMSProp(hyper.learning_rate)
    for _ in range(updates):
        a2c_update(net, 1, collect_rollout(net, 1, envs, hyper.n_step, rng), hyper, opt)
    return _policy(net, np.ones((1, *Bandit.obs_shape)))[0]


# ------------------------------------------------------------ hyper grid

def test_sample_hyper_is_deterministic_and_on_grid():
    assert sample_hyper(3) == sample_hyper(3)
    draws = [sample_hyper(s) for s in range(1000)]
    assert {h.learning_rate for h in draws} == set(LEARNING_RATES)
    assert {h.entropy_coef for h in draws} <= set(ENTROPY_COEFS)
    assert {h.grad_clip for h in draws} <= set(GRAD_CLIPS)
    assert all(h.gamma == 0.99 and h.n_step == 5 and h.value_coef == 0.5 for h in draws)


def test_sample_hyper_frequencies_within_five_sigma():
    n = 10_000
    draws = [sample_hyper(s) for s in range(n)]
    for field, choices in [("learning_rate", LEARNING_RATES), ("entropy_coef", ENTROPY_COEFS),
                           ("grad_clip", GRAD_CLIPS), ("alpha_init", (1.0, 0.1, 0.01))]:
        p = 1 / len(choices)
        sigma = math.sqrt(n * p * (1 - p))
        for c in choices:
            count = sum(getattr(h, field) == c for h in draws)
            assert abs(count - n * p) < 5 * sigma, (field, c, count)


# ------------------------------------------------------------ returns

def test_n_step_returns_hand_example():
    r = n_step_returns(np.array([[1.0], [0.0], [1.0]]), np.zeros((3, 1), bool), np.array([2.0]), 0.5)
    np.testing.assert_array_equal(r[:, 0], [1.5, 1.0, 2.0])


def _brute_force_returns(rewards, dones, bootstrap, gamma):
    out = []
    for t in range(len(rewards)):
        total, k, ended = 0.0, 0, False
        for u in range(t, len(rewards)):
            total += gamma ** k * rewards[u]
            k += 1
            if dones[u]:
                ended = True
                break
        if not ended:
            total += gamma ** k * bootstrap
        out.append(total)
    return out


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1.0, 0.0, 1.0]), st.booleans()), min_size=1, max_size=12),
       st.sampled_from([0.5, 0.25, 0.75]), st.sampled_from([-2.0, 0.0, 0.5, 3.0]))
def test_n_step_returns_match_per_episode_sums(steps, gamma, bootstrap):
    # dyadic discounts and integer rewards keep both routes exact
    rewards = np.array([[r] for r, _ in steps])
    dones = np.array([[d] for _, d in steps])
    got = n_step_returns(rewards, dones, np.array([bootstrap]), gamma)[:, 0]
    assert got.tolist() == _brute_force_returns(rewards[:, 0], dones[:, 0], bootstrap, gamma)


# ------------------------------------------------------------ rollouts

def test_sample_actions_follow_probabilities():
    p = np.array([0.2, 0.5, 0.3])
    rng = np.random.default_rng(0)
    a = sample_actions(np.tile(p, (30_000, 1)), rng)
    counts = np.bincount(a, minlength=3)
    chi2 = float(((counts - 30_000 * p) ** 2 / (30_000 * p)).sum())
    assert chi2 < stats.chi2.ppf(0.999, df=2)
    assert sample_actions(np.array([[0.0, 1.0, 0.0]] * 50), rng).tolist() == [1] * 50


def _one_hot_net(action):
    net = new_network(desk_layers(), N_ACTIONS, 0)
    p = net.column(1).params
    p["policy.W"][...] = 0.0
    p["policy.b"][...] = 0.0
    p["policy.b"][action] = 800.0  # softmax underflows to an exact one-hot
    return net


def test_one_hot_policy_gives_constant_actions():
    net = _one_hot_net(2)
    envs = make_batch("base", 4, seed=0)
    traj = collect_rollout(net, 1, envs, 6, np.random.default_rng(0))
    assert (traj.actions == 2).all()
    assert (traj.log_probs == 0.0).all() and (traj.entropies == 0.0).all()
    assert len(traj) <= 6 * 4


def test_rollout_bootstrap_is_zero_after_terminal():
    net = new_network(desk_layers(), N_ACTIONS, 1)
    net.column(1).params["value.b"][...] = 5.0  # make V visibly nonzero
    envs = make_batch("base", 16, seed=2)
    rng = np.random.default_rng(0)
    seen_done = seen_live = False
    for _ in range(10):
        traj = collect_rollout(net, 1, envs, 2, rng)
        last = traj.dones[-1]
        assert (traj.bootstrap[last] == 0.0).all()
        assert (traj.bootstrap[~last] != 0.0).all()
        seen_done |= last.any()
        seen_live |= (~last).any()
    assert seen_done and seen_live


def test_vectorised_batch_matches_one_by_one_stepping():
    from prognet.envs import CatchBatch, MiniCatch, TASKS, make_variant
    rng = np.random.default_rng(0)
    for task in TASKS:
        v = make_variant(task, 3)
        for kw in ({}, {"catch_limit": 3}, {"action_repeat": 4, "max_ticks": 6}):
            a, b = CatchBatch(v, 5, 9, **kw), EnvBatch([MiniCatch(v, **kw) for _ in range(5)], 9)
            assert np.array_equal(a.obs, b.obs)
            for _ in range(60):
                act = rng.integers(3, size=5)
                ra, da, fa = a.step(act)
                rb, db, fb = b.step(act)
                assert np.array_equal(ra, rb) and np.array_equal(da, db) and fa == fb
                assert np.array_equal(a.obs, b.obs)


# ------------------------------------------------------------ updates

def _fixed_traj(net, T=5, W=3, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(size=(T, W, 2, 16, 16))
    z = np.zeros((T, W))
    return Trajectory(obs, rng.integers(3, size=(T, W)), z.copy(), z.copy(), z.copy(), z.copy(),
                      np.zeros((T, W), bool), np.zeros(W))


def test_zero_advantage_uniform_policy():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    for name in ("policy.W", "policy.b", "value.W", "value.b"):
        net.column(1).params[name][...] = 0.0
    stats_ = a2c_update(net, 1, _fixed_traj(net), Hyper(), RMSProp(1e-3))
    assert stats_.policy_loss == 0.0
    assert stats_.value_loss == 0.0
    assert stats_.entropy == pytest.approx(math.log(N_ACTIONS), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 50))
def test_clip_contract(values, max_norm):
    grads = {f"g{i}": np.array([v, -v / 2]) for i, v in enumerate(values)}
    clipped, norm = clip_by_global_norm(grads, max_norm)
    after = math.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
    assert after <= max_norm + 1e-9
    assert norm == pytest.approx(math.sqrt(sum(1.25 * v * v for v in values)))


def test_update_clips_and_reports_norm():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    traj = _fixed_traj(net)
    traj.rewards[...] = 5.0
    s = a2c_update(net, 1, traj, Hyper(grad_clip=1e-3), RMSProp(1e-3))
    assert s.grad_norm > 1e-3
    assert s.clipped_norm <= 1e-3 + 1e-9


def test_update_touches_exactly_the_trainable_set():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    add_column(net, 1)
    before = {k: v.copy() for k, v in net.all_params().items()}
    traj = _fixed_traj(net)
    traj.rewards[...] = 1.0
    a2c_update(net, 2, traj, Hyper(), RMSProp(1e-3))
    changed = {k for k, v in net.all_params().items() if not np.array_equal(v, before[k])}
    assert changed and changed <= set(trainable_params(net))
    assert all(np.array_equal(net.get(k), before[k]) for k in before if k.startswith("c1/"))


def test_update_restricted_to_heads():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    heads = [k for k in net.all_params() if k.split("/")[1].startswith(("policy.", "value."))]
    before = {k: v.copy() for k, v in net.all_params().items()}
    traj = _fixed_traj(net)
    traj.rewards[...] = 1.0
    a2c_update(net, 1, traj, Hyper(), RMSProp(1e-3), params=heads)
    changed = {k for k, v in net.all_params().items() if not np.array_equal(v, before[k])}
    assert changed and changed <= set(heads)


def test_nan_aborts_with_diagnostic():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    traj = _fixed_traj(net)
    traj.rewards[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="trajectory"):
        a2c_update(net, 1, traj, Hyper(), RMSProp(1e-3))


def test_empty_trajectory_rejected():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    with pytest.raises(ValueError):
        a2c_update(net, 1, _fixed_traj(net, T=0), Hyper(), RMSProp(1e-3))


def test_bandit_converges():
    p = _run_bandit(Hyper(learning_rate=1e-3, entropy_coef=1e-3, n_workers=1), 2000)
    assert p[0] > 0.95


def test_large_entropy_coefficient_keeps_policy_near_uniform():
    p = _run_bandit(Hyper(learning_rate=1e-3, entropy_coef=10.0, n_workers=1), 2000)
    kl = float(np.sum(p * np.log(p / 0.5)))
    assert kl < 0.01


# ------------------------------------------------------------ training runs

def test_budget_zero_is_empty_and_leaves_net_alone(tmp_path):
    net = new_network(desk_layers(), N_ACTIONS, 0)
    raw = to_bytes(net)
    curve = train(net, 1, "base", Hyper(), 0, log_dir=tmp_path)
    assert len(curve) == 0 and to_bytes(net) == raw
    with open(tmp_path / "log.csv") as fh:
        assert next(csv.reader(fh)) == list(LOG_COLUMNS)


def test_curve_grid_and_log_files(tmp_path):
    net = new_network(desk_layers(), N_ACTIONS, 0)
    curve = train(net, 1, "base", Hyper(n_workers=4), 1000, seed=3, window=300, log_dir=tmp_path)
    assert curve.steps == [300, 600, 900, 1000]
    assert all(-1.0 <= s <= 1.0 for s in curve.scores)
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["agent_steps"]) for r in rows] == curve.steps
    assert list(rows[0]) == list(LOG_COLUMNS)
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["optimizer"] == {"name": "rmsprop", "decay": 0.99, "eps": 1e-5,
                                 "momentum": 0.0, "centered": False}
    assert meta["action_repeat"] == 2 and meta["hyper"]["n_workers"] == 4
    assert (tmp_path / "final.ckpt").exists()


def test_only_last_column_trains():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    add_column(net, 1)
    with pytest.raises(ValueError):
        train(net, 1, "base", Hyper(), 100)


def test_frozen_columns_untouched_by_training():
    net = new_network(desk_layers(), N_ACTIONS, 0)
    add_column(net, 1, alpha_init=1.0)
    frozen = {k: v.tobytes() for k, v in net.all_params().items() if k.startswith("c1/")}
    start = {k: v.copy() for k, v in net.all_params().items() if k.startswith("c2/")}
    train(net, 2, "hflip", Hyper(n_workers=4), 2000, seed=1)
    assert all(net.get(k).tobytes() == raw for k, raw in frozen.items())
    assert any(not np.array_equal(net.get(k), v) for k, v in start.items())


@pytest.mark.parametrize("workers", [1, 4])
def test_training_is_bit_reproducible(workers):
    def run():
        net = new_network(desk_layers(), N_ACTIONS, 5)
        c = train(net, 1, "noisy", Hyper(n_workers=workers), 600, seed=9, window=200)
        return c, to_bytes(net)
    (c1, b1), (c2, b2) = run(), run()
    assert c1.steps == c2.steps and c1.scores == c2.scores and b1 == b2
