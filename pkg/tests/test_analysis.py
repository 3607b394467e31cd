import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from prognet.analysis import (AnalysisError, ActivationStats, DegenerateBaselineError, Moments,
                              RhoSamples, SensitivityReport, activation_stats, afs_spectrum,
                              auc, bisect_noise_level, collect_rho_samples, compute_afs,
                              compute_aps, compute_fisher, log_policy_grads, normalize_aps,
                              rankdata, spearman, transfer_score)
from prognet.envs import MIN_SCORE
from prognet.network import LayerSpec, add_column, desk_layers, forward, new_network
from prognet.trainer import LearningCurve

from helpers import manual_two_column_dense_grads

TOY_OBS = (1, 2, 2)


def _toy_net(seed=0):
    # Hidden biases pushed upward so few ReLUs are dead on unit-box inputs.
    net = new_network([LayerSpec.dense(5), LayerSpec.dense(4)], 3, seed, obs_shape=TOY_OBS)
    for i in (1, 2):
        net.get(f"c1/l{i}.b")[...] = 0.3
    add_column(net, seed + 1, alpha_init=0.5)
    for name in ("l1.b", "l2.b", "l2.c", "policy.c"):
        net.get(f"c2/{name}")[...] = 0.3
    return net


def _toy_samples(net, n, seed):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.0, 1.0, size=(n,) + TOY_OBS)
    p = forward(net, 2, obs).policy.data
    u = rng.uniform(size=(n, 1))
    actions = np.minimum((np.cumsum(p, axis=1) <= u).sum(axis=1), 2)
    return RhoSamples(obs, actions, 2, "toy")


def _desk_net(k=1, seed=0, maps=4, hidden=16):
    net = new_network(desk_layers(maps, hidden), 3, seed)
    for j in range(1, k):
        add_column(net, seed + j, alpha_init=1.0)
    return net


# ---------------------------------------------------------------- moments

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_moments_merge_matches_pooled(n1, n2, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(3.0, 2.0, (n1, 4)), rng.normal(-1.0, 0.5, (n2, 4))
    m = Moments.of(a).merge(Moments.of(b))
    pooled = np.concatenate([a, b])
    assert m.count == n1 + n2
    np.testing.assert_allclose(m.mean, pooled.mean(0), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(m.var, pooled.var(0), rtol=1e-10, atol=1e-12)
    assert (m.var >= 0).all()


def test_activation_stats_independent_of_batching():
    net = _desk_net(2)
    samples = collect_rho_samples(net, 2, "base", 100, seed=1)
    a = activation_stats(net, 2, samples, batch=100)
    b = activation_stats(net, 2, samples, batch=7)
    for key in a.moments:
        np.testing.assert_allclose(a.var(key), b.var(key), rtol=1e-10, atol=1e-14)


# ---------------------------------------------------------------- samples

def test_rho_samples_reproducible_and_shaped():
    net = _desk_net(1)
    a = collect_rho_samples(net, 1, "base", 50, seed=3)
    b = collect_rho_samples(net, 1, "base", 50, seed=3)
    assert len(a) == 50 and a.obs.shape == (50, 2, 16, 16)
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_rho_samples_zero_is_an_error():
    with pytest.raises(AnalysisError):
        collect_rho_samples(_desk_net(1), 1, "base", 0)


def test_rho_actions_follow_policy_chi_square():
    net = _desk_net(1)
    col = net.column(1).params
    col["policy.W"][...] = 0.0
    target = np.array([0.2, 0.5, 0.3])
    col["policy.b"][...] = np.log(target)
    samples = collect_rho_samples(net, 1, "base", 6000, seed=2)
    counts = np.bincount(samples.actions, minlength=3)
    assert sps.chisquare(counts, target * len(samples)).pvalue > 1e-3


# ------------------------------------------------------------------ Fisher

def test_fisher_matches_brute_force_oracle():
    net = _toy_net()
    samples = _toy_samples(net, 300, seed=5)
    st_ = activation_stats(net, 2, samples)
    acc = compute_fisher(net, 2, samples, st_, batch=64)
    manual = manual_two_column_dense_grads(net.all_params(), samples.obs.reshape(300, -1),
                                           samples.actions)
    for key, (g, h) in manual.items():
        scale = np.sqrt(h.var(axis=0) + 1e-8)
        oracle = ((g * scale) ** 2).mean(axis=0)
        assert oracle.max() > 0
        np.testing.assert_allclose(acc.mean(key), oracle, rtol=1e-10, atol=0)


def test_conv_fisher_sums_over_pixels_per_sample():
    net = _desk_net(2)
    samples = collect_rho_samples(net, 2, "base", 40, seed=4)
    stats = activation_stats(net, 2, samples)
    acc = compute_fisher(net, 2, samples, stats, batch=16)
    # Independent route: one sample per backward pass, pixel sums done explicitly.
    for key in [(1, 1), (3, 2)]:
        std = stats.std(key)
        total = np.zeros_like(std)
        for s in range(len(samples)):
            g = log_policy_grads(net, 2, samples.obs[s:s + 1], samples.actions[s:s + 1])[key][0]
            for c in range(g.shape[0]):
                total[c] += sum(float(v) ** 2 for v in (g[c] * std[c]).ravel())
        np.testing.assert_allclose(acc.mean(key), total / len(samples), rtol=1e-10)


def test_fisher_estimates_consistent_across_sample_sizes():
    net = _toy_net(3)
    small = compute_afs(net, 2, _toy_samples(net, 10_000, seed=10))
    large = compute_afs(net, 2, _toy_samples(net, 100_000, seed=11))
    for fs, fl in zip(small.fisher, large.fisher):
        assert (fl > 0).all()
        assert np.max(np.abs(fs - fl) / fl) < 0.05


# --------------------------------------------------------------------- AFS

def _check_normalized(rep: SensitivityReport):
    for a in rep.afs_feature:
        defined = ~np.isnan(a[0])
        np.testing.assert_allclose(a[:, defined].sum(axis=0), 1.0, atol=1e-9)
        assert ((a[:, defined] >= 0) & (a[:, defined] <= 1)).all()
    np.testing.assert_allclose(np.nansum(rep.afs_layer, axis=1), 1.0, atol=1e-9)
    assert all((f >= 0).all() for f in rep.fisher)


def test_afs_single_column_is_one():
    net = _desk_net(1)
    rep = compute_afs(net, 1, collect_rho_samples(net, 1, "base", 200, seed=0))
    np.testing.assert_array_equal(rep.afs_layer, np.ones((4, 1)))
    _check_normalized(rep)


def test_afs_normalization_two_and_three_columns():
    for k in (2, 3):
        net = _desk_net(k)
        rep = compute_afs(net, k, collect_rho_samples(net, k, "hflip", 300, seed=k))
        assert rep.afs_layer.shape == (4, k)
        _check_normalized(rep)
        # Layer 1 of earlier columns reaches the output only through adapters.
        assert rep.afs_layer[0, :-1].sum() > 0


def test_afs_zeroed_laterals_make_source_columns_invisible():
    net = _desk_net(2)
    for name, arr in net.adapters.of(2).items():
        if name.endswith(".U"):
            arr[...] = 0.0
    rep = compute_afs(net, 2, collect_rho_samples(net, 2, "base", 200, seed=1))
    np.testing.assert_array_equal(rep.afs_layer[1:, 0], 0.0)
    np.testing.assert_array_equal(rep.afs_layer[1:, 1], 1.0)
    _check_normalized(rep)


def test_dead_feature_is_missing_and_logged(caplog):
    net = _desk_net(1)
    net.column(1).params["policy.W"][:, 3] = 0.0  # unit 3 of the dense layer cannot move pi
    with caplog.at_level(logging.INFO, logger="prognet.analysis"):
        rep = compute_afs(net, 1, collect_rho_samples(net, 1, "base", 100, seed=0))
    assert (4, 3) in rep.missing
    assert "zero Fisher" in caplog.text
    assert np.isnan(rep.afs_feature[3][0, 3])
    assert rep.afs_layer_raw[3, 0] == rep.fisher[3].shape[1] - 1
    assert rep.afs_layer[3, 0] == 1.0


def test_report_round_trip_and_csv(tmp_path):
    net = _desk_net(2)
    net.column(2).params["policy.W"][:, 0] = 0.0
    net.adapters.of(2)["policy.V"][:, 0] = 0.0  # neither column's unit 0 reaches pi
    rep = compute_afs(net, 2, collect_rho_samples(net, 2, "base", 80, seed=0))
    rep.aps_lambda = np.array([[1.0, 0.0]] * 4)
    rep.aps = normalize_aps(rep.aps_lambda)
    rep.save(tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text()
    assert "NaN" not in text and "null" in text
    back = SensitivityReport.load(tmp_path / "r.json")
    np.testing.assert_array_equal(back.afs_layer, rep.afs_layer)
    for a, b in zip(back.afs_feature, rep.afs_feature):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.aps, rep.aps)
    assert back.missing == rep.missing == [(4, 0)]
    rep.write_feature_csv(tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "layer,column,feature,fisher,afs"
    assert len(rows) - 1 == sum(f.size for f in rep.fisher)
    assert json.loads(text)["columns"] == rep.column_labels


# --------------------------------------------------------------------- APS

def test_bisection_finds_crossing_of_monotone_score():
    cross = 3.7
    s2, probes = bisect_noise_level(lambda s: -s, -cross)
    assert probes[:4] == [(1e-3, -1e-3), (1e-2, -1e-2), (1e-1, -1e-1), (1.0, -1.0)]
    # Twelve halvings of the log-interval [1, 10].
    assert cross <= s2 <= cross * 10 ** (1 / 2 ** 12)
    assert len(probes) == 5 + 12


def test_bisection_takes_smallest_crossing_and_flags_none():
    bumpy = {1e-3: 0.0, 1e-2: -5.0, 1e-1: 0.0, 1.0: -5.0}
    s2, probes = bisect_noise_level(lambda s: bumpy.get(s, 0.0 if s > 1e-2 else -5.0), -1.0,
                                    steps=0)
    assert s2 == 1e-2 and len(probes) == 2
    s2, probes = bisect_noise_level(lambda s: 0.0, -1.0)
    assert s2 is None and len(probes) == 8


def test_aps_dead_layer_has_zero_precision():
    net = _desk_net(1)
    net.column(1).params["l3.W"][...] = 0.0  # nothing leaves layer 2
    samples = collect_rho_samples(net, 1, "base", 100, seed=0)
    stats = activation_stats(net, 1, samples)
    r = compute_aps(net, 1, "base", 2, 1, stats=stats, floor=MIN_SCORE - 1.0, seed=0)
    assert r.lam == 0.0 and r.flag
    assert len(r.probes) == 8 and all(sc == r.baseline for _, sc in r.probes)


def test_aps_noise_hurts_a_live_layer():
    net = _desk_net(1)
    samples = collect_rho_samples(net, 1, "base", 100, seed=0)
    stats = activation_stats(net, 1, samples)
    r = compute_aps(net, 1, "base", 4, 1, stats=stats, floor=MIN_SCORE - 1.0, seed=0,
                    episodes_per_probe=40)
    assert any(sc != r.baseline for _, sc in r.probes)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0.0, 1e6), min_size=2, max_size=2), min_size=1, max_size=5))
def test_aps_normalization(rows):
    lam = np.array(rows)
    aps = normalize_aps(lam)
    for r, a in zip(lam, aps):
        if r.sum() > 0:
            assert a.sum() == pytest.approx(1.0, abs=1e-12)
        else:
            assert np.isnan(a).all()


def test_aps_single_column_is_one():
    np.testing.assert_array_equal(normalize_aps(np.array([[2.0], [0.5]])), [[1.0], [1.0]])


# ----------------------------------------------------------------- Spearman

@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=12))
def test_spearman_matches_scipy_with_ties(pairs):
    a, b = np.array(pairs, dtype=float).T
    np.testing.assert_array_equal(rankdata(a), sps.rankdata(a))
    ours = spearman(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        assert math.isnan(ours)
    else:
        assert ours == pytest.approx(sps.spearmanr(a, b).statistic, abs=1e-12)


# ------------------------------------------------------------ transfer score

def test_transfer_score_identity_and_linearity():
    c = [(0, -1.0), (1000, -0.5), (2000, 0.2), (3000, 0.9)]
    assert transfer_score(c, c).percent == 100.0
    doubled = [(x, 2 * (y - MIN_SCORE) + MIN_SCORE) for x, y in c]
    assert transfer_score(doubled, c).percent == pytest.approx(200.0, rel=1e-14)


def test_auc_hand_trapezoid():
    c = [(0, -1.0), (10, 0.0), (30, 0.5)]
    # shifted values 0, 1, 1.5; trapezoids 10*(0+1)/2 + 20*(1+1.5)/2 = 5 + 25
    assert abs(auc(c) - 30.0) < 1e-12
    d = [(0, -0.5), (10, -0.5), (30, 1.0)]
    # shifted 0.5, 0.5, 2.0; 10*0.5 + 20*1.25 = 30
    assert abs(auc(d) - 30.0) < 1e-12
    assert abs(transfer_score(d, [(0, -1.0), (10, -1.0), (30, 0.0)]).percent - 100 * 30 / 10) < 1e-12


def test_transfer_score_resamples_and_rejects_degenerate():
    base = [(0, -1.0), (100, 0.0), (200, 1.0)]
    arch = [(0, -1.0), (50, -0.5), (200, 1.0)]  # linear, resampled to the base grid
    assert transfer_score(arch, base).percent == pytest.approx(100.0, abs=1e-12)
    with pytest.raises(DegenerateBaselineError):
        transfer_score(base, [(0, -1.0), (100, -1.0)])
    curve = LearningCurve([10, 20], [0.0, 0.5], [3, 3], 10)
    assert transfer_score(curve, curve).percent == 100.0


# ----------------------------------------------------------------- spectra

def _report_with(values):
    a = np.asarray(values, dtype=float)
    return SensitivityReport(["dense1"], [f"c{j}" for j in range(len(a))], [a], [a],
                             np.nansum(a, 1)[None], np.nansum(a, 1)[None] / np.nansum(a), 1)


def test_spectrum_single_network_is_sorted_vector():
    r = _report_with([[0.2, 0.7, 0.5], [0.8, 0.3, 0.5]])
    sp = afs_spectrum([r], 1, "final_column")
    np.testing.assert_array_equal(sp.mean, [0.8, 0.5, 0.3])
    np.testing.assert_array_equal(afs_spectrum([r], 1, "source_columns").mean, [0.7, 0.5, 0.2])


def test_spectrum_flat_and_resampled():
    flat = afs_spectrum([_report_with([[0.5] * 4, [0.5] * 4])], 1)
    np.testing.assert_array_equal(flat.mean, 0.5)
    assert flat.area == pytest.approx(0.5)
    r1 = _report_with([[0.0, 0.0, 0.0], [1.0, 0.5, 0.0]])
    r2 = _report_with([[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 0.75, 0.5, 0.25, 0.0]])
    sp = afs_spectrum([r1, r2], 1)
    np.testing.assert_allclose(sp.mean, [1.0, 0.75, 0.5, 0.25, 0.0])
    assert (np.diff(sp.mean) <= 0).all()
    assert all((np.diff(v) <= 0).all() for v in sp.per_network)


def test_spectrum_skips_missing_features():
    r = _report_with([[np.nan, 0.1, 0.6], [np.nan, 0.9, 0.4]])
    np.testing.assert_array_equal(afs_spectrum([r], 1).mean, [0.9, 0.4])
