"""Tests for lazy-walk ensembles, disorder reweighting and serialization."""
import io
import math

import numpy as np
import pytest

from cplab.deltabose import GaussianProfile, pair_gaussian_pairing
from cplab.errors import DomainError, GuardError
from cplab.ensemble import (
    ENSEMBLE_MAGIC,
    LatticePath,
    WeightedPathEnsemble,
    annealed_second_moment_trial,
    bridge_concatenate,
    critical_beta,
    disorder_field,
    ensemble_from_binary,
    ensemble_from_csv,
    ensemble_to_binary,
    ensemble_to_csv,
    intersection_matrix,
    lazy_walk_kernel,
    marginal,
    polymer_gibbs_reweight,
    sample_reference_walks,
)


# ---------------------------------------------------------------------------
# paths and sampling
# ---------------------------------------------------------------------------


def test_path_positions():
    p = LatticePath(3, (1, -2), np.array([[1, 0], [0, 0], [0, -1]]))
    assert p.end_time == 6
    assert np.array_equal(p.positions,
                          [[1, -2], [2, -2], [2, -2], [2, -3]])


def test_path_rejects_diagonal_steps():
    with pytest.raises(DomainError):
        LatticePath(0, (0, 0), np.array([[1, 1]]))


def test_ensemble_window_enforced():
    p = LatticePath(0, (0, 0), np.zeros((4, 2), dtype=int))
    with pytest.raises(DomainError):
        WeightedPathEnsemble([p], [1.0], (0, 5))
    with pytest.raises(DomainError):
        WeightedPathEnsemble([p], [-1.0], (0, 4))


def test_sample_reference_walks_basic():
    ens = sample_reference_walks(40, (0, 30), N=64, start_box=(-2, 2, -2, 2), seed=7)
    assert len(ens) == 40
    assert ens.window == (0, 30)
    # flat start measure importance weights: box size / count each
    assert np.allclose(ens.weights, 25.0 / 40.0)
    pos = ens.position_array()
    assert pos.shape == (40, 31, 2)
    assert np.all(pos[:, 0, 0] >= -2) and np.all(pos[:, 0, 0] <= 2)


def test_sample_reference_walks_deterministic():
    a = sample_reference_walks(10, (0, 20), 64, (0, 0, 0, 0), seed=3)
    b = sample_reference_walks(10, (0, 20), 64, (0, 0, 0, 0), seed=3)
    assert np.array_equal(a.position_array(), b.position_array())


def test_walk_diffusivity():
    # per-step coordinate variance of the lazy walk is 1/4
    m = 400
    ens = sample_reference_walks(3000, (0, m), 64, (0, 0, 0, 0), seed=11)
    end = ens.position_array()[:, -1, :].astype(float)
    var = end.var(axis=0)
    assert np.all(np.abs(var - m / 4.0) < 0.08 * m / 4.0)


def test_lazy_walk_kernel_exact():
    k1 = lazy_walk_kernel(1)
    assert k1[1, 1] == 0.5
    assert k1[0, 1] == k1[2, 1] == k1[1, 0] == k1[1, 2] == 0.125
    k5 = lazy_walk_kernel(5)
    assert abs(k5.sum() - 1.0) < 1e-12
    assert np.allclose(k5, k5.T)
    assert np.allclose(k5, k5[::-1, :])


# ---------------------------------------------------------------------------
# disorder and reweighting
# ---------------------------------------------------------------------------


def test_disorder_deterministic_and_shared():
    u = np.arange(50)
    x = np.arange(50) - 25
    y = np.zeros(50, dtype=int)
    a = disorder_field(123, u, x, y)
    b = disorder_field(123, u, x, y)
    assert np.array_equal(a, b)
    c = disorder_field(124, u, x, y)
    assert not np.allclose(a, c)


def test_disorder_moments():
    rng = np.random.default_rng(0)
    u = rng.integers(0, 10**6, size=200_000)
    x = rng.integers(-10**6, 10**6, size=200_000)
    y = rng.integers(-10**6, 10**6, size=200_000)
    om = disorder_field(999, u, x, y)
    assert abs(om.mean()) < 0.01
    assert abs(om.var() - 1.0) < 0.02
    assert abs(np.mean(om**3)) < 0.03
    # neighboring sites decorrelated
    om2 = disorder_field(999, u, x + 1, y)
    assert abs(np.corrcoef(om, om2)[0, 1]) < 0.01


def test_critical_beta_values():
    N = 1000
    ln = math.log(N)
    assert abs(critical_beta(N, 0.0) ** 2 - math.pi / ln) < 1e-14
    assert critical_beta(N, 2.0) > critical_beta(N, 0.0) > critical_beta(N, -2.0)
    with pytest.raises(DomainError):
        critical_beta(1000, -10.0)
    with pytest.raises(DomainError):
        critical_beta(2, 0.0)


def test_gibbs_reweight_is_mean_one():
    # the disorder expectation of a single reweighted weight equals the
    # reference weight; 3 sigma with the measured standard error.  Short
    # windows and a large horizon keep the lognormal tail tame.
    N = 10**6
    ens = sample_reference_walks(1, (0, 4), N=N, start_box=(0, 0, 0, 0), seed=1)
    ws = np.array([
        polymer_gibbs_reweight(ens, seed, theta_window=0.0, N=N).weights[0]
        for seed in range(3000)
    ])
    se = ws.std(ddof=1) / math.sqrt(len(ws))
    assert abs(ws.mean() - ens.weights[0]) < 3.0 * se


def test_gibbs_reweight_horizon_mismatch():
    ens = sample_reference_walks(5, (0, 10), N=64, start_box=(0, 0, 0, 0), seed=1)
    with pytest.raises(DomainError):
        polymer_gibbs_reweight(ens, 0, 0.0, N=128)


def test_gibbs_reweight_shared_field():
    # identical paths in two different ensembles get identical Gibbs factors
    p = LatticePath(0, (0, 0), np.zeros((10, 2), dtype=int))
    q = LatticePath(0, (3, 3), np.zeros((10, 2), dtype=int))
    e1 = WeightedPathEnsemble([p], [1.0], (0, 10), {"N": 100})
    e2 = WeightedPathEnsemble([p, q], [1.0, 1.0], (0, 10), {"N": 100})
    w1 = polymer_gibbs_reweight(e1, 42, 0.0, 100).weights
    w2 = polymer_gibbs_reweight(e2, 42, 0.0, 100).weights
    assert w1[0] == w2[0]


# ---------------------------------------------------------------------------
# intersection matrices
# ---------------------------------------------------------------------------


def _stay_ensemble(n, m, N=100):
    paths = [LatticePath(0, (i, 0), np.zeros((m, 2), dtype=int)) for i in range(n)]
    return WeightedPathEnsemble(paths, np.ones(n), (0, m), {"N": N})


def test_intersection_lattice_diagonal():
    ens = _stay_ensemble(3, 10)
    L = intersection_matrix(ens, (0, 10))
    norm = math.pi / math.log(100)
    assert np.allclose(np.diag(L.entries), 10 * norm)
    assert L.entries[0, 1] == 0.0


def test_intersection_lattice_coincidences():
    # two walks that sit together for the first 4 times then separate
    a = LatticePath(0, (0, 0), np.array([[0, 0]] * 4 + [[1, 0]] * 4))
    b = LatticePath(0, (0, 0), np.array([[0, 0]] * 8))
    ens = WeightedPathEnsemble([a, b], [1.0, 1.0], (0, 8), {"N": 100})
    L = intersection_matrix(ens, (0, 8))
    norm = math.pi / math.log(100)
    # coincide at times 0..4 (after that a has moved); half-open window
    assert abs(L.entries[0, 1] - 5 * norm) < 1e-12


def test_intersection_window_additivity():
    ens = sample_reference_walks(6, (0, 30), 64, (-1, 1, -1, 1), seed=5)
    full = intersection_matrix(ens, (0, 30)).entries
    left = intersection_matrix(ens, (0, 17)).entries
    right = intersection_matrix(ens, (17, 30)).entries
    assert np.allclose(left + right, full)


def test_intersection_epsilon_mode():
    ens = _stay_ensemble(2, 10, N=64)
    L = intersection_matrix(ens, (0, 10), mode="epsilon", eps=0.5)
    assert L.entries[0, 0] > 0
    with pytest.raises(DomainError):
        intersection_matrix(ens, (0, 10), mode="epsilon", eps=1.0)
    with pytest.raises(DomainError):
        intersection_matrix(ens, (0, 11))


# ---------------------------------------------------------------------------
# marginals and bridges
# ---------------------------------------------------------------------------


def test_marginal_mass_preserving():
    ens = sample_reference_walks(8, (0, 12), 64, (0, 0, 0, 0), seed=9)
    pts, w = marginal(ens, [0, 6, 12])
    assert pts.shape == (8, 3, 2)
    assert w.sum() == ens.total_mass
    assert np.array_equal(pts[:, 0, :], ens.position_array()[:, 0, :])
    with pytest.raises(DomainError):
        marginal(ens, [0, 13])


def test_bridge_weight_only():
    left = WeightedPathEnsemble(
        [LatticePath(0, (0, 0), np.zeros((3, 2), dtype=int))], [2.0], (0, 3), {"N": 64})
    right = WeightedPathEnsemble(
        [LatticePath(4, (0, 0), np.zeros((3, 2), dtype=int)),
         LatticePath(4, (1, 0), np.zeros((3, 2), dtype=int)),
         LatticePath(4, (5, 5), np.zeros((3, 2), dtype=int))],
        [1.0, 1.0, 1.0], (4, 7), {"N": 64})
    pairs, w = bridge_concatenate(left, right, gap=1)
    assert pairs == [(0, 0), (0, 1), (0, 2)]
    # one-step lazy kernel: stay 1/2, neighbor 1/8, unreachable 0
    assert np.allclose(w, [2.0 * 0.5, 2.0 * 0.125, 0.0])


def test_bridge_positions_mode():
    rng_gap = 3
    left = WeightedPathEnsemble(
        [LatticePath(0, (0, 0), np.zeros((2, 2), dtype=int))], [1.0], (0, 2), {"N": 64})
    right = WeightedPathEnsemble(
        [LatticePath(2 + rng_gap, (2, 0), np.zeros((2, 2), dtype=int))],
        [1.0], (2 + rng_gap, 4 + rng_gap), {"N": 64})
    out = bridge_concatenate(left, right, gap=rng_gap, positions=True, seed=0)
    assert out.window == (0, 4 + rng_gap)
    pos = out.position_array()
    # bridge hits both endpoints and every step is a legal lazy step
    assert np.array_equal(pos[0, 2], [0, 0])
    assert np.array_equal(pos[0, 2 + rng_gap], [2, 0])


def test_bridge_bad_gap():
    ens = _stay_ensemble(1, 3)
    with pytest.raises(DomainError):
        bridge_concatenate(ens, ens, gap=0)


def test_bridge_statistics():
    # sampled bridges have the conditioned walk's one-step marginal
    left = WeightedPathEnsemble(
        [LatticePath(0, (0, 0), np.zeros((1, 2), dtype=int))], [1.0], (0, 1), {"N": 64})
    right = WeightedPathEnsemble(
        [LatticePath(3, (0, 0), np.zeros((1, 2), dtype=int))], [1.0], (3, 4), {"N": 64})
    counts = {}
    for seed in range(2000):
        out = bridge_concatenate(left, right, gap=2, positions=True, seed=seed)
        mid = tuple(out.position_array()[0, 2])
        counts[mid] = counts.get(mid, 0) + 1
    # exact conditioned distribution: P(mid) = p1(mid) p1(-mid) / p2(0)
    k1 = lazy_walk_kernel(1)
    p2_0 = lazy_walk_kernel(2)[2, 2]
    for mid, c in counts.items():
        p = k1[mid[0] + 1, mid[1] + 1] ** 2 / p2_0
        assert abs(c / 2000.0 - p) < 0.04


# ---------------------------------------------------------------------------
# annealed second moment
# ---------------------------------------------------------------------------


def test_walk_overlap_asymptotics():
    from cplab.ensemble import walk_overlap

    # R_N - log N / pi tends to a constant
    c1 = walk_overlap(1024) - math.log(1024) / math.pi
    c2 = walk_overlap(4096) - math.log(4096) / math.pi
    assert abs(c1 - c2) < 5e-3
    assert 0.1 < c1 < 0.4
    # one step: meeting probability is sum of squared step probabilities
    assert abs(walk_overlap(1) - (0.25 + 4 * 0.125**2)) < 1e-6


def test_annealed_second_moment_smoke():
    g = GaussianProfile(1.0, 1.0)
    gp = GaussianProfile(1.0, 0.7)
    mc, se, analytic = annealed_second_moment_trial(
        N=256, theta_window=0.0, t=0.5, g=g, gp=gp, replicas=12, seed=4,
        paths_per_family=120)
    assert se > 0
    assert analytic > 0
    assert 0.3 < mc / analytic < 3.0


def test_annealed_second_moment_no_disorder():
    # beta = 0: the disorder-averaged pair weight is 1, so the estimate is the
    # product of two independent heat pairings
    g = GaussianProfile(1.0, 1.0)
    gp = GaussianProfile(1.0, 0.8)
    mc, se, _ = annealed_second_moment_trial(
        N=1024, theta_window=0.0, t=0.5, g=g, gp=gp, replicas=8, seed=2,
        paths_per_family=200, beta=0.0)
    s2, sp2, t = 1.0, 0.64, 0.5
    single = 2.0 * math.pi * s2 * sp2 / (s2 + sp2 + t)
    assert abs(mc - single * single) < max(5.0 * se, 0.05 * single * single)


def test_annealed_second_moment_monotone_in_theta():
    g = GaussianProfile(1.0, 1.0)
    vals = [annealed_second_moment_trial(512, th, 0.5, g, g, replicas=6,
                                         seed=10, paths_per_family=100)[0]
            for th in (-2.0, 0.0, 2.0)]
    assert vals[0] < vals[1] < vals[2]


def test_annealed_second_moment_guards():
    g = GaussianProfile()
    with pytest.raises(GuardError):
        annealed_second_moment_trial(64, 0.0, 0.5, g, g, replicas=1, seed=0)
    with pytest.raises(DomainError):
        annealed_second_moment_trial(64, 0.0, 0.001, g, g, replicas=4, seed=0)


# ---------------------------------------------------------------------------
# meeting-skeleton sampler
# ---------------------------------------------------------------------------


def _direct_pair_average(N, n, gamma, g, gp, replicas, ppf, seed):
    from cplab.ensemble import _family_positions, _pair_coincidences

    rng = np.random.default_rng(seed)
    scale = 2.0 / math.sqrt(N)
    vals = np.empty(replicas)
    for r in range(replicas):
        pa, mass = _family_positions(rng, g, ppf, n, N)
        pb, _ = _family_positions(rng, g, ppf, n, N)
        c = _pair_coincidences(pa[:, :-1, :], pb[:, :-1, :])
        ga = gp(pa[:, -1, :] * scale)
        gb = gp(pb[:, -1, :] * scale)
        vals[r] = mass * mass * float(
            (np.exp(gamma * c) * ga[:, None] * gb[None, :]).mean())
    return vals.mean(), vals.std(ddof=1) / math.sqrt(replicas)


def test_skeleton_zero_gamma_is_heat_pairing():
    from cplab.ensemble import skeleton_second_moment

    g = GaussianProfile(1.0, 1.0)
    est, se = skeleton_second_moment(1024, 1.0, 0.0, g, g, draws=10, seed=0,
                                     grid=256)
    single = 2.0 * math.pi / 3.0  # 2 pi s^2 s'^2 / (s^2 + s'^2 + t)
    assert se == 0.0
    assert abs(est / single**2 - 1.0) < 0.01


def test_skeleton_matches_direct_pair_average():
    from cplab.ensemble import skeleton_second_moment

    # mild coupling at a small horizon: the direct average is a sound oracle
    g = GaussianProfile(1.0, 1.0)
    direct, dse = _direct_pair_average(64, 64, 0.25, g, g, 400, 64, seed=11)
    skel, sse = skeleton_second_moment(64, 1.0, 0.25, g, g, draws=8000,
                                       seed=9, grid=256)
    assert abs(direct - skel) < 4.0 * math.hypot(dse, sse)


def test_skeleton_constant_endpoint_is_deterministic():
    from cplab.ensemble import skeleton_second_moment

    # a flat endpoint profile makes every skeleton weight exactly 1, so the
    # estimate reduces to the scalar renewal sum with zero variance
    g = GaussianProfile(1.0, 1.0)
    flat = GaussianProfile(2.0, 1e6)
    est, se = skeleton_second_moment(64, 1.0, 0.25, g, flat, draws=500,
                                     seed=1, grid=256)
    assert se < 1e-10
    direct, dse = _direct_pair_average(64, 64, 0.25, g, flat, 300, 64, seed=3)
    assert abs(est - direct) < 4.0 * dse


def test_skeleton_monotone_in_gamma():
    from cplab.ensemble import skeleton_second_moment

    g = GaussianProfile(1.0, 1.0)
    vals = [skeleton_second_moment(64, 1.0, gam, g, g, draws=2000, seed=5,
                                   grid=256)[0]
            for gam in (0.0, 0.15, 0.3, 0.6)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_skeleton_reproducible():
    from cplab.ensemble import skeleton_second_moment

    g = GaussianProfile(1.0, 0.8)
    a = skeleton_second_moment(64, 1.0, 0.4, g, g, draws=1000, seed=7,
                               grid=256)
    b = skeleton_second_moment(64, 1.0, 0.4, g, g, draws=1000, seed=7,
                               grid=256)
    c = skeleton_second_moment(64, 1.0, 0.4, g, g, draws=1000, seed=8,
                               grid=256)
    assert a == b
    assert a != c


def test_skeleton_guards():
    from cplab.ensemble import skeleton_second_moment

    g = GaussianProfile()
    with pytest.raises(GuardError):
        skeleton_second_moment(64, 1.0, 0.2, g, g, draws=1, seed=0, grid=256)
    with pytest.raises(DomainError):
        skeleton_second_moment(64, 1.0, -0.2, g, g, draws=10, seed=0,
                               grid=256)
    with pytest.raises(DomainError):
        skeleton_second_moment(64, 0.001, 0.2, g, g, draws=10, seed=0,
                               grid=256)
    with pytest.raises(GuardError):
        skeleton_second_moment(4096, 1.0, 0.2, g, g, draws=10, seed=0,
                               grid=64)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _roundtrip_ensemble():
    ens = sample_reference_walks(5, (2, 14), 64, (-3, 3, -3, 3), seed=21)
    return polymer_gibbs_reweight(ens, 7, 1.5, 64)


def test_csv_roundtrip():
    ens = _roundtrip_ensemble()
    buf = io.StringIO()
    ensemble_to_csv(ens, buf)
    buf.seek(0)
    header = buf.readline().strip()
    assert header == "path_id,time,x,y,weight"
    buf.seek(0)
    back = ensemble_from_csv(buf)
    assert back.window == ens.window
    assert np.array_equal(back.position_array(), ens.position_array())
    assert np.array_equal(back.weights, ens.weights)


def test_binary_roundtrip():
    ens = _roundtrip_ensemble()
    buf = io.BytesIO()
    ensemble_to_binary(ens, buf)
    raw = buf.getvalue()
    assert raw.startswith(ENSEMBLE_MAGIC)
    back = ensemble_from_binary(io.BytesIO(raw))
    assert back.window == ens.window
    assert np.array_equal(back.position_array(), ens.position_array())
    assert np.allclose(back.weights, ens.weights)
    assert back.meta["N"] == 64


def test_binary_bad_magic():
    with pytest.raises(DomainError):
        ensemble_from_binary(io.BytesIO(b"not an ensemble file" * 2))
