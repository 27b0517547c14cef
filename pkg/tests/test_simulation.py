from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldrf.estimator import FitOptions
from cldrf.simulation import (
    SCENARIOS,
    ScenarioConfig,
    contingency,
    generate,
    match_clusters,
    rand_index,
    run_replications,
)


def brute_rand(a, b):
    pairs = list(combinations(range(len(a)), 2))
    if not pairs:
        return 1.0
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in pairs)
    return agree / len(pairs)


def canonical(labels):
    """Set-partition form: relabel by first appearance."""
    seen = {}
    return tuple(seen.setdefault(x, len(seen)) for x in labels)


labelings = st.integers(1, 12).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                        st.lists(st.integers(0, 4), min_size=n, max_size=n))
)


# -- rand_index --------------------------------------------------------------

def test_rand_identical():
    assert rand_index([0, 0, 1, 2, 2], [0, 0, 1, 2, 2]) == 1.0


def test_rand_swap_case():
    assert rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(2 / 6)


def test_rand_relabeled():
    a = np.array([0, 1, 1, 2, 0, 3])
    assert rand_index(a, np.array([7, 3, 9, 5])[a]) == 1.0


def test_rand_length_mismatch():
    with pytest.raises(ValueError):
        rand_index([0, 1], [0, 1, 1])


def test_rand_tiny():
    assert rand_index([], []) == 1.0
    assert rand_index([3], [1]) == 1.0


@settings(max_examples=200, deadline=None)
@given(labelings)
def test_rand_properties(ab):
    a, b = ab
    r = rand_index(a, b)
    assert r == pytest.approx(brute_rand(a, b), abs=1e-15)
    assert r == rand_index(b, a)
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (canonical(a) == canonical(b))


def test_contingency_counts():
    np.testing.assert_array_equal(contingency([0, 0, 1, 1], [5, 6, 5, 5]), [[1, 1], [2, 0]])


# -- match_clusters ----------------------------------------------------------

def overlap(table, pairing):
    return sum(table[i, j] for i, j in pairing.items())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(2, 5))
def test_greedy_matching_is_swap_optimal(seed, ka, kb):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, ka, size=40)
    b = rng.integers(0, kb, size=40)
    m = match_clusters(a, b)
    ua, ub = np.unique(a), np.unique(b)
    table = contingency(a, b)
    pos_a = {int(v): i for i, v in enumerate(ua)}
    pos_b = {int(v): j for j, v in enumerate(ub)}
    idx = {pos_a[i]: pos_b[j] for i, j in m.items()}
    assert len(m) == min(ua.size, ub.size)
    assert len(set(m.values())) == len(m)
    base = overlap(table, idx)
    keys = list(idx)
    for x, y in combinations(keys, 2):
        swapped = dict(idx)
        swapped[x], swapped[y] = idx[y], idx[x]
        assert base >= overlap(table, swapped)
    unused = set(range(ub.size)) - set(idx.values())
    for x in keys:
        for j in unused:
            alt = dict(idx)
            alt[x] = j
            assert base >= overlap(table, alt)


def test_match_identity():
    a = np.repeat([0, 1, 2], 5)
    assert match_clusters(a, np.array([2, 0, 1])[a]) == {0: 2, 1: 0, 2: 1}


# -- generate ----------------------------------------------------------------

@pytest.mark.parametrize("name", SCENARIOS)
def test_generate_reproducible(name):
    n = 840
    a, b = generate(ScenarioConfig(name, n, 42)), generate(ScenarioConfig(name, n, 42))
    for f in ("y", "t", "X"):
        np.testing.assert_array_equal(getattr(a.data, f), getattr(b.data, f))
    np.testing.assert_array_equal(a.truth.labels, b.truth.labels)
    other = generate(ScenarioConfig(name, n, 43))
    assert not np.array_equal(a.data.y, other.data.y)


def test_motivating_layout():
    ld = generate(ScenarioConfig("motivating", 800, 1))
    np.testing.assert_array_equal(ld.truth.counts(), [200] * 4)
    assert ld.data.p == 2
    np.testing.assert_allclose(ld.true_curves(np.array([0.0, 1.0, 2.0]), 0), [5, 8.6, 15.4])
    x = ld.data.X[ld.truth.labels == 0]
    assert x.min() >= 0 and x.max() <= 0.4


def test_linear_c4_uses_wider_second_covariate():
    x = generate(ScenarioConfig("linear-c4", 800, 1)).data.X[:200]
    assert 0.4 < x[:, 1].max() <= 0.5
    assert x[:, 0].max() <= 0.4


@pytest.mark.parametrize("name", SCENARIOS)
def test_noiseless_outcome_is_true_curve(name):
    ld = generate(ScenarioConfig(name, 840, 2), noise=0.0)
    for c in range(ld.truth.C):
        idx = ld.truth.members(c)
        np.testing.assert_allclose(ld.data.y[idx], ld.true_curves(ld.data.t[idx], c), rtol=1e-14, atol=1e-12)


def test_c5_cluster_five_slope():
    ld = generate(ScenarioConfig("linear-c5", 800, 3), noise=0.0)
    idx = ld.truth.members(4)
    slope, intercept = np.polyfit(ld.data.t[idx], ld.data.y[idx], 1)
    assert slope == pytest.approx(-10.0, abs=1e-10)
    assert intercept == pytest.approx(-20.0, abs=1e-9)


def test_random_scenario_treatment():
    ld = generate(ScenarioConfig("random-c4", 4000, 5))
    assert ld.data.p == 0
    assert abs(ld.data.t.mean() - 1) < 0.06 and abs(ld.data.t.std() - 1) < 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig("linear-c4", 801)
    with pytest.raises(ValueError):
        ScenarioConfig("linear-c6", 600)
    with pytest.raises(ValueError):
        ScenarioConfig("linear-c4", 800, seed=-1)


# -- run_replications --------------------------------------------------------

def test_replications_deterministic():
    cfg = ScenarioConfig("linear-c4", 400, 77)
    opts = FitOptions(C=1, n_starts=3, spec=generate(cfg).spec)
    a = run_replications(cfg, 1, opts, C_max=5)
    b = run_replications(cfg, 1, opts, C_max=5)
    assert a.report() == b.report()
    np.testing.assert_array_equal(a.chosen_C, b.chosen_C)
    np.testing.assert_array_equal(a.rand_index, b.rand_index)
    np.testing.assert_array_equal(a.adrf_rmse, b.adrf_rmse)


def test_replications_parallel_matches_serial():
    cfg = ScenarioConfig("linear-c3", 300, 5)
    serial = run_replications(cfg, 3, C_max=4, n_jobs=1)
    parallel = run_replications(cfg, 3, C_max=4, n_jobs=2)
    assert serial.report() == parallel.report()
    np.testing.assert_array_equal(serial.adrf_slope, parallel.adrf_slope)
    np.testing.assert_array_equal(serial.chosen_C, parallel.chosen_C)


def test_replication_summary_shape():
    s = run_replications(ScenarioConfig("linear-c4", 400, 9), 2, C_max=5)
    assert s.rand_index.shape == (2,) and s.chosen_C.shape == (2,)
    assert s.adrf_rmse.shape == (2, 4)
    assert s.hit_rate == np.mean(s.chosen_C == 4)
    assert "hit rate" in s.report()


def test_replication_failures_are_recorded():
    s = run_replications(ScenarioConfig("linear-c4", 40, 1), 2, fixed_C=20)
    assert len(s.failures) == 2
    assert np.all(s.chosen_C == 0) and np.all(np.isnan(s.rand_index))


def test_replications_reject_zero():
    with pytest.raises(ValueError):
        run_replications(ScenarioConfig("linear-c4", 400), 0)
