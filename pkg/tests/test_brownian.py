"""Shared scalar Brownian paths: sampling, bridge refinement, persistence.

The statistical checks use frozen master seeds so the suite is deterministic;
thresholds are set at 3 standard errors or a fixed significance level.
"""

import io

import numpy as np
import pytest
from scipy import stats

from stoflock import (BrownianPath, derive_seed, load_path, refine,
                      sample_path, save_path, value_at)
from stoflock.errors import ConfigError


def test_determinism():
    a = sample_path(1.0, 64, 123)
    b = sample_path(1.0, 64, 123)
    assert np.array_equal(a.increments, b.increments)
    assert a.level == 0 and a.steps == 64 and a.horizon == 1.0


def test_distinct_seeds_differ():
    a = sample_path(1.0, 64, 1)
    b = sample_path(1.0, 64, 2)
    assert not np.array_equal(a.increments, b.increments)


def test_increment_variance_monte_carlo():
    # 1e5 single-increment paths; sample variance of dB_1 within 3 SE of T/K
    n = 100_000
    t_over_k = 0.25
    draws = np.array([sample_path(0.25, 1, derive_seed(0, i, 7)).increments[0]
                      for i in range(n)])
    var = draws.var(ddof=1)
    se = t_over_k * np.sqrt(2.0 / (n - 1))
    assert abs(var - t_over_k) <= 3 * se
    assert abs(draws.mean()) <= 3 * np.sqrt(t_over_k / n)


def test_terminal_value_is_standard_normal():
    # T=1, K=1: B_1 ~ N(0,1), Kolmogorov-Smirnov at significance 0.01
    draws = np.array([sample_path(1.0, 1, derive_seed(1, i, 8)).increments[0]
                      for i in range(10_000)])
    res = stats.kstest(draws, "norm")
    assert res.pvalue > 0.01


def test_independence_across_realizations():
    n = 4000
    a = np.array([sample_path(1.0, 1, derive_seed(2, i, 9)).increments[0]
                  for i in range(n)])
    b = np.array([sample_path(1.0, 1, derive_seed(2, i + n, 9)).increments[0]
                  for i in range(n)])
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) <= 4.0 / np.sqrt(n)


def test_derive_seed_separates_namespaces():
    seeds = {derive_seed(5, i, ns) for i in range(50) for ns in (0, 1, 2)}
    assert len(seeds) == 150
    assert derive_seed(5, 3, 1) == derive_seed(5, 3, 1)


def test_value_grid():
    p = sample_path(2.0, 8, 11)
    assert value_at(p, 0) == 0.0
    assert value_at(p, 8) == pytest.approx(p.increments.sum(), abs=1e-15)
    vals = p.values()
    assert vals.shape == (9,)
    assert vals[0] == 0.0
    with pytest.raises(IndexError, match="out of range"):
        value_at(p, 9)
    with pytest.raises(IndexError):
        value_at(p, -1)


def test_refine_pair_sums_within_one_ulp():
    # each refined pair reproduces the parent increment up to one rounding
    # unit at the scale of the larger half; most pairs land exactly
    exact = 0
    total = 0
    for seed in range(40):
        p = sample_path(1.0, 32, derive_seed(8, seed, 4))
        q = refine(p)
        assert q.steps == 64
        assert q.level == 1
        halves_l = q.increments[0::2]
        halves_r = q.increments[1::2]
        sums = halves_l + halves_r
        unit = np.spacing(np.maximum(np.abs(halves_l), np.abs(halves_r)))
        assert np.all(np.abs(sums - p.increments) <= unit)
        exact += int(np.sum(sums == p.increments))
        total += p.steps
    assert exact >= 0.6 * total


def test_refine_preserves_coarse_values():
    p = sample_path(3.0, 16, 7)
    q = refine(refine(p))
    pv = p.values()
    qv = q.values()
    for k in range(p.steps + 1):
        # a few rounding units of headroom; partial sums re-associate
        tol = 8 * np.spacing(max(1.0, abs(pv[k])))
        assert abs(qv[4 * k] - pv[k]) <= tol


def test_refine_is_deterministic():
    p = sample_path(1.0, 8, 99)
    assert np.array_equal(refine(p).increments, refine(p).increments)


def test_bridge_midpoint_variance():
    # midpoint deviation dB_left - dB/2 has variance T/(4K)
    t, k, n = 1.0, 4, 20_000
    devs = np.empty(n)
    for i in range(n):
        p = sample_path(t, k, derive_seed(3, i, 10))
        q = refine(p)
        devs[i] = q.increments[0] - 0.5 * p.increments[0]
    target = t / (4 * k)
    var = devs.var(ddof=1)
    se = target * np.sqrt(2.0 / (n - 1))
    assert abs(var - target) <= 3 * se


def test_refined_increments_have_correct_variance():
    p = sample_path(1.0, 2, 0)
    q = refine(p)
    assert q.dt == pytest.approx(0.25)
    assert q.horizon == p.horizon


def test_save_load_round_trip(tmp_path):
    p = refine(sample_path(1.5, 10, 77))
    f = tmp_path / "path.bin"
    with open(f, "wb") as fh:
        save_path(p, fh)
    with open(f, "rb") as fh:
        q = load_path(fh)
    assert q.horizon == p.horizon
    assert q.level == p.level
    assert q.seed == p.seed
    assert np.array_equal(q.increments, p.increments)


def test_truncated_file_rejected(tmp_path):
    p = sample_path(1.0, 10, 5)
    buf = io.BytesIO()
    save_path(p, buf)
    data = buf.getvalue()
    with pytest.raises(ConfigError, match="truncated"):
        load_path(io.BytesIO(data[:-8]))


def test_constructor_validation():
    with pytest.raises(ConfigError, match="horizon"):
        sample_path(0.0, 4, 0)
    with pytest.raises(ConfigError, match="steps"):
        sample_path(1.0, 0, 0)
    with pytest.raises(ConfigError):
        BrownianPath(horizon=1.0, increments=np.array([]), seed=0, level=0)
    with pytest.raises(ConfigError, match="level"):
        BrownianPath(horizon=1.0, increments=np.zeros(2), seed=0, level=-1)
