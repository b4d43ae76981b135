import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from loopdet import geometry as geo
from loopdet import loopsoup as ls
from loopdet._parallel import chunk_rng

UNIT = geo.TorusSpec.unit(2)
ONE = geo.MassField.constant(1.0)


def counts_and_durations(config, n, m=ONE, spec=UNIT, stream=0):
    out = ls.map_replica_chunks(lambda b: (np.bincount(b.replica, minlength=b.n_replicas), b.durations, b.replica),
                                spec, config, m, n, need_paths=False, workers=1, stream=stream)
    counts = np.concatenate([o[0] for o in out])
    return counts, out


def test_config_validation():
    with pytest.raises(ValueError):
        ls.SoupConfig(delta=1.0, big_r=0.5)
    with pytest.raises(ValueError):
        ls.SoupConfig(delta=0.0)
    with pytest.raises(ValueError):
        ls.SoupConfig(big_r=np.inf)
    with pytest.raises(ValueError):
        ls.SoupConfig(intensity_alpha=-1)


def test_intensity_empty_interval():
    assert ls.intensity_mass(UNIT, 1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        ls.intensity_mass(UNIT, 1.0, 0.5)


def test_intensity_two_rules():
    a = ls.intensity_mass(UNIT, 0.5, 1.0)
    b = ls.intensity_mass_images(UNIT, 0.5, 1.0)
    assert abs(a - b) <= 1e-10 * a
    for spec, d, r in [(UNIT, 1e-3, 20.0), (geo.TorusSpec(2, (1.0, 2.0)), 1e-2, 5.0),
                       (geo.TorusSpec.unit(3), 1e-3, 3.0)]:
        a, b = ls.intensity_mass(spec, d, r), ls.intensity_mass_images(spec, d, r)
        assert abs(a - b) <= 1e-10 * a


@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_intensity_monotone(d1, d2):
    lo, hi = sorted((d1, d2))
    if hi - lo < 1e-6:
        return
    assert ls.intensity_mass(UNIT, lo, 20.0) > ls.intensity_mass(UNIT, hi, 20.0)


def test_duration_sampler_cdf():
    s = ls.duration_sampler(UNIT, 1e-3, 20.0)
    u = np.linspace(0.001, 0.999, 50)
    assert np.abs(s.cdf_at(s(u)) - u).max() <= 1e-8
    t = s(np.random.default_rng(0).random(10000))
    assert t.min() >= 1e-3 and t.max() <= 20.0


def test_duration_histogram():
    cfg = ls.SoupConfig(delta=1e-3, big_r=20.0, seed=4)
    s = ls.duration_sampler(UNIT, cfg.delta, cfg.big_r)
    rng = np.random.default_rng(21)
    n = 400000
    t = s(rng.random(n))
    edges = np.geomspace(cfg.delta, cfg.big_r, 13)
    total = ls.intensity_mass(UNIT, cfg.delta, cfg.big_r)
    for a, b in zip(edges[:-1], edges[1:]):
        p = ls.intensity_mass(UNIT, a, b) / total
        c = np.sum((t >= a) & (t < b))
        assert abs(c - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_zero_intensity_is_empty(rng):
    soup = ls.sample_soup(UNIT, ls.SoupConfig(intensity_alpha=0.0), ONE, rng)
    assert len(soup) == 0 and soup.raw_count == 0


def test_kept_count_constant_mass():
    cfg = ls.SoupConfig(delta=1e-3, big_r=20.0, seed=31)
    counts, _ = counts_and_durations(cfg, 10000)
    mean, se = counts.mean(), counts.std(ddof=1) / 100
    assert abs(mean - ls.expected_kept_count(UNIT, cfg, 1.0)) <= 3 * se
    # finiteness and concentration
    assert np.all(np.isfinite(counts))
    assert abs(counts.std() / mean) < 0.2


def test_kept_count_cosine_mass():
    # thinning with a non-constant mass, checked against the quadrature of E[e^{-int m}]
    m = geo.MassField.from_function(lambda p: 1.0 + 0.5 * np.cos(2 * np.pi * p[:, 0]), lower_bound=0.5)
    cfg = ls.SoupConfig(delta=0.05, big_r=4.0, seed=7)
    out = ls.map_replica_chunks(lambda b: np.bincount(b.replica, minlength=b.n_replicas), UNIT, cfg, m,
                                3000, need_paths=True, workers=1)
    counts = np.concatenate(out)
    # E[e^{-int m}] per duration, estimated on independent bridges
    rng = chunk_rng(99, 0)
    ts = np.geomspace(cfg.delta, cfg.big_r, 40)
    means, ses = [], []
    for t in ts:
        n = 4000
        pts, offs = geo.build_paths(UNIT.uniform_points(n, rng), geo.sample_windings(UNIT, np.full(n, t), np.zeros((n, 2)), rng),
                                    np.full(n, t), np.full(n, 256), rng)
        w = np.exp(-geo.batch_mass_integrals(UNIT, pts, offs, np.full(n, t), m))
        means.append(w.mean())
        ses.append(w.std(ddof=1) / math.sqrt(n))
    p = geo.diagonal_heat_kernel(UNIT, ts)
    weights = np.array([integrate.simpson(e, x=np.log(ts)) for e in np.eye(len(ts))])
    expected = weights @ (p * np.array(means))
    oracle_se = math.sqrt(np.sum((weights * p * np.array(ses)) ** 2))
    se = math.hypot(counts.std(ddof=1) / math.sqrt(len(counts)), oracle_se)
    assert abs(counts.mean() - expected) <= 3 * se


def test_restriction_consistency():
    big = ls.SoupConfig(delta=1e-3, big_r=20.0, seed=41)
    small = ls.SoupConfig(1.0, 1e-2, 20.0, 42)
    _, parts = counts_and_durations(big, 10000)
    restricted = np.concatenate([np.bincount(r[(d >= 1e-2)], minlength=len(c)) for c, d, r in parts])
    direct, parts2 = counts_and_durations(small, 10000)
    diff = restricted.mean() - direct.mean()
    se = math.hypot(restricted.std(ddof=1), direct.std(ddof=1)) / 100
    assert abs(diff) <= 3 * se
    d1 = np.concatenate([d[d >= 1e-2] for _, d, _ in parts])
    d2 = np.concatenate([d for _, d, _ in parts2])
    edges = np.geomspace(1e-2, 20.0, 9)
    h1, _ = np.histogram(d1, edges)
    h2, _ = np.histogram(d2, edges)
    p1, p2 = h1 / h1.sum(), h2 / h2.sum()
    se = np.sqrt(p1 * (1 - p1) / h1.sum() + p2 * (1 - p2) / h2.sum())
    assert np.all(np.abs(p1 - p2) <= 3 * se)


def test_band_independence():
    cfg = ls.SoupConfig(delta=1e-3, big_r=20.0, seed=43)
    _, parts = counts_and_durations(cfg, 10000)
    lo = np.concatenate([np.bincount(r[d < 1e-2], minlength=len(c)) for c, d, r in parts])
    hi = np.concatenate([np.bincount(r[d >= 1e-2], minlength=len(c)) for c, d, r in parts])
    corr = np.corrcoef(lo, hi)[0, 1]
    assert abs(corr) <= 3 / math.sqrt(len(lo))


def test_campbell_examples():
    rng = np.random.default_rng(0)
    zero = ls.campbell_expectation_check(2.0, lambda x: np.zeros(len(x)), 1000, rng)
    assert zero.mc_mean == 1 and zero.closed_form == 1
    rep = ls.campbell_expectation_check(2.0, lambda x: np.full(len(x), -0.5), 200000, rng)
    assert abs(rep.closed_form - math.exp(-1)) <= 1e-12
    assert rep.passed
    rep = ls.campbell_expectation_check(3.0, lambda x: 0.4 * np.exp(2j * np.pi * x), 200000, rng)
    assert abs(rep.closed_form - 1) <= 1e-10
    assert rep.passed


def test_snapshot_roundtrip(tmp_path):
    cfg = ls.SoupConfig(delta=1e-2, big_r=5.0, seed=3)
    soup = ls.sample_soup(UNIT, cfg, ONE, chunk_rng(3, 0))
    path = tmp_path / "soup.bin"
    ls.save_soup(soup, path)
    back = ls.load_soup(path)
    assert len(back) == len(soup) and back.raw_count == soup.raw_count
    assert back.config == soup.config and back.torus == soup.torus
    for a, b in zip(soup.loops, back.loops):
        assert a.duration == b.duration
        assert np.array_equal(a.lifted_points, b.lifted_points)
        assert np.array_equal(a.winding, b.winding)
    raw = path.read_bytes()
    assert raw[:8] == ls.SNAPSHOT_MAGIC
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    assert header["schema_version"] == ls.SNAPSHOT_VERSION
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTASOUP" + raw[8:])
    with pytest.raises(ValueError):
        ls.load_soup(bad)


def test_loops_inside_window(rng):
    cfg = ls.SoupConfig(delta=1e-2, big_r=2.0, seed=5)
    soup = ls.sample_soup(UNIT, cfg, ONE, rng)
    d = soup.durations
    assert np.all((d >= cfg.delta) & (d <= cfg.big_r))
    assert all(l.closed and np.array_equal(l.displacement, l.winding) for l in soup.loops)
