import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loopdet import connection as cn
from loopdet import geometry as geo
from loopdet import gff
from loopdet.spectral import Section, SpectralModel

UNIT = geo.TorusSpec.unit(2)
J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def su2_model():
    return SpectralModel(UNIT, cn.su2_constant(), 1.0)


def so2_model():
    return SpectralModel(UNIT, cn.constant_matrix([0.4 * J, 0.9 * J], real=True), 1.0)


def random_section(rng, rank=2, band=2):
    modes = np.unique(rng.integers(-band, band + 1, size=(3, 2)), axis=0)
    return Section(modes, rng.standard_normal((len(modes), rank)) + 1j * rng.standard_normal((len(modes), rank)))


def real_section(rng, n=(1, 0)):
    v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    return Section([n, [-k for k in n]], [v, np.conj(v)], real=True)


def test_zero_mean():
    model = su2_model()
    f = gff.sample_gff(model, np.random.default_rng(0), 20000, modes=[[0, 0], [1, -1]])
    m = f.coeffs.mean(axis=0)
    se = f.coeffs.std(axis=0) / math.sqrt(20000)
    assert np.all(np.abs(m) <= 4 * se)


def test_single_mode_covariance():
    model = su2_model()
    n = 100000
    f = gff.sample_gff(model, np.random.default_rng(1), n, modes=[[1, 0]])
    x = f.coeffs[:, 0, :]
    emp = np.einsum("sa,sb->ab", x, np.conj(x)) / n
    exact = np.linalg.inv(model.mode_matrix([1, 0]))
    terms = np.einsum("sa,sb->sab", x, np.conj(x))
    se = np.sqrt(terms.real.var(axis=0) + terms.imag.var(axis=0)) / math.sqrt(n)
    assert np.all(np.abs(emp - exact) <= 4 * se)


def test_covariance_battery():
    model = su2_model()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        s1, s2 = random_section(rng), random_section(rng)
        modes = gff._support([s1, s2], False)
        f = gff.sample_gff(model, rng, 20000, modes=modes)
        prod = f.pair(s1) * np.conj(f.pair(s2))
        se = math.hypot(prod.real.std(), prod.imag.std()) / math.sqrt(len(prod))
        worst = max(worst, abs(prod.mean() - model.green_pairing(s1, s2)) / se)
    assert worst <= 4.5


def test_real_field_is_real():
    model = so2_model()
    rng = np.random.default_rng(3)
    s = real_section(rng)
    f = gff.sample_gff(model, rng, 100, modes=gff._support([s], True), real=True)
    assert np.abs(f.pair(s).imag).max() <= 1e-12
    with pytest.raises(ValueError):
        gff.sample_gff(su2_model(), rng, 10, modes=[[0, 0]], real=True)
    with pytest.raises(ValueError):
        gff.sample_gff(model, rng, 10, modes=[[1, 0]], real=True)


@pytest.mark.parametrize("factory", [su2_model, lambda: SpectralModel(UNIT, cn.flat_abelian([0.3, 0.1]), 1.0)])
def test_path_integral_covariance(factory):
    model = factory()
    r = model.rank
    s1 = Section.single_mode([0, 1], np.ones(r) / math.sqrt(r))
    s2 = Section.single_mode([0, 1], np.arange(1, r + 1) * (1 + 0.5j))
    mean, se, se_im = gff.path_integral_covariance(model, s1, s2, 6000, np.random.default_rng(4))
    exact = model.green_pairing(s1, s2)
    assert abs(mean.real - exact.real) <= 4 * se
    assert abs(mean.imag - exact.imag) <= 4 * se_im


def test_single_member_weight():
    ens = gff.ConnectionEnsemble([su2_model()], [1.0])
    w = gff.annealed_weights(ens)
    assert w.weights.tolist() == [1.0]


def test_ensemble_validation():
    with pytest.raises(ValueError):
        gff.ConnectionEnsemble([su2_model()], [0.5])
    with pytest.raises(ValueError):
        gff.ConnectionEnsemble([su2_model(), SpectralModel(UNIT, cn.trivial(), 1.0)], [0.5, 0.5])
    with pytest.raises(ValueError):
        gff.ConnectionEnsemble([su2_model(), SpectralModel(UNIT, cn.trivial(2), 2.0)], [0.5, 0.5])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(-50, 50))
def test_normalize_weights_shift_invariant(logs, c):
    probs = np.full(len(logs), 1.0 / len(logs))
    a, _ = gff.normalize_weights(probs, logs)
    b, _ = gff.normalize_weights(probs, np.array(logs) + c)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-15)
    assert abs(a.sum() - 1) <= 1e-12


def test_spectral_weights_follow_zeta():
    ens = gff.ConnectionEnsemble([SpectralModel(UNIT, cn.trivial(), 1.0),
                                  SpectralModel(UNIT, cn.flat_abelian([0.3, 0.0]), 1.0)], [0.5, 0.5])
    w = gff.annealed_weights(ens)
    # rank one, so the exponent is zeta'/2
    e = math.exp(0.5 * -0.7555657902930477)
    assert w.weights == pytest.approx([1 / (1 + e), e / (1 + e)], rel=1e-9)


def test_pairings_count():
    assert len(list(gff.pairings(range(4)))) == 3
    assert len(list(gff.pairings(range(6)))) == 15
    for p in gff.pairings(range(6)):
        assert sorted(i for pair in p for i in pair) == list(range(6))


def test_symanzik_k1_single_connection():
    model = su2_model()
    rng = np.random.default_rng(5)
    s1, s2 = Section.single_mode([1, 0], [1.0, 0.5j]), Section.single_mode([1, 0], [0.3, 1.0])
    ens = gff.ConnectionEnsemble([model], [1.0])
    rep = gff.symanzik_moment(ens, [s1, s2], lambda i: 1.0, 1, rng, 100000)
    assert abs(rep.formula - model.green_pairing(s1, s2)) <= 1e-15
    assert abs(rep.z) <= 4 and abs(rep.z_imag) <= 4


def test_symanzik_k2_real_isserlis():
    model = so2_model()
    rng = np.random.default_rng(6)
    s = real_section(rng)
    ens = gff.ConnectionEnsemble([model], [1.0])
    rep = gff.symanzik_moment(ens, [s] * 4, lambda i: 1.0, 2, rng, 200000)
    G = model.green_pairing(s, s)
    assert abs(rep.formula - 3 * G ** 2) <= 1e-12 * abs(G) ** 2
    assert abs(rep.formula) > 0
    assert abs(rep.z) <= 4


def test_symanzik_indicator():
    models = [SpectralModel(UNIT, cn.trivial(), 1.0), SpectralModel(UNIT, cn.flat_abelian([0.5, 0.0]), 1.0)]
    ens = gff.ConnectionEnsemble(models, [0.5, 0.5])
    s = Section.single_mode([0, 0], [1.0])
    rep = gff.symanzik_moment(ens, [s, s], lambda i: float(i == 1), 1, np.random.default_rng(7), 100000)
    assert abs(rep.formula - rep.weights[1] * models[1].green_pairing(s, s)) <= 1e-14
    assert rep.counts.sum() == 100000
    assert abs(rep.z) <= 4


def test_symanzik_errors():
    ens = gff.ConnectionEnsemble([su2_model()], [1.0])
    s1 = Section.single_mode([0, 0], [1.0])
    with pytest.raises(ValueError):
        gff.symanzik_moment(ens, [s1, s1], lambda i: 1.0, 1, np.random.default_rng(0), 10)
    s2 = Section.single_mode([0, 0], [1.0, 0.0])
    with pytest.raises(ValueError):
        gff.symanzik_moment(ens, [s2], lambda i: 1.0, 1, np.random.default_rng(0), 10)
    with pytest.raises(ValueError):
        gff.symanzik_moment(ens, [s2] * 8, lambda i: 1.0, 4, np.random.default_rng(0), 10)
