import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from loopdet import connection as cn
from loopdet import geometry as geo
from loopdet import spectral as sp

UNIT = geo.TorusSpec.unit(2)
TRIV = cn.trivial()

# frozen from the independent Bessel-series oracle below (flat) and from the
# t0 = 1e-3 / 1e-2 split agreement (SU(2))
ZETA_DIFF_FLAT_03 = -0.7555657902930477
ZETA_DIFF_SU2 = -0.18738489


def bessel_oracle(theta, m0=1.0, K=40):
    """Flat zeta difference as an image sum of K_1 Bessel functions."""
    k = np.arange(-K, K + 1)
    kk = np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)
    kk = kk[np.any(kk != 0, axis=1)]
    a = (kk ** 2).sum(1) / 2.0
    # int_0^inf t^-2 exp(-m0 t - a/t) dt = 2 sqrt(m0/a) K_1(2 sqrt(a m0))
    integ = 2 * np.sqrt(m0 / a) * special.k1(2 * np.sqrt(a * m0))
    return float(np.sum((np.cos(2 * np.pi * kk @ np.asarray(theta)) - 1) * integ) / (2 * np.pi))


def test_mode_matrices_hermitian_positive():
    for conn in (cn.su2_constant(), cn.flat_abelian([0.3, 0.1]), cn.constant_matrix(
            [0.4 * np.array([[0, 1.0], [-1, 0]]), np.zeros((2, 2))], real=True)):
        model = sp.SpectralModel(UNIT, conn, 1.0, mode_cutoff=6, t_floor=0.5)
        M = model.matrices
        assert np.abs(M - np.conj(np.swapaxes(M, 1, 2))).max() <= 1e-12
        assert model.eigvals.min() > 0


def test_flat_reduces_to_scalar_modes():
    theta = np.array([0.3, -0.2])
    model = sp.SpectralModel(UNIT, cn.flat_abelian(theta), 1.5, mode_cutoff=5, t_floor=0.5)
    n = model.modes
    expect = 0.5 * ((2 * np.pi * (n + theta)) ** 2).sum(1) + 1.5
    assert np.abs(model.matrices[:, 0, 0].real - expect).max() <= 1e-9
    assert np.abs(model.matrices[:, 0, 0].imag).max() == 0


def test_gap():
    assert sp.SpectralModel(UNIT, TRIV, 1.0).spectral_gap() == pytest.approx(1.0, abs=1e-14)
    assert sp.SpectralModel(UNIT, cn.flat_abelian([0.3, 0]), 1.0).spectral_gap() > 1.0


def test_heat_trace_large_t():
    model = sp.SpectralModel(UNIT, TRIV, 1.0)
    tr, _ = model.heat_trace(30.0)
    assert abs(tr / math.exp(-30.0) - 1) <= 1e-10


def test_heat_trace_difference_two_orders():
    theta = np.array([0.3, 0.0])
    a = sp.SpectralModel(UNIT, cn.flat_abelian(theta), 1.0)
    b = sp.SpectralModel(UNIT, TRIV, 1.0)
    diff = a.heat_trace(1.0)[0] - b.heat_trace(1.0)[0]
    n = np.arange(-20, 21)
    nn = np.stack(np.meshgrid(n, n, indexing="ij"), -1).reshape(-1, 2)
    terms = np.exp(-2 * np.pi ** 2 * ((nn + theta) ** 2).sum(1)) - np.exp(-2 * np.pi ** 2 * (nn ** 2).sum(1))
    forward = math.exp(-1) * math.fsum(terms)
    backward = math.exp(-1) * np.sum(np.sort(terms)[::-1])
    assert diff < 0
    assert abs(forward - backward) <= 1e-12
    assert abs(diff - forward) <= 1e-12


@pytest.mark.parametrize("conn", [TRIV, cn.su2_constant()])
def test_weyl_leading_order(conn):
    model = sp.SpectralModel(UNIT, conn, 1.0)
    t = model.t_floor
    tr, _ = model.heat_trace(t)
    ratio = t * tr / (conn.rank / (2 * np.pi))
    assert abs(ratio - 1) <= 2e-3


def test_floor_enforced():
    model = sp.SpectralModel(UNIT, TRIV, 1.0, t_floor=1e-2)
    with pytest.raises(ValueError):
        model.heat_trace(1e-4)
    with pytest.raises(TypeError):
        sp.SpectralModel(UNIT, cn.uniform_field(1.0), 1.0)
    with pytest.raises(ValueError):
        sp.SpectralModel(UNIT, TRIV, 0.0)


def test_zeta_same_model_zero():
    m = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0)
    assert sp.zeta_prime_diff(m, m).value == 0.0


def test_zeta_flat_matches_bessel_oracle():
    z = sp.zeta_prime_diff(sp.SpectralModel(UNIT, TRIV, 1.0), sp.SpectralModel(UNIT, cn.flat_abelian([0.3, 0]), 1.0))
    oracle = bessel_oracle([0.3, 0.0])
    assert abs(oracle - ZETA_DIFF_FLAT_03) <= 1e-13
    assert abs(z.value - oracle) <= max(z.error, 1e-12)
    assert z.error <= 1e-9


@pytest.mark.parametrize("theta", [[0.5, 0.5], [0.1, 0.7]])
def test_zeta_flat_other_twists(theta):
    z = sp.zeta_prime_diff(sp.SpectralModel(UNIT, TRIV, 1.0), sp.SpectralModel(UNIT, cn.flat_abelian(theta), 1.0))
    assert abs(z.value - bessel_oracle(theta)) <= max(z.error, 1e-12)


def test_zeta_split_self_consistency():
    conn = cn.flat_abelian([0.5, 0.5])
    vals = []
    for t0 in (1e-3, 1e-4):
        a = sp.SpectralModel(UNIT, TRIV, 1.0, t_floor=t0)
        b = sp.SpectralModel(UNIT, conn, 1.0, t_floor=t0)
        vals.append(sp.zeta_prime_diff(a, b, t0))
    assert abs(vals[0].value - vals[1].value) <= vals[0].error + vals[1].error


def test_zeta_su2_frozen():
    zs = [sp.zeta_prime_diff(sp.SpectralModel(UNIT, TRIV, 1.0, t_floor=t0),
                             sp.SpectralModel(UNIT, cn.su2_constant(), 1.0, t_floor=t0), t0) for t0 in (1e-3, 1e-2)]
    assert abs(zs[0].value - zs[1].value) <= zs[0].error + zs[1].error
    assert abs(zs[0].value - ZETA_DIFF_SU2) <= 1e-8 + zs[0].error


def test_zeta_antipodal_and_periodic():
    ref = sp.SpectralModel(UNIT, TRIV, 1.0)
    base = sp.zeta_prime_diff(ref, sp.SpectralModel(UNIT, cn.flat_abelian([0.3, 0.2]), 1.0)).value
    neg = sp.zeta_prime_diff(ref, sp.SpectralModel(UNIT, cn.flat_abelian([-0.3, -0.2]), 1.0)).value
    shifted = sp.zeta_prime_diff(ref, sp.SpectralModel(UNIT, cn.flat_abelian([1.3, -1.8]), 1.0)).value
    assert abs(base - neg) <= 1e-12
    assert abs(base - shifted) <= 1e-12


def test_gauge_periodic_spectrum():
    a = sp.SpectralModel(UNIT, cn.flat_abelian([0.3, 0.2]), 1.0, mode_cutoff=8, t_floor=0.5)
    b = sp.SpectralModel(UNIT, cn.flat_abelian([1.3, -0.8]), 1.0, mode_cutoff=9, t_floor=0.5)
    ea = np.sort(a.eigvals.ravel())[:100]
    eb = np.sort(b.eigvals.ravel())[:100]
    assert np.abs(ea - eb).max() <= 1e-9 * ea.max()


def test_incompatible_models():
    with pytest.raises(ValueError):
        sp.zeta_prime_diff(sp.SpectralModel(UNIT, TRIV, 1.0), sp.SpectralModel(UNIT, TRIV, 2.0))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.01, 3.0))
def test_twisted_kernel_trivial_is_scalar_kernel(x, y, t):
    model = sp.SpectralModel(UNIT, cn.trivial(2), 1.0)
    K, _ = model.heat_kernel_twisted(t, [x, y], [0.2, 0.9])
    p = geo.heat_kernel(UNIT, t, [x, y], [0.2, 0.9]) * math.exp(-t)
    assert np.abs(K - p * np.eye(2)).max() <= 1e-10 * max(p, 1.0)


@pytest.mark.parametrize("conn", [cn.su2_constant(), cn.flat_abelian([0.3, 0.0])])
def test_kernel_trace_identity(conn):
    model = sp.SpectralModel(UNIT, conn, 1.0)
    for t in (0.01, 0.3, 2.0):
        K, _ = model.heat_kernel_twisted(t, [0.3, 0.6], [0.3, 0.6])
        tr, _ = model.heat_trace(t)
        assert abs(UNIT.volume * np.trace(K) / conn.rank - tr / conn.rank) <= 1e-12 * tr


def test_semigroup():
    model = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0)
    s, t = 0.1, 0.25
    g = 32
    ax = (np.arange(g) + 0.5) / g
    z = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    x, y = np.array([0.1, 0.8]), np.array([0.55, 0.3])
    acc = np.zeros((2, 2), dtype=complex)
    for zi in z:
        acc += model.heat_kernel_twisted(s, x, zi)[0] @ model.heat_kernel_twisted(t, zi, y)[0]
    acc /= len(z)
    direct = model.heat_kernel_twisted(s + t, x, y)[0]
    assert np.abs(acc - direct).max() <= 1e-12
    # mode-wise composition of the propagators
    E = lambda u: np.einsum("kab,kb,kcb->kac", model.eigvecs, np.exp(-u * model.eigvals), np.conj(model.eigvecs))
    assert np.abs(E(s) @ E(t) - E(s + t)).max() <= 1e-12


def random_section(rng, rank, band=3, k=4, real=False):
    modes = rng.integers(-band, band + 1, size=(k, 2))
    modes = np.unique(modes, axis=0)
    coeffs = rng.standard_normal((len(modes), rank)) + 1j * rng.standard_normal((len(modes), rank))
    return sp.Section(modes, coeffs, real)


@given(st.integers(0, 2 ** 31))
def test_green_inverse_property(seed):
    rng = np.random.default_rng(seed)
    model = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0)
    s1 = random_section(rng, 2)
    Ls = model.apply(s1)
    g = model.green_pairing(s1, Ls)
    norm = np.sum(np.abs(s1.coeffs) ** 2)
    assert abs(g - norm) <= 1e-12 * norm


def test_green_single_mode():
    model = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0)
    v = np.array([0.3 + 0.1j, -0.7j])
    s = sp.Section.single_mode([1, -2], v)
    M = model.mode_matrix([1, -2])
    assert abs(model.green_pairing(s, s) - np.conj(v) @ np.linalg.solve(M, v)) <= 1e-14


def test_green_time_integral():
    rng = np.random.default_rng(2)
    model = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0)
    s1, s2 = random_section(rng, 2), random_section(rng, 2)
    s2 = sp.Section(np.concatenate([s1.modes, s2.modes]), np.concatenate([s1.coeffs[::-1], s2.coeffs]))
    f = lambda t, part: getattr(model.heat_pairing(t, s1, s2), part)
    re, _ = integrate.quad(f, 0, np.inf, args=("real",), epsabs=1e-13, epsrel=1e-12, limit=400)
    im, _ = integrate.quad(f, 0, np.inf, args=("imag",), epsabs=1e-13, epsrel=1e-12, limit=400)
    assert abs(complex(re, im) - model.green_pairing(s1, s2)) <= 1e-8


def test_green_errors():
    model = sp.SpectralModel(UNIT, cn.su2_constant(), 1.0, mode_cutoff=3, t_floor=2.0)
    with pytest.raises(ValueError):
        model.green_pairing(sp.Section.single_mode([5, 0], [1, 0]), sp.Section.single_mode([5, 0], [1, 0]))
    with pytest.raises(ValueError):
        model.green_pairing(sp.Section.single_mode([0, 0], [1]), sp.Section.single_mode([0, 0], [1]))


def test_section_evaluate_and_symmetry():
    s = sp.Section([[1, 0], [-1, 0]], [[0.5 + 0.5j], [0.5 - 0.5j]], real=True)
    assert s.conjugate_symmetric()
    vals = s.evaluate(UNIT, np.random.default_rng(0).random((10, 2)))
    assert np.abs(vals.imag).max() <= 1e-15
