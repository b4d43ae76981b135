"""Loop-soup estimators of determinant ratios and their bias certificates.

The soup estimator averages ``prod_loops (1 + chi)`` over independent soups.
The integral form integrates ``vol p_t(0,0) E_t[e^{-int m} chi]`` over log t
and exponentiates, which is the same ratio by the Campbell formula.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import integrate

from . import _kernels
from ._parallel import chunk_rng, chunk_sizes, parallel_map
from .connection import (ConnectionSpec, chi_batch, holonomy_batch, trace_norm,
                         winding_traces)
from .geometry import (MassField, TorusSpec, batch_mass_integrals, build_paths,
                       diagonal_heat_kernel, sample_windings, steps_for_duration)
from .loopsoup import SoupConfig, map_replica_chunks
from .stats import Welford, loglog_slope

PATH_CHUNK = 32
FLAT_CHUNK = 256


@dataclass
class ProductEstimate:
    mean: complex
    stderr: float
    n_replicas: int
    delta: float
    big_r: float
    small_t_bias_bound: float = 0.0
    large_r_bias_bound: float = 0.0
    stderr_imag: float = 0.0
    alpha: float = 1.0
    fitted_c: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def log_bias(self) -> float:
        """Bound on |log E[Q_delta^R] - log E[Q]|."""
        return self.alpha * (self.small_t_bias_bound + self.large_r_bias_bound)

    @property
    def mean_bias(self) -> float:
        return abs(self.mean) * math.expm1(self.log_bias)

    @property
    def log_mean(self) -> float:
        return math.log(self.mean.real) if self.mean.real > 0 else float("nan")

    @property
    def log_mean_err(self) -> float:
        return self.stderr / self.mean.real if self.mean.real > 0 else float("inf")

    def agrees_with(self, value: float, value_err: float = 0.0, k: float = 3.0) -> bool:
        return abs(self.mean.real - value) <= k * math.hypot(self.stderr, value_err) + self.mean_bias


def product_over_soup(soup, conn0: ConnectionSpec, conn1: ConnectionSpec):
    """``prod (1 + chi)`` over the loops of one LoopSoup."""
    if conn0.same_as(conn1) or len(soup.loops) == 0:
        return 1.0 + 0j
    pts = np.concatenate([l.lifted_points for l in soup.loops])
    offsets = np.concatenate([[0], np.cumsum([l.n_steps + 1 for l in soup.loops])]).astype(np.int64)
    windings = np.array([l.winding for l in soup.loops])
    chis = chi_batch(conn0, conn1, pts, offsets, soup.torus, windings)
    return complex(np.prod(1.0 + chis))


def _batch_chi(spec, batch, conn0, conn1):
    if len(batch) == 0:
        return np.zeros(0, dtype=complex)
    if not batch.has_paths:
        return winding_traces(conn1, batch.windings) - winding_traces(conn0, batch.windings)
    return chi_batch(conn0, conn1, batch.points, batch.offsets, spec, batch.windings)


def replica_products(spec, batch, conn0, conn1, min_duration=None):
    """Per-replica products; loops shorter than ``min_duration`` are skipped."""
    chis = _batch_chi(spec, batch, conn0, conn1)
    groups = batch.replica
    if min_duration is not None:
        keep = batch.durations >= min_duration
        chis, groups = chis[keep], groups[keep]
    out = np.empty(batch.n_replicas, dtype=complex)
    _kernels.group_products(np.ascontiguousarray(1.0 + chis), np.ascontiguousarray(groups), batch.n_replicas, out)
    return out


def needs_paths(conn0, conn1, m: MassField) -> bool:
    return not (conn0.winding_determined and conn1.winding_determined and m.is_constant)


def soup_products(spec, config, m, conn0, conn1, n_replicas, workers=None, stream=0):
    """Array of per-replica products, reproducible for a given seed."""
    paths = needs_paths(conn0, conn1, m)
    chunk = PATH_CHUNK if paths else FLAT_CHUNK
    parts = map_replica_chunks(lambda b: replica_products(spec, b, conn0, conn1),
                               spec, config, m, n_replicas, need_paths=paths,
                               workers=workers, chunk=chunk, stream=stream)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)


def small_t_tail_bound(spec: TorusSpec, delta: float, fitted_c: float) -> float:
    """``2 c vol int_0^delta t (2 pi t)^{-d/2} dt`` from the leading kernel term.

    The factor 2 covers the exponentially small image corrections.
    """
    if delta <= 0:
        return 0.0
    d = spec.dim
    p = 2.0 - d / 2.0
    return 2.0 * fitted_c * spec.volume * (2 * np.pi) ** (-d / 2) * delta ** p / p


def large_r_tail_bound(spec: TorusSpec, big_r: float, m0: float) -> float:
    """``2 vol int_R^inf e^{-m0 t} p_t(0,0) / t dt`` using |chi| <= 2."""
    if m0 <= 0:
        raise ValueError("the large-loop bound needs a positive mass lower bound")
    if not np.isfinite(big_r):
        return 0.0
    f = lambda t: math.exp(-m0 * t) * float(diagonal_heat_kernel(spec, t)) / t
    val, _ = integrate.quad(f, big_r, np.inf, epsabs=1e-300, epsrel=1e-10, limit=200)
    return 2.0 * spec.volume * val


def bridge_chi_samples(spec, t, n, conn0, conn1, m: MassField, rng, n_min=64, h0=1e-4,
                       zero_winding=False):
    """``e^{-int m} chi`` on n loops of duration t with uniform base points."""
    base = spec.uniform_points(n, rng)
    w = np.zeros((n, spec.dim)) if zero_winding else sample_windings(spec, np.full(n, t), np.zeros((n, spec.dim)), rng)
    if not needs_paths(conn0, conn1, m):
        chi = winding_traces(conn1, w) - winding_traces(conn0, w)
        weight = math.exp(-m.constant_value * t)
        return weight * chi
    steps = np.full(n, int(steps_for_duration(t, n_min, h0)))
    pts, offs = build_paths(base, w, np.full(n, t), steps, rng)
    chi = chi_batch(conn0, conn1, pts, offs, spec, w)
    masses = batch_mass_integrals(spec, pts, offs, np.full(n, t), m)
    return np.exp(-masses) * chi


def fit_small_t_constant(spec, conn0, conn1, m, delta, samples=20000, n_t=4, seed=0,
                         n_min=64, h0=1e-4):
    """Conservative c with |E[chi]| <= c t^2 on [delta, 10 delta].

    Takes the largest (|mean| + 3 stderr) / t^2 over a log grid.
    """
    if conn0.same_as(conn1):
        return 0.0
    c = 0.0
    for i, t in enumerate(np.geomspace(delta, 10 * delta, n_t)):
        rng = chunk_rng(seed, i, stream=7)
        x = bridge_chi_samples(spec, t, samples, conn0, conn1, m, rng, n_min, h0)
        acc = Welford().add(x)
        bound = abs(acc.mean) + 3 * math.hypot(acc.stderr, acc.stderr_imag)
        c = max(c, bound / t ** 2)
    return c


def estimate_partition_ratio(spec: TorusSpec, config: SoupConfig, m: MassField,
                             conn0: ConnectionSpec, conn1: ConnectionSpec, n_replicas: int,
                             workers=None, fitted_c: Optional[float] = None,
                             fit_samples: int = 20000, bands: Optional[Sequence[float]] = None,
                             keep_samples: bool = False) -> ProductEstimate:
    """Soup estimate of ``E[prod (1 + chi)]`` with cutoff bias certificates.

    With ``bands`` (interior duration edges) the soup is split into
    independent duration bands estimated separately and multiplied.
    """
    m.require_massive()
    if conn0.same_as(conn1):
        return ProductEstimate(1.0 + 0j, 0.0, n_replicas, config.delta, config.big_r,
                               alpha=config.intensity_alpha)
    if fitted_c is None:
        fitted_c = fit_small_t_constant(spec, conn0, conn1, m, config.delta, fit_samples,
                                        seed=config.seed, n_min=config.n_min, h0=config.h0)
    small = small_t_tail_bound(spec, config.delta, fitted_c)
    m0 = m.lower_bound if m.lower_bound is not None else 0.0
    large = large_r_tail_bound(spec, config.big_r, m0) if m0 > 0 else math.inf
    extra = {}
    if bands:
        edges = [config.delta, *bands, config.big_r]
        mean, var_rel, var_rel_im = 1.0 + 0j, 0.0, 0.0
        band_means = []
        for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            q = soup_products(spec, config.with_cutoffs(a, b), m, conn0, conn1, n_replicas,
                              workers, stream=i + 1)
            acc = Welford().add(q)
            band_means.append((acc.mean, acc.stderr))
            mean *= acc.mean
            var_rel += (acc.stderr / abs(acc.mean)) ** 2
            var_rel_im += (acc.stderr_imag / abs(acc.mean)) ** 2
        extra["bands"] = band_means
        return ProductEstimate(mean, abs(mean) * math.sqrt(var_rel), n_replicas, config.delta,
                               config.big_r, small, large, abs(mean) * math.sqrt(var_rel_im),
                               config.intensity_alpha, fitted_c, extra)
    q = soup_products(spec, config, m, conn0, conn1, n_replicas, workers)
    acc = Welford().add(q)
    if keep_samples:
        extra["samples"] = q
    extra["second_moment"] = float(np.mean(np.abs(q) ** 2))
    return ProductEstimate(acc.mean, acc.stderr, n_replicas, config.delta, config.big_r,
                           small, large, acc.stderr_imag, config.intensity_alpha, fitted_c, extra)


@dataclass
class IntegralEstimate:
    integral: complex
    stderr: float
    alpha: float
    t_nodes: np.ndarray
    weights: np.ndarray
    node_means: np.ndarray
    node_stderr: np.ndarray
    node_samples: np.ndarray
    small_t_bias_bound: float = 0.0
    large_r_bias_bound: float = 0.0

    @property
    def ratio(self) -> float:
        return math.exp(self.alpha * self.integral.real)

    @property
    def ratio_err(self) -> float:
        return self.ratio * self.alpha * self.stderr

    @property
    def ratio_bias(self) -> float:
        return self.ratio * math.expm1(self.alpha * (self.small_t_bias_bound + self.large_r_bias_bound))


def log_t_nodes(delta, big_r, n_panels=24, order=8):
    """Gauss-Legendre nodes and weights for ``int f(t) dt/t`` on [delta, R]."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(np.log(delta), np.log(big_r), n_panels + 1)
    a, b = edges[:-1], edges[1:]
    u = (0.5 * (b - a)[:, None] * x + 0.5 * (a + b)[:, None]).ravel()
    wt = (0.5 * (b - a)[:, None] * w).ravel()
    return np.exp(u), wt


def integral_form_estimate(spec: TorusSpec, m: MassField, conn0: ConnectionSpec,
                           conn1: ConnectionSpec, delta: float, big_r: float,
                           total_samples: int = 400_000, min_samples: int = 64,
                           n_panels: int = 24, order: int = 8, alpha: float = 1.0,
                           seed: int = 0, workers=None, fitted_c: float = 0.0,
                           n_min: int = 64, h0: float = 1e-4, pilot: int = 256,
                           t_grid=None, samples_per_t=None) -> IntegralEstimate:
    """Quadrature over log t of ``vol p_t(0,0) E_t[e^{-int m} chi]``.

    Unless ``samples_per_t`` is given, a pilot run of ``pilot`` loops per node
    estimates the spread of the integrand and the remaining budget follows the
    cost-weighted Neyman rule n_i ~ w_i sigma_i / sqrt(c_i), where c_i is the
    number of path steps. ``total_samples`` counts loops of the cheapest cost.
    Pilot samples are only used for the allocation.
    """
    if t_grid is None:
        t, wt = log_t_nodes(delta, big_r, n_panels, order)
    else:
        t, wt = (np.asarray(v, dtype=float) for v in t_grid)
    p = diagonal_heat_kernel(spec, t)
    scale = spec.volume * p * wt
    if conn0.same_as(conn1):
        z = np.zeros(len(t))
        return IntegralEstimate(0j, 0.0, alpha, t, wt, z.astype(complex), z, z.astype(int))
    m0 = m.lower_bound if m.lower_bound is not None else 0.0
    paths = needs_paths(conn0, conn1, m)
    cost = steps_for_duration(t, n_min, h0).astype(float) if paths else np.ones(len(t))

    def run(i, n, stream):
        rng = chunk_rng(seed, i, stream=stream)
        x = bridge_chi_samples(spec, t[i], int(n), conn0, conn1, m, rng, n_min, h0)
        acc = Welford().add(x)
        return acc.mean, math.hypot(acc.stderr, acc.stderr_imag), math.sqrt(acc.var_re + acc.var_im)

    if samples_per_t is not None:
        n = np.full(len(t), int(samples_per_t))
    else:
        # pilot and floor sizes shrink with path cost so long loops stay affordable
        rel = np.sqrt(cost.min() / cost)
        n_pilot = np.maximum(16, np.round(pilot * rel)).astype(int)
        floor = np.maximum(8, np.round(min_samples * rel)).astype(int)
        pil = parallel_map(lambda i: run(i, n_pilot[i], 29), range(len(t)), workers)
        sigma = np.array([r[2] for r in pil])
        # keep a little weight everywhere so no node is starved by an unlucky pilot
        sigma = sigma + 1e-3 * sigma.max() + 1e-300
        share = scale * sigma / np.sqrt(cost)
        budget = total_samples * cost.min()
        lam = budget / np.sum(share * cost)
        n = np.maximum(floor, np.round(lam * share)).astype(int)

    res = parallel_map(lambda i: run(i, n[i], 11), range(len(t)), workers)
    means = np.array([r[0] for r in res], dtype=complex)
    ses = np.array([r[1] for r in res])
    integral = complex(np.sum(scale * means))
    stderr = float(np.sqrt(np.sum((scale * ses) ** 2)))
    small = small_t_tail_bound(spec, delta, fitted_c)
    large = large_r_tail_bound(spec, big_r, m0) if m0 > 0 else math.inf
    return IntegralEstimate(integral, stderr, alpha, t, wt, means, ses, n, small, large)


@dataclass
class MomentReport:
    t_grid: np.ndarray
    moments: dict            # p -> array over t of sup_x E|I - Hol|^p
    moment_stderr: dict
    mean_defect: np.ndarray  # sup_x |E[I - Hol]|
    mean_defect_stderr: np.ndarray
    slopes: dict = field(default_factory=dict)       # name -> (slope, stderr)

    def interval(self, name, z=1.96):
        s, e = self.slopes[name]
        return s - z * e, s + z * e


def moments_vs_t(spec: TorusSpec, conn: ConnectionSpec, t_grid, x_grid, samples: int,
                 seed: int = 0, powers=(1, 2, 4), zero_winding=False, n_min=64, h0=1e-4,
                 chunk: int = 20000, workers=None) -> MomentReport:
    """Empirical moments of ``I - Hol`` over bridges at fixed base points.

    The norm is the Frobenius norm. Slopes are weighted log-log fits. The
    mean defect is estimated antithetically with the reversed loop.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t grid must be strictly increasing")
    if t_grid[0] <= 0 or t_grid[-1] > 0.2:
        raise ValueError("t grid must lie in (0, 0.2]")
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    n = conn.rank
    eye = np.eye(n)

    def job(key):
        it, ix = key
        t, x = t_grid[it], x_grid[ix]
        rng = chunk_rng(seed, it * len(x_grid) + ix, stream=13)
        accs = {p: Welford() for p in powers}
        mean_acc = np.zeros((n, n), dtype=complex)
        sq_acc = np.zeros((n, n))
        done = 0
        while done < samples:
            k = min(chunk, samples - done)
            starts = np.repeat(x[None, :], k, axis=0)
            w = np.zeros((k, spec.dim)) if zero_winding else sample_windings(spec, np.full(k, t), np.zeros((k, spec.dim)), rng)
            steps = np.full(k, int(steps_for_duration(t, n_min, h0)))
            pts, offs = build_paths(starts, w, np.full(k, t), steps, rng)
            hol = holonomy_batch(conn, pts, offs, spec, w)
            dmat = eye - hol
            norms = np.sqrt((np.abs(dmat) ** 2).sum(axis=(1, 2)))
            for p in powers:
                accs[p].add(norms ** p)
            # the reversed bridge has the same law and holonomy Hol^*, so the
            # symmetrized defect has the same mean and O(t^2) spread
            sym = eye - 0.5 * (hol + np.conj(np.swapaxes(hol, 1, 2)))
            mean_acc += sym.sum(axis=0)
            sq_acc += (np.abs(sym) ** 2).sum(axis=0)
            done += k
        mean_mat = mean_acc / samples
        var = np.maximum(sq_acc / samples - np.abs(mean_mat) ** 2, 0.0)
        md = float(np.sqrt((np.abs(mean_mat) ** 2).sum()))
        # delta method for the Frobenius norm of the mean matrix
        if md > 0:
            md_se = float(np.sqrt((np.abs(mean_mat) ** 2 * var).sum() / samples) / md)
        else:
            md_se = float(np.sqrt(var.sum() / samples))
        return ({p: (a.mean.real, a.stderr) for p, a in accs.items()}, md, md_se)

    keys = [(it, ix) for it in range(len(t_grid)) for ix in range(len(x_grid))]
    res = dict(zip(keys, parallel_map(job, keys, workers)))
    moments, moment_se = {}, {}
    for p in powers:
        vals, ses = [], []
        for it in range(len(t_grid)):
            best = max((res[(it, ix)][0][p] for ix in range(len(x_grid))), key=lambda v: v[0])
            vals.append(best[0])
            ses.append(best[1])
        moments[p], moment_se[p] = np.array(vals), np.array(ses)
    md, md_se = [], []
    for it in range(len(t_grid)):
        best = max((res[(it, ix)][1:] for ix in range(len(x_grid))), key=lambda v: v[0])
        md.append(best[0])
        md_se.append(best[1])
    report = MomentReport(t_grid, moments, moment_se, np.array(md), np.array(md_se))
    for p in powers:
        if np.all(report.moments[p] > 0):
            report.slopes[f"moment_{p}"] = loglog_slope(t_grid, report.moments[p], report.moment_stderr[p])
    if np.all(report.mean_defect > 0):
        report.slopes["mean_defect"] = loglog_slope(t_grid, report.mean_defect, report.mean_defect_stderr)
    return report


@dataclass
class LadderReport:
    deltas: np.ndarray
    means: np.ndarray
    stderr: np.ndarray
    normalized_second_moment: np.ndarray
    nsm_stderr: np.ndarray
    increments: np.ndarray
    increment_stderr: np.ndarray


def delta_ladder_diagnostic(spec: TorusSpec, m: MassField, conn0, conn1, ladder,
                            replicas: int, config: Optional[SoupConfig] = None,
                            workers=None) -> LadderReport:
    """Coupled estimates of E[Q_delta^R] along a decreasing ladder of cutoffs.

    All rungs are computed from the same soups sampled at the smallest cutoff,
    so successive increments have small variance and expose the martingale.
    """
    ladder = np.asarray(ladder, dtype=float)
    if np.any(np.diff(ladder) >= 0):
        raise ValueError("ladder must be decreasing")
    base = config or SoupConfig()
    cfg = base.with_cutoffs(float(ladder[-1]), base.big_r)
    k = len(ladder)
    if conn0.same_as(conn1):
        one = np.ones(k)
        z = np.zeros(k)
        return LadderReport(ladder, one, z, one, z, np.zeros(k - 1), np.zeros(k - 1))
    paths = needs_paths(conn0, conn1, m)

    def fn(batch):
        return np.stack([replica_products(spec, batch, conn0, conn1, min_duration=d) for d in ladder])

    parts = map_replica_chunks(fn, spec, cfg, m, replicas, need_paths=paths, workers=workers,
                               chunk=PATH_CHUNK if paths else FLAT_CHUNK)
    q = np.concatenate(parts, axis=1)
    means = q.mean(axis=1)
    se = q.real.std(axis=1, ddof=1) / math.sqrt(replicas)
    ratio = np.abs(q / means[:, None]) ** 2
    nsm = ratio.mean(axis=1)
    nsm_se = ratio.std(axis=1, ddof=1) / math.sqrt(replicas)
    inc = q[1:] - q[:-1]
    return LadderReport(ladder, means, se, nsm, nsm_se, inc.mean(axis=1),
                        inc.real.std(axis=1, ddof=1) / math.sqrt(replicas))


@dataclass
class MatrixEstimate:
    mean: np.ndarray
    stderr: np.ndarray      # entrywise, real and imaginary parts combined
    n_samples: int


def _matrix_welford(chunks):
    total, s1, s2 = 0, None, None
    for x in chunks:
        if s1 is None:
            s1 = np.zeros(x.shape[1:], dtype=complex)
            s2 = np.zeros(x.shape[1:])
        total += x.shape[0]
        s1 += x.sum(axis=0)
        s2 += (np.abs(x) ** 2).sum(axis=0)
    mean = s1 / total
    var = np.maximum(s2 / total - np.abs(mean) ** 2, 0.0) * total / max(total - 1, 1)
    return MatrixEstimate(mean, np.sqrt(var / total), total)


def feynman_kac_estimate(spec: TorusSpec, conn: ConnectionSpec, m: MassField, t: float, x, y,
                         n_bridges: int, seed: int = 0, n_steps: Optional[int] = None,
                         chunk: int = 200_000) -> MatrixEstimate:
    """``p_t(x, y) E_{t,x,y}[e^{-int m} Hol_{t,0}]`` over torus bridges.

    ``Hol_{t,0}`` is the adjoint of the transport along the bridge. For a flat
    abelian connection two steps are exact.
    """
    from .geometry import heat_kernel, sample_windings
    x = spec.project(x)
    delta = spec.minimal_lift(np.asarray(y, dtype=float) - x)
    if n_steps is None:
        n_steps = 2 if conn.winding_determined else int(steps_for_duration(t))
    pt = float(heat_kernel(spec, t, x, y))
    rng = chunk_rng(seed, 0, stream=17)
    out = []
    done = 0
    while done < n_bridges:
        k = min(chunk, n_bridges - done)
        w = sample_windings(spec, np.full(k, t), np.repeat(delta[None, :], k, axis=0), rng)
        pts, offs = build_paths(np.repeat(x[None, :], k, axis=0), delta + w, np.full(k, t),
                                np.full(k, n_steps), rng)
        hol = holonomy_batch(conn, pts, offs, spec)
        back = np.conj(np.swapaxes(hol, 1, 2))
        weight = np.exp(-batch_mass_integrals(spec, pts, offs, np.full(k, t), m))
        out.append(pt * weight[:, None, None] * back)
        done += k
    return _matrix_welford(out)


def levy_area_oracle(curvature: float, t: float) -> float:
    """``E[exp(i F A)]`` for the Levy area A of a planar bridge of duration t."""
    z = 0.5 * curvature * t
    return 1.0 if z == 0 else z / math.sinh(z)


def levy_area_estimate(B: float, t: float, n_bridges: int, seed: int = 0, h0: float = 5e-5,
                       chunk: int = 500):
    """Mean normalized trace of the uniform-field holonomy on zero-winding bridges.

    Returns ``(mean, stderr, stderr_imag)``; the field has curvature 2 pi B.
    """
    from .connection import uniform_field
    from .geometry import TorusSpec as _T
    spec = _T.unit(2)
    conn = uniform_field(B)
    n = int(steps_for_duration(t, 64, h0))
    rng = chunk_rng(seed, 0, stream=19)
    acc = Welford()
    done = 0
    while done < n_bridges:
        k = min(chunk, n_bridges - done)
        zeros = np.zeros((k, 2))
        pts, offs = build_paths(zeros, zeros, np.full(k, t), np.full(k, n), rng)
        acc.add(trace_norm(holonomy_batch(conn, pts, offs, spec, zeros)))
        done += k
    return acc.mean, acc.stderr, acc.stderr_imag


def levy_area_shoelace(curvature: float, t: float, n_bridges: int, n_steps: int = 2000,
                       seed: int = 0, chunk: int = 1000):
    """Brute force ``E[cos(F A)]`` from the polygon area of planar bridges.

    Shares nothing with the holonomy code: bridges are pinned random walks and
    A is the shoelace area. Returns ``(mean, stderr)``.
    """
    rng = chunk_rng(seed, 0, stream=31)
    acc = Welford()
    done = 0
    s = np.linspace(0.0, 1.0, n_steps + 1)
    while done < n_bridges:
        k = min(chunk, n_bridges - done)
        inc = rng.standard_normal((k, 2, n_steps)) * math.sqrt(t / n_steps)
        walk = np.concatenate([np.zeros((k, 2, 1)), np.cumsum(inc, axis=2)], axis=2)
        br = walk - s * walk[:, :, -1:]
        x, y = br[:, 0], br[:, 1]
        area = 0.5 * (x[:, :-1] * y[:, 1:] - x[:, 1:] * y[:, :-1]).sum(axis=1)
        acc.add(np.cos(curvature * area))
        done += k
    return acc.mean.real, acc.stderr


@dataclass
class ConformalReport:
    mean_g: complex
    stderr_g: float
    mean_ghat: complex
    stderr_ghat: float
    paired_diff: complex
    paired_stderr: float
    n_replicas: int

    @property
    def z(self):
        s = math.hypot(self.stderr_g, self.stderr_ghat)
        return (self.mean_g.real - self.mean_ghat.real) / s if s > 0 else 0.0


def conformal_clocks(spec, batch, f):
    """New durations ``int e^{2 f}`` along every loop of a batch."""
    vals = np.exp(2.0 * np.asarray(f(spec.project(batch.points)), dtype=float))
    steps = batch.durations / (np.diff(batch.offsets) - 1)
    out = np.empty(len(batch))
    _kernels.segment_trapezoid(np.ascontiguousarray(vals), batch.offsets, steps, out)
    return out


def conformal_cutoff_products(spec: TorusSpec, config: SoupConfig, m: MassField, conn0, conn1,
                              f: Callable, f_sup: float, n_replicas: int,
                              workers=None) -> ConformalReport:
    """Products over one soup with the duration window read in two clocks.

    Loops are sampled for the metric g on a window widened by ``e^{2 f_sup}``
    so that every loop whose g-duration or e^{2f}g-duration lies in
    ``[delta, R]`` is present; the two products keep the loops whose
    respective duration is in the window.
    """
    if spec.dim != 2:
        raise ValueError("conformal invariance is two-dimensional")
    spread = math.exp(2 * f_sup)
    wide = config.with_cutoffs(config.delta / spread, config.big_r * spread)

    def fn(batch):
        chis = _batch_chi(spec, batch, conn0, conn1)
        clocks = conformal_clocks(spec, batch, f) if len(batch) else np.zeros(0)
        res = []
        for dur in (batch.durations, clocks):
            keep = (dur >= config.delta) & (dur <= config.big_r)
            out = np.empty(batch.n_replicas, dtype=complex)
            _kernels.group_products(np.ascontiguousarray(1.0 + chis[keep]),
                                    np.ascontiguousarray(batch.replica[keep]), batch.n_replicas, out)
            res.append(out)
        return np.stack(res)

    parts = map_replica_chunks(fn, spec, wide, m, n_replicas, need_paths=True, workers=workers,
                               chunk=PATH_CHUNK)
    q = np.concatenate(parts, axis=1)
    a, b = Welford().add(q[0]), Welford().add(q[1])
    d = Welford().add(q[0] - q[1])
    return ConformalReport(a.mean, a.stderr, b.mean, b.stderr, d.mean, d.stderr, n_replicas)


def reparam_trace_defect(spec: TorusSpec, conn: ConnectionSpec, f: Callable, durations,
                         seed: int = 0) -> float:
    """Largest change of the normalized holonomy trace under re-clocking."""
    from .geometry import conformal_reparam, sample_loop
    from .connection import holonomy
    rng = chunk_rng(seed, 0, stream=23)
    worst = 0.0
    for t in durations:
        loop = sample_loop(spec, float(t), spec.uniform_points(1, rng)[0], rng)
        new = conformal_reparam(loop, f, rng)
        a = trace_norm(holonomy(loop, conn))
        b = trace_norm(holonomy(new, conn))
        worst = max(worst, abs(a - b))
    return worst
