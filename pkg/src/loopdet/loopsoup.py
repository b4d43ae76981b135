"""Poisson sampling of massive Brownian loop soups on flat tori.

Loops are drawn with durations in ``[delta, R]`` from the intensity
``alpha * vol * p_t(0,0) / t dt``, uniform base points, winding from the
lattice decomposition of the torus bridge and, when needed, an exact lifted
bridge. The mass kills each loop independently with probability
``1 - exp(-int m)``.
"""

import functools
import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np
from scipy import integrate, interpolate

from . import _kernels
from ._parallel import chunk_rng, chunk_sizes, parallel_map
from .geometry import (H0, N_MIN, LoopPath, MassField, TorusSpec, batch_mass_integrals,
                       build_paths, diagonal_heat_kernel, sample_windings, steps_for_duration)
from .stats import Welford

SNAPSHOT_MAGIC = b"LOOPSOUP"
SNAPSHOT_VERSION = 1
N_KNOTS = 4096
REPLICA_CHUNK = 256
MAX_POINTS_PER_BUILD = 2_000_000


@dataclass(frozen=True)
class SoupConfig:
    intensity_alpha: float = 1.0
    delta: float = 1e-3
    big_r: float = 20.0
    seed: int = 0
    n_min: int = N_MIN
    h0: float = H0

    def __post_init__(self):
        if not (0 < self.delta < self.big_r < np.inf):
            raise ValueError("cutoffs must satisfy 0 < delta < R < inf")
        if self.intensity_alpha < 0:
            raise ValueError("intensity must be nonnegative")
        if self.n_min < 2 or self.h0 <= 0:
            raise ValueError("invalid steps policy")

    def with_cutoffs(self, delta, big_r):
        d = asdict(self)
        d.update(delta=delta, big_r=big_r)
        return SoupConfig(**d)


@dataclass
class LoopSoup:
    loops: List[LoopPath]
    raw_count: int
    config: SoupConfig
    mass_spec: MassField
    torus: TorusSpec

    def __len__(self):
        return len(self.loops)

    @property
    def durations(self):
        return np.array([l.duration for l in self.loops])


def intensity_mass(spec: TorusSpec, delta: float, big_r: float) -> float:
    """``vol * int_delta^R p_t(0,0) / t dt`` by adaptive quadrature in log t."""
    if not (0 < delta and delta <= big_r):
        raise ValueError("cutoffs must satisfy 0 < delta <= R")
    if delta == big_r:
        return 0.0
    return _intensity_mass(spec, float(delta), float(big_r))


@functools.lru_cache(maxsize=64)
def _intensity_mass(spec, delta, big_r):
    g = lambda u: float(diagonal_heat_kernel(spec, np.exp(u)))
    val, _ = integrate.quad(g, np.log(delta), np.log(big_r), epsabs=0.0, epsrel=1e-13, limit=500)
    return spec.volume * val


def intensity_mass_images(spec: TorusSpec, delta: float, big_r: float) -> float:
    """Same quantity from the image expansion integrated term by term.

    Each image contributes an incomplete gamma function in closed form.
    """
    from scipy.special import gamma, gammainc
    d = spec.dim
    h = d / 2
    reach = np.sqrt(2 * big_r * 40.0)
    axes = [np.arange(-int(np.ceil(reach / L)) - 1, int(np.ceil(reach / L)) + 2) * L for L in spec.side_lengths]
    grid = np.meshgrid(*axes, indexing="ij")
    a = sum(g ** 2 for g in grid).ravel() / 2
    zero = a == 0
    a = a[~zero]
    terms = a ** (-h) * gamma(h) * (gammainc(h, a / delta) - gammainc(h, a / big_r))
    total = np.sort(terms).sum() + (delta ** -h - big_r ** -h) / h
    return spec.volume * (2 * np.pi) ** (-h) * total


class DurationSampler:
    """Inverse CDF of the density proportional to ``p_t(0,0)/t`` on [delta, R].

    Built on ``N_KNOTS`` knots in log t with Gauss-Legendre panels and a
    monotone PCHIP interpolant of log t against the CDF.
    """

    def __init__(self, spec: TorusSpec, delta: float, big_r: float, n_knots: int = N_KNOTS):
        self.delta, self.big_r = float(delta), float(big_r)
        u = np.linspace(np.log(delta), np.log(big_r), n_knots)
        x, w = np.polynomial.legendre.leggauss(8)
        a, b = u[:-1], u[1:]
        nodes = 0.5 * (b - a)[:, None] * x[None, :] + 0.5 * (a + b)[:, None]
        vals = diagonal_heat_kernel(spec, np.exp(nodes).ravel()).reshape(nodes.shape)
        panel = 0.5 * (b - a) * (vals * w).sum(axis=1)
        cdf = np.concatenate([[0.0], np.cumsum(panel)])
        self.total = float(cdf[-1])
        self.cdf = cdf / cdf[-1]
        self.log_knots = u
        self._inv = interpolate.PchipInterpolator(self.cdf, u)

    def __call__(self, uniforms):
        return np.clip(np.exp(self._inv(np.asarray(uniforms))), self.delta, self.big_r)

    def cdf_at(self, t):
        fwd = interpolate.PchipInterpolator(self.log_knots, self.cdf)
        return fwd(np.log(np.asarray(t, dtype=float)))


@functools.lru_cache(maxsize=32)
def _sampler(lengths, dim, delta, big_r):
    return DurationSampler(TorusSpec(dim, lengths), delta, big_r)


def duration_sampler(spec: TorusSpec, delta, big_r) -> DurationSampler:
    return _sampler(spec.side_lengths, spec.dim, float(delta), float(big_r))


@dataclass
class LoopBatch:
    """Kept loops of several soup replicas stored as flat arrays."""
    durations: np.ndarray
    base_points: np.ndarray
    windings: np.ndarray
    replica: np.ndarray
    n_replicas: int
    raw_counts: np.ndarray
    points: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.durations)

    @property
    def has_paths(self):
        return self.points is not None


def _build_in_pieces(starts, windings, durations, n_steps, rng):
    """Build paths in slices so the point buffer stays bounded."""
    k = len(durations)
    if k == 0:
        return np.zeros((0, starts.shape[1])), np.zeros(1, dtype=np.int64)
    sizes = n_steps + 1
    bounds = [0]
    acc = 0
    for i, s in enumerate(sizes):
        if acc and acc + s > MAX_POINTS_PER_BUILD:
            bounds.append(i)
            acc = 0
        acc += s
    bounds.append(k)
    pts, offs = [], [np.zeros(1, dtype=np.int64)]
    base = 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        p, o = build_paths(starts[a:b], windings[a:b], durations[a:b], n_steps[a:b], rng)
        pts.append(p)
        offs.append(o[1:] + base)
        base += p.shape[0]
    return np.concatenate(pts), np.concatenate(offs)


def sample_batch(spec: TorusSpec, config: SoupConfig, m: MassField, n_replicas: int, rng,
                 need_paths: bool = True) -> LoopBatch:
    """Draw ``n_replicas`` independent soups with one random stream.

    For a constant mass the killing coin is tossed before any path is built;
    otherwise paths are always built and the mass integral decides.
    """
    m.require_massive()
    lam = config.intensity_alpha * intensity_mass(spec, config.delta, config.big_r)
    raw = rng.poisson(lam, size=n_replicas)
    total = int(raw.sum())
    replica = np.repeat(np.arange(n_replicas), raw)
    durations = duration_sampler(spec, config.delta, config.big_r)(rng.random(total))
    base = spec.uniform_points(total, rng)
    windings = sample_windings(spec, durations, np.zeros((total, spec.dim)), rng)
    if m.is_constant:
        keep = rng.random(total) < np.exp(-m.constant_value * durations)
        durations, base, windings, replica = durations[keep], base[keep], windings[keep], replica[keep]
        if not need_paths:
            return LoopBatch(durations, base, windings, replica, n_replicas, raw)
    n_steps = steps_for_duration(durations, config.n_min, config.h0)
    points, offsets = _build_in_pieces(base, windings, durations, n_steps, rng)
    if not m.is_constant:
        masses = batch_mass_integrals(spec, points, offsets, durations, m)
        keep = rng.random(len(durations)) < np.exp(-masses)
        idx = np.flatnonzero(keep)
        lengths = np.diff(offsets)[idx]
        sel = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in idx]) if len(idx) else np.zeros(0, dtype=np.int64)
        points = points[sel]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        durations, base, windings, replica = durations[idx], base[idx], windings[idx], replica[idx]
    return LoopBatch(durations, base, windings, replica, n_replicas, raw, points, offsets)


def map_replica_chunks(fn: Callable, spec, config: SoupConfig, m: MassField, n_replicas: int,
                       need_paths=True, workers=None, chunk=REPLICA_CHUNK, stream=0):
    """Apply ``fn(batch)`` to every chunk of replicas and return results in order."""
    sizes = chunk_sizes(n_replicas, chunk)

    def job(i):
        rng = chunk_rng(config.seed, i, stream)
        return fn(sample_batch(spec, config, m, sizes[i], rng, need_paths))

    return parallel_map(job, range(len(sizes)), workers)


def batch_to_loops(spec: TorusSpec, batch: LoopBatch) -> List[LoopPath]:
    if not batch.has_paths:
        raise ValueError("batch was sampled without paths")
    return [LoopPath(spec, float(batch.durations[i]),
                     batch.points[batch.offsets[i]:batch.offsets[i + 1]].copy(),
                     batch.windings[i].copy())
            for i in range(len(batch))]


def sample_soup(spec: TorusSpec, config: SoupConfig, m: MassField, rng) -> LoopSoup:
    """One soup with its loops materialized as LoopPath objects."""
    if config.intensity_alpha == 0:
        return LoopSoup([], 0, config, m, spec)
    batch = sample_batch(spec, config, m, 1, rng, need_paths=True)
    return LoopSoup(batch_to_loops(spec, batch), int(batch.raw_counts[0]), config, m, spec)


def expected_kept_count(spec: TorusSpec, config: SoupConfig, c: float) -> float:
    """Mean number of surviving loops for a constant mass c."""
    g = lambda u: float(np.exp(-c * np.exp(u)) * diagonal_heat_kernel(spec, np.exp(u)))
    val, _ = integrate.quad(g, np.log(config.delta), np.log(config.big_r), epsrel=1e-12, limit=500)
    return config.intensity_alpha * spec.volume * val


# snapshots

def _mass_header(m: MassField):
    if m.is_constant:
        return {"kind": "constant", "value": m.constant_value}
    return {"kind": "function", "lower_bound": m.lower_bound}


def save_soup(soup: LoopSoup, path) -> None:
    """Write a soup as magic, header length, JSON header, packed arrays."""
    loops = soup.loops
    d = soup.torus.dim
    arrays = {
        "durations": np.array([l.duration for l in loops], dtype="<f8"),
        "windings": np.array([l.winding for l in loops], dtype="<f8").reshape(-1, d),
        "offsets": np.concatenate([[0], np.cumsum([l.n_steps + 1 for l in loops])]).astype("<i8"),
        "points": (np.concatenate([l.lifted_points for l in loops]) if loops
                   else np.zeros((0, d))).astype("<f8"),
    }
    descr, pos = [], 0
    for name, arr in arrays.items():
        descr.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": pos, "nbytes": arr.nbytes})
        pos += arr.nbytes
    header = {
        "schema_version": SNAPSHOT_VERSION,
        "torus": {"dim": d, "side_lengths": list(soup.torus.side_lengths)},
        "config": asdict(soup.config),
        "raw_count": soup.raw_count,
        "mass": _mass_header(soup.mass_spec),
        "arrays": descr,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_soup(path, mass: Optional[MassField] = None) -> LoopSoup:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a loop soup snapshot")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    if header["schema_version"] != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['schema_version']}")
    body = data[12 + n:]
    arrays = {}
    for a in header["arrays"]:
        raw = body[a["offset"]:a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(raw, dtype=a["dtype"]).reshape(a["shape"]).copy()
    torus = TorusSpec(header["torus"]["dim"], tuple(header["torus"]["side_lengths"]))
    if mass is None:
        if header["mass"]["kind"] != "constant":
            raise ValueError("a non-constant mass must be supplied when loading")
        mass = MassField.constant(header["mass"]["value"])
    off = arrays["offsets"]
    loops = [LoopPath(torus, float(arrays["durations"][i]), arrays["points"][off[i]:off[i + 1]],
                      arrays["windings"][i]) for i in range(len(arrays["durations"]))]
    return LoopSoup(loops, header["raw_count"], SoupConfig(**header["config"]), mass, torus)


# Campbell formula

@dataclass
class CampbellReport:
    mc_mean: complex
    stderr: float
    stderr_imag: float
    closed_form: complex
    n_samples: int

    @property
    def z_real(self):
        return (self.mc_mean.real - self.closed_form.real) / self.stderr if self.stderr > 0 else 0.0

    @property
    def z_imag(self):
        return (self.mc_mean.imag - self.closed_form.imag) / self.stderr_imag if self.stderr_imag > 0 else 0.0

    @property
    def passed(self):
        return abs(self.z_real) <= 3 and abs(self.z_imag) <= 3


def campbell_expectation_check(intensity: float, g: Callable, n_samples: int, rng,
                               chunk: int = 100_000) -> CampbellReport:
    """Monte Carlo of ``E[prod (1 + g(x))]`` over a Poisson process on [0, 1].

    The process has intensity ``intensity`` times Lebesgue measure; the
    comparison value is ``exp(int g dmu)`` by adaptive quadrature.
    """
    acc = Welford()
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        counts = rng.poisson(intensity, size=k)
        xs = rng.random(int(counts.sum()))
        factors = 1.0 + np.asarray(g(xs), dtype=complex) * np.ones(len(xs))
        groups = np.repeat(np.arange(k), counts)
        prods = np.empty(k, dtype=complex)
        _kernels.group_products(factors, groups, k, prods)
        acc.add(prods)
        done += k
    gx = lambda x: complex(np.asarray(g(np.array([x])), dtype=complex).ravel()[0])
    re, _ = integrate.quad(lambda x: gx(x).real, 0, 1, epsabs=1e-13, epsrel=1e-13)
    im, _ = integrate.quad(lambda x: gx(x).imag, 0, 1, epsabs=1e-13, epsrel=1e-13)
    closed = complex(np.exp(intensity * complex(re, im)))
    return CampbellReport(acc.mean, acc.stderr, acc.stderr_imag, closed, n_samples)
