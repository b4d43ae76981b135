"""Twisted Gaussian free fields, annealed connection ensembles, Symanzik moments.

A field is represented by its Fourier coefficients on the modes that the
sections of interest touch; the pairing ``Phi(s) = sum_n conj(s_n) . Phi_n``
only ever needs those.
"""

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .connection import ConnectionSpec, holonomy_batch, trivial
from .estimator import estimate_partition_ratio
from .geometry import MassField, TorusSpec, build_paths
from .loopsoup import SoupConfig
from .spectral import Section, SpectralModel, zeta_prime_diff
from .stats import Welford

__all__ = ["Section", "TwistedGFFSample", "ConnectionEnsemble", "sample_gff", "annealed_weights",
           "symanzik_moment", "normalize_weights", "pairings", "path_integral_covariance"]


def model_hash(model: SpectralModel) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(model.torus.side_lengths).tobytes())
    h.update(np.ascontiguousarray(model.H).tobytes())
    h.update(np.float64(model.mass0).tobytes())
    return h.hexdigest()[:16]


@dataclass
class TwistedGFFSample:
    """Fourier coefficients of one or many field samples.

    ``coeffs`` has shape ``(n_samples, n_modes, rank)``.
    """
    modes: np.ndarray
    coeffs: np.ndarray
    real: bool
    model_hash: str
    seed: Optional[int] = None

    def pair(self, s: Section) -> np.ndarray:
        """``Phi(s)`` for every sample."""
        out = np.zeros(self.coeffs.shape[0], dtype=complex)
        for n, c in zip(s.modes, s.coeffs):
            hits = np.flatnonzero((self.modes == n).all(axis=1))
            if len(hits) == 0:
                raise ValueError(f"mode {tuple(n)} was not sampled")
            out += self.coeffs[:, hits[0], :] @ np.conj(c)
        return out


def _support(sections, real):
    modes = {tuple(int(v) for v in n) for s in sections for n in s.modes}
    if real:
        modes |= {tuple(-v for v in n) for n in modes}
    return np.array(sorted(modes), dtype=np.int64)


def sample_gff(model: SpectralModel, rng, n_samples: int = 1, modes=None, real: bool = False,
               seed=None) -> TwistedGFFSample:
    """Draw ``Phi_n = M_n^{-1/2} xi_n`` on the requested modes.

    Complex fields use independent complex normals with E|xi|^2 = 1. Real fields
    (real bundles) use one complex normal per pair {n, -n} with
    ``Phi_{-n} = conj(Phi_n)`` and a real normal on the zero mode.
    """
    if modes is None:
        modes = model.modes
    modes = np.atleast_2d(np.asarray(modes, dtype=np.int64))
    r = model.rank
    idx = np.array([model.index_of(n) for n in modes])
    S = model.inverse_sqrt(idx)
    if real:
        if not model.conn.is_real:
            raise ValueError("real fields need a real bundle")
        lookup = {tuple(n): i for i, n in enumerate(modes)}
        if any(tuple(-n) not in lookup for n in modes):
            raise ValueError("real fields need modes closed under negation")
        out = np.zeros((n_samples, len(modes), r), dtype=complex)
        for i, n in enumerate(modes):
            key = tuple(n)
            neg = tuple(-n)
            if key < neg:
                continue
            if key == neg:
                xi = rng.standard_normal((n_samples, r))
                out[:, i] = xi @ S[i].T
            else:
                xi = (rng.standard_normal((n_samples, r)) + 1j * rng.standard_normal((n_samples, r))) / math.sqrt(2)
                out[:, i] = xi @ S[i].T
                out[:, lookup[neg]] = np.conj(out[:, i])
    else:
        xi = (rng.standard_normal((n_samples, len(modes), r))
              + 1j * rng.standard_normal((n_samples, len(modes), r))) / math.sqrt(2)
        out = np.einsum("kab,skb->ska", S, xi)
    return TwistedGFFSample(modes, out, real, model_hash(model), seed)


@dataclass
class ConnectionEnsemble:
    models: List[SpectralModel]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.models) != len(self.probs):
            raise ValueError("one probability per connection")
        if np.any(self.probs < 0) or not math.isclose(self.probs.sum(), 1.0, rel_tol=1e-12):
            raise ValueError("probabilities must be nonnegative and sum to 1")
        ranks = {m.rank for m in self.models}
        if len(ranks) != 1:
            raise ValueError("all connections of an ensemble must have the same rank")
        tori = {m.torus for m in self.models}
        masses = {m.mass0 for m in self.models}
        if len(tori) != 1 or len(masses) != 1:
            raise ValueError("ensemble members must share torus and mass")

    @property
    def rank(self):
        return self.models[0].rank

    @property
    def real(self):
        return self.models[0].conn.is_real

    def __len__(self):
        return len(self.models)


@dataclass
class AnnealedWeights:
    weights: np.ndarray
    stderr: np.ndarray
    method: str
    log_factors: np.ndarray


def annealed_weights(ensemble: ConnectionEnsemble, alpha: Optional[float] = None,
                     method: str = "spectral", replicas: int = 20000,
                     soup_config: Optional[SoupConfig] = None, workers=None) -> AnnealedWeights:
    """Weights proportional to ``p_k exp(zeta_k'(0) / 2)``.

    Everything is measured relative to the trivial line bundle; the common
    factor cancels on normalization. The spectral method uses the mode oracle,
    the loop-soup method estimates ``E[prod (1 + chi)]`` at intensity
    ``alpha = rank / 2``.
    """
    n = ensemble.rank
    alpha = n / 2 if alpha is None else alpha
    torus = ensemble.models[0].torus
    m0 = ensemble.models[0].mass0
    ref = trivial(1, torus.dim)
    if len(ensemble) == 1:
        return AnnealedWeights(np.ones(1), np.zeros(1), method, np.zeros(1))
    if method == "spectral":
        ref_model = SpectralModel(torus, ref, m0)
        logs = np.array([alpha * zeta_prime_diff(ref_model, m).value for m in ensemble.models])
        logs_err = np.zeros(len(logs))
    elif method == "loop_soup":
        cfg = soup_config or SoupConfig()
        cfg = SoupConfig(alpha, cfg.delta, cfg.big_r, cfg.seed, cfg.n_min, cfg.h0)
        mass = MassField.constant(m0)
        logs, logs_err = [], []
        for i, m in enumerate(ensemble.models):
            c = SoupConfig(alpha, cfg.delta, cfg.big_r, cfg.seed + 1000 * i, cfg.n_min, cfg.h0)
            est = estimate_partition_ratio(torus, c, mass, ref, m.conn, replicas, workers=workers)
            logs.append(est.log_mean)
            logs_err.append(est.log_mean_err)
        logs, logs_err = np.array(logs), np.array(logs_err)
    else:
        raise ValueError(f"unknown method {method}")
    w, se = normalize_weights(ensemble.probs, logs, logs_err)
    return AnnealedWeights(w, se, method, logs)


def normalize_weights(probs, logs, logs_err=None):
    """``w_k = p_k e^{L_k} / sum_j p_j e^{L_j}`` with delta-method errors."""
    probs = np.asarray(probs, dtype=float)
    logs = np.asarray(logs, dtype=float)
    logs_err = np.zeros(len(logs)) if logs_err is None else np.asarray(logs_err, dtype=float)
    raw = probs * np.exp(logs - logs.max())
    w = raw / raw.sum()
    # d w_i / d L_j = w_i (1[i=j] - w_j)
    J = np.diag(w) - np.outer(w, w)
    se = np.sqrt((J ** 2) @ (logs_err ** 2))
    return w, se


def pairings(items):
    """All perfect matchings of a list, as lists of pairs."""
    items = list(items)
    if not items:
        yield []
        return
    a = items[0]
    for i in range(1, len(items)):
        rest = items[1:i] + items[i + 1:]
        for p in pairings(rest):
            yield [(a, items[i])] + p


def _two_point_sum(model, sections, k, real):
    if real:
        total = 0j
        for p in pairings(list(range(2 * k))):
            prod = 1.0 + 0j
            for a, b in p:
                prod *= model.green_pairing(sections[a], sections[b])
            total += prod
        return total
    left, right = sections[:k], sections[k:]
    G = np.array([[model.green_pairing(s, t) for t in right] for s in left])
    total = 0j
    for perm in itertools.permutations(range(k)):
        total += np.prod([G[i, perm[i]] for i in range(k)])
    return total


@dataclass
class SymanzikReport:
    formula: complex
    formula_err: float
    direct: complex
    direct_err: float
    direct_err_imag: float
    counts: np.ndarray
    weights: np.ndarray

    @property
    def z(self):
        s = math.hypot(self.formula_err, self.direct_err)
        return (self.direct.real - self.formula.real) / s if s > 0 else 0.0

    @property
    def z_imag(self):
        s = math.hypot(self.formula_err, self.direct_err_imag)
        return (self.direct.imag - self.formula.imag) / s if s > 0 else 0.0


def symanzik_moment(ensemble: ConnectionEnsemble, sections: Sequence[Section], f: Callable,
                    k: int, rng, n_samples: int = 100_000, weights: Optional[AnnealedWeights] = None,
                    chunk: int = 50_000) -> SymanzikReport:
    """Both sides of the Symanzik identity for a 2k-point moment.

    Real bundles pair all 2k sections (Isserlis). Complex bundles take the
    first k sections as linear slots and the last k as conjugate slots and sum
    over permutations. ``f`` maps the ensemble index to a bounded number.
    """
    if k < 1 or k > 3:
        raise ValueError("order k must be 1, 2 or 3")
    if len(sections) != 2 * k:
        raise ValueError("need 2k sections")
    real = ensemble.real
    for s in sections:
        if s.rank != ensemble.rank:
            raise ValueError("section rank does not match the ensemble")
    if weights is None:
        weights = annealed_weights(ensemble, method="spectral")
    w = weights.weights
    fv = np.array([f(i) for i in range(len(ensemble))], dtype=float)
    terms = np.array([_two_point_sum(m, sections, k, real) for m in ensemble.models])
    formula = complex(np.sum(w * fv * terms))
    formula_err = float(np.sqrt(np.sum((weights.stderr * fv * np.abs(terms)) ** 2)))
    modes = _support(sections, real)
    acc = Welford()
    counts = np.zeros(len(ensemble), dtype=int)
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        idx = rng.choice(len(ensemble), size=b, p=w)
        vals = np.zeros(b, dtype=complex)
        for j, model in enumerate(ensemble.models):
            sel = np.flatnonzero(idx == j)
            counts[j] += len(sel)
            if len(sel) == 0:
                continue
            field_ = sample_gff(model, rng, len(sel), modes, real)
            phis = [field_.pair(s) for s in sections]
            if real:
                prod = np.prod(np.real(phis), axis=0).astype(complex)
            else:
                prod = np.prod(phis[:k], axis=0) * np.prod(np.conj(phis[k:]), axis=0)
            vals[sel] = fv[j] * prod
        acc.add(vals)
        done += b
    return SymanzikReport(formula, formula_err, acc.mean, acc.stderr, acc.stderr_imag, counts, w)


def path_integral_covariance(model: SpectralModel, s1: Section, s2: Section, n_samples: int,
                             rng, h0: float = 1e-3, n_min: int = 16, chunk: int = 2000):
    """``green_pairing(s1, s2)`` through Brownian paths.

    ``G = (vol / m0) E[ s1(X)^* Hol_{T,0} s2(W_T) ]`` with X uniform, T ~ Exp(m0)
    and W a free Brownian motion started at X.
    """
    torus = model.torus
    acc = Welford()
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        x = torus.uniform_points(b, rng)
        T = rng.exponential(1.0 / model.mass0, size=b)
        disp = rng.standard_normal((b, torus.dim)) * np.sqrt(T)[:, None]
        steps = np.maximum(n_min, np.ceil(T / h0)).astype(np.int64)
        pts, offs = build_paths(x, disp, T, steps, rng)
        hol = holonomy_batch(model.conn, pts, offs, torus)
        back = np.conj(np.swapaxes(hol, 1, 2))
        v1 = s1.evaluate(torus, x)
        v2 = s2.evaluate(torus, torus.project(x + disp))
        vals = np.einsum("sa,sab,sb->s", np.conj(v1), back, v2)
        acc.add(vals * torus.volume / model.mass0)
        done += b
    return acc.mean, acc.stderr, acc.stderr_imag
