"""Flat tori: heat kernels, bridge and loop sampling, mass functionals.

Points on the torus are stored as reals in ``[0, L_j)``; sampled paths keep
their lift to ``R^d`` so the winding is never lost.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

N_MIN = 64
H0 = 1e-4


@dataclass(frozen=True)
class TorusSpec:
    dim: int
    side_lengths: tuple

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.side_lengths)
        object.__setattr__(self, "side_lengths", lengths)
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        if len(lengths) != self.dim:
            raise ValueError("need one side length per dimension")
        if not all(np.isfinite(v) and v > 0 for v in lengths):
            raise ValueError("side lengths must be positive and finite")

    @classmethod
    def unit(cls, dim=2):
        return cls(dim, (1.0,) * dim)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.side_lengths)

    @property
    def volume(self) -> float:
        return float(np.prod(self.side_lengths))

    def project(self, y):
        """Reduce lifted coordinates to the fundamental domain."""
        y = np.asarray(y, dtype=float)
        return np.mod(y, self.lengths)

    def minimal_lift(self, delta):
        """Representative of a displacement in ``[-L/2, L/2)`` per axis."""
        L = self.lengths
        return np.mod(np.asarray(delta, dtype=float) + L / 2, L) - L / 2

    def uniform_points(self, n, rng):
        return rng.random((n, self.dim)) * self.lengths


@dataclass
class LoopPath:
    """Discretized Brownian path with its lift.

    ``lifted_points`` has shape ``(n_steps + 1, d)`` on a uniform time grid.
    For a closed loop ``y_N - y_0`` equals ``winding`` exactly; for an open
    bridge the endpoint displacement is the minimal lift plus ``winding``.
    """
    torus: TorusSpec
    duration: float
    lifted_points: np.ndarray
    winding: np.ndarray
    closed: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        self.lifted_points = np.asarray(self.lifted_points, dtype=float)
        self.winding = np.asarray(self.winding, dtype=float)
        if self.lifted_points.ndim != 2 or self.lifted_points.shape[0] < 3:
            raise ValueError("need at least two steps")

    @property
    def n_steps(self) -> int:
        return self.lifted_points.shape[0] - 1

    @property
    def base_point(self) -> np.ndarray:
        return self.torus.project(self.lifted_points[0])

    @property
    def displacement(self) -> np.ndarray:
        return self.lifted_points[-1] - self.lifted_points[0]

    @property
    def step(self) -> float:
        return self.duration / self.n_steps

    def projected(self) -> np.ndarray:
        return self.torus.project(self.lifted_points)

    def reversed(self) -> "LoopPath":
        return LoopPath(self.torus, self.duration, self.lifted_points[::-1].copy(),
                        -self.winding, self.closed)


@dataclass
class MassField:
    """Nonnegative killing rate on the torus.

    ``evaluator`` maps an ``(k, d)`` array of points to ``k`` rates.
    """
    evaluator: Callable
    is_identically_zero: bool = False
    constant_value: Optional[float] = None
    lower_bound: Optional[float] = None

    def __post_init__(self):
        if self.constant_value is not None:
            if self.constant_value < 0:
                raise ValueError("mass must be nonnegative")
            self.is_identically_zero = self.constant_value == 0
            if self.lower_bound is None:
                self.lower_bound = float(self.constant_value)

    @classmethod
    def constant(cls, c: float) -> "MassField":
        c = float(c)
        return cls(lambda pts: np.full(np.shape(pts)[0], c), constant_value=c)

    @classmethod
    def from_function(cls, fn, lower_bound=None) -> "MassField":
        return cls(fn, lower_bound=lower_bound)

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self.evaluator(pts), dtype=float)

    def require_massive(self):
        if self.is_identically_zero:
            raise ValueError("a closed torus needs a nonzero mass for a spectral gap")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise ValueError("non-finite input")


def heat_kernel_1d(L, t, delta):
    """Periodic heat kernel of the half Laplacian on a circle of length ``L``.

    Uses the image sum for small ``t`` and its Poisson dual for ``2 pi t > L^2``;
    both are truncated well below 1e-16 relative.
    """
    delta = np.asarray(delta, dtype=float)
    # fold |delta| into [0, L/2]; the kernel is even, and folding the absolute
    # value makes it exactly symmetric in (x, y)
    delta = np.mod(np.abs(delta), L)
    delta = np.minimum(delta, L - delta)
    if 2 * np.pi * t <= L * L:
        K = int(np.ceil(np.sqrt(2 * t * 40.0) / L)) + 1
        k = np.arange(-K, K + 1) * L
        z = delta[..., None] + k
        return np.exp(-z * z / (2 * t)).sum(axis=-1) / np.sqrt(2 * np.pi * t)
    n_max = int(np.ceil(np.sqrt(40.0 * L * L / (2 * np.pi ** 2 * t)))) + 1
    n = np.arange(1, n_max + 1)
    terms = np.exp(-2 * np.pi ** 2 * n * n * t / (L * L)) * np.cos(2 * np.pi * n * delta[..., None] / L)
    return (1.0 + 2.0 * terms.sum(axis=-1)) / L


def heat_kernel(spec: TorusSpec, t: float, x, y):
    """``p_t(x, y)`` on the flat torus; broadcasts over leading axes of x, y."""
    _check_finite(t, x, y)
    if t <= 0:
        raise ValueError("t must be positive")
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    out = 1.0
    for j, L in enumerate(spec.side_lengths):
        out = out * heat_kernel_1d(L, t, diff[..., j])
    return out


def diagonal_heat_kernel(spec: TorusSpec, t):
    """``p_t(x, x)`` which does not depend on x; vectorized over t."""
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    for L in spec.side_lengths:
        out = out * np.vectorize(lambda s: float(heat_kernel_1d(L, s, 0.0)))(t)
    return out


def _winding_radius(L, t):
    # every point carries weight >= exp(-L^2/8t) at its minimal lift
    spread = 1.0 + np.sqrt(2 * np.pi * t) / L
    r2 = L * L / 4 + 2 * t * np.log(2e12 * spread)
    return int(np.ceil(np.sqrt(r2) / L)) + 1


def sample_windings(spec: TorusSpec, t, displacement, rng):
    """Vectorized lattice parts of torus bridges.

    ``t`` has shape ``(k,)`` and ``displacement`` shape ``(k, d)``; returns
    ``(k, d)`` lattice vectors with P(w) proportional to exp(-|D + w|^2 / 2t),
    D the minimal lift.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    delta = spec.minimal_lift(np.atleast_2d(displacement))
    _check_finite(t, delta)
    if np.any(t <= 0):
        raise ValueError("t must be positive")
    k = t.shape[0]
    out = np.zeros((k, spec.dim))
    if k == 0:
        return out
    for j, L in enumerate(spec.side_lengths):
        K = _winding_radius(L, t.max())
        cand = np.arange(-K, K + 1) * L
        z = delta[:, j, None] + cand[None, :]
        logw = -z * z / (2 * t[:, None])
        logw -= logw.max(axis=1, keepdims=True)
        cdf = np.cumsum(np.exp(logw), axis=1)
        u = rng.random(k) * cdf[:, -1]
        idx = (cdf < u[:, None]).sum(axis=1)
        out[:, j] = cand[np.minimum(idx, 2 * K)]
    return out


def sample_winding(spec: TorusSpec, t: float, displacement, rng):
    return sample_windings(spec, [t], np.asarray(displacement, dtype=float)[None, :], rng)[0]


def winding_probabilities(spec: TorusSpec, t: float, displacement, axis: int, K: int):
    """Exact per-axis probabilities of ``w_axis = k L`` for ``|k| <= K``."""
    L = spec.side_lengths[axis]
    delta = spec.minimal_lift(displacement)[axis]
    big = _winding_radius(L, t) + K
    cand = np.arange(-big, big + 1) * L
    w = np.exp(-(delta + cand) ** 2 / (2 * t))
    w /= w.sum()
    return w[big - K: big + K + 1]


def steps_for_duration(t, n_min=N_MIN, h0=H0):
    t = np.asarray(t, dtype=float)
    return np.maximum(n_min, np.ceil(t / h0 - 1e-9)).astype(np.int64)


def build_paths(starts, displacements, durations, n_steps, rng):
    """Concatenated exact Brownian bridges.

    Returns ``(points, offsets)`` where path ``i`` is the lifted bridge from
    ``starts[i]`` to ``starts[i] + displacements[i]`` in ``n_steps[i]`` steps.
    """
    starts = np.ascontiguousarray(starts, dtype=float)
    displacements = np.ascontiguousarray(displacements, dtype=float)
    durations = np.asarray(durations, dtype=float)
    n_steps = np.asarray(n_steps, dtype=np.int64)
    if np.any(n_steps < 2):
        raise ValueError("n_steps must be at least 2")
    k, d = starts.shape
    offsets = np.zeros(k + 1, dtype=np.int64)
    np.cumsum(n_steps + 1, out=offsets[1:])
    normals = rng.standard_normal((int(n_steps.sum()), d))
    scales = np.sqrt(durations / n_steps)
    points = np.empty((int(offsets[-1]), d))
    _kernels.build_bridges(starts, displacements, scales, normals, offsets, points)
    return points, offsets


def sample_bridge(spec: TorusSpec, t: float, x, y, n_steps: int, rng) -> LoopPath:
    """Torus Brownian bridge from x to y in time t, sampled through its lift."""
    _check_finite(t, x, y)
    if t <= 0:
        raise ValueError("t must be positive")
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    x = spec.project(x)
    delta = spec.minimal_lift(np.asarray(y, dtype=float) - x)
    w = sample_winding(spec, t, delta, rng)
    pts, _ = build_paths(x[None, :], (delta + w)[None, :], [t], [n_steps], rng)
    closed = bool(np.allclose(delta, 0.0))
    return LoopPath(spec, float(t), pts, w, closed=closed)


def sample_loop(spec: TorusSpec, t: float, x, rng, n_steps: Optional[int] = None) -> LoopPath:
    n = int(steps_for_duration(t)) if n_steps is None else n_steps
    return sample_bridge(spec, t, x, x, n, rng)


def mass_integral(path: LoopPath, m: MassField) -> float:
    """Trapezoid rule for the integral of m along the path."""
    if m.is_identically_zero:
        return 0.0
    if m.is_constant:
        return m.constant_value * path.duration
    vals = m(path.projected())
    h = path.step
    return float(h * (vals.sum() - 0.5 * (vals[0] + vals[-1])))


def batch_mass_integrals(spec: TorusSpec, points, offsets, durations, m: MassField):
    durations = np.asarray(durations, dtype=float)
    if m.is_identically_zero:
        return np.zeros_like(durations)
    if m.is_constant:
        return m.constant_value * durations
    vals = np.ascontiguousarray(m(spec.project(points)))
    steps = durations / (np.diff(offsets) - 1)
    out = np.empty(len(durations))
    _kernels.segment_trapezoid(vals, offsets, steps, out)
    return out


def conformal_reparam(path: LoopPath, f, rng) -> LoopPath:
    """Re-clock a loop by the quadratic variation of the metric e^{2f} g.

    The new clock is the trapezoid integral of exp(2 f) along the path. The
    loop is rerooted at a uniform time of the new clock and regridded with the
    same number of uniform steps.
    """
    if path.torus.dim != 2:
        raise ValueError("conformal reparametrization is two-dimensional")
    y = path.lifted_points
    n = path.n_steps
    h = path.step
    weight = np.exp(2.0 * np.asarray(f(path.projected()), dtype=float))
    clock = np.concatenate([[0.0], np.cumsum(0.5 * h * (weight[1:] + weight[:-1]))])
    total = float(clock[-1])
    shift = y[-1] - y[0]
    # periodic extension of the lifted loop over two turns of the clock
    clock2 = np.concatenate([clock, total + clock[1:]])
    y2 = np.concatenate([y, y[1:] + shift], axis=0)
    u = rng.random() * total
    targets = u + total * np.arange(n + 1) / n
    new = np.empty((n + 1, y.shape[1]))
    for j in range(y.shape[1]):
        new[:, j] = np.interp(targets, clock2, y2[:, j])
    new[-1] = new[0] + shift
    return LoopPath(path.torus, total, new, path.winding.copy(), closed=path.closed)
