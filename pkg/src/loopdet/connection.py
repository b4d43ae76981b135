"""Metric connections on trivial bundles over flat tori and their holonomies.

Convention: a connection is ``d + sum_j A_j dx_j`` with skew-Hermitian (or
real skew-symmetric) coefficients. Parallel transport solves
``dU = -A(W) o dW U``, so a polygonal path gets the right-to-left product of
``exp(-sum_j A_j(mid_i) dy_i^j)``. ``FlatAbelian(theta)`` means
``A_j = 2 pi i theta_j`` and a loop of winding w has holonomy
``exp(-2 pi i theta . w)``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .geometry import LoopPath, TorusSpec

SKEW_TOL = 1e-12


class WindingError(ValueError):
    """A lift-defined field was used on a loop that winds around the torus."""


@dataclass(frozen=True)
class FlatAbelian:
    theta: tuple

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))


@dataclass(frozen=True, eq=False)
class ConstantMatrix:
    coeffs: np.ndarray  # (d, n, n)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise ValueError("coefficients must have shape (d, n, n)")
        _check_skew(c)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True, eq=False)
class FieldOneForm:
    """Position-dependent coefficients.

    ``evaluator`` maps ``(k, d)`` points to ``(k, d, n, n)`` coefficients. With
    ``restrict_to_contractible`` the field is defined on the plane lift and is
    only evaluated on loops with zero winding.
    """
    evaluator: Callable
    restrict_to_contractible: bool = False
    smoothness: str = "smooth"


def _check_skew(c):
    herm = c + np.conj(np.swapaxes(c, -1, -2))
    if np.max(np.abs(herm), initial=0.0) > SKEW_TOL:
        raise ValueError("connection coefficients must be skew-Hermitian")


@dataclass(frozen=True, eq=False)
class ConnectionSpec:
    rank: int
    form: object
    field_type: str = "complex-unitary"
    name: str = ""

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if self.field_type not in ("complex-unitary", "real-orthogonal"):
            raise ValueError(f"unknown field type {self.field_type}")
        if isinstance(self.form, FlatAbelian):
            if self.rank != 1:
                raise ValueError("a flat abelian connection has rank 1")
            if self.field_type != "complex-unitary":
                raise ValueError("a flat abelian twist needs a complex line bundle")
        elif isinstance(self.form, ConstantMatrix):
            if self.form.coeffs.shape[1] != self.rank:
                raise ValueError("coefficient size does not match the rank")
            if self.field_type == "real-orthogonal" and np.any(np.abs(self.form.coeffs.imag) > SKEW_TOL):
                raise ValueError("real bundles need real skew-symmetric coefficients")
        elif not isinstance(self.form, FieldOneForm):
            raise TypeError("unsupported connection form")

    @property
    def is_real(self) -> bool:
        return self.field_type == "real-orthogonal"

    @property
    def winding_determined(self) -> bool:
        """True when the loop holonomy only depends on the winding."""
        if isinstance(self.form, FlatAbelian):
            return True
        if isinstance(self.form, ConstantMatrix):
            return not np.any(self.form.coeffs)
        return False

    @property
    def is_trivial(self) -> bool:
        if isinstance(self.form, FlatAbelian):
            return not any(self.form.theta)
        if isinstance(self.form, ConstantMatrix):
            return not np.any(self.form.coeffs)
        return False

    def key(self):
        """Hashable identity used to detect equal connections."""
        f = self.form
        if isinstance(f, FlatAbelian):
            body = ("flat", f.theta)
        elif isinstance(f, ConstantMatrix):
            body = ("const", f.coeffs.shape, f.coeffs.tobytes())
        else:
            body = ("field", id(f))
        return (self.rank, self.field_type, body)

    def same_as(self, other: "ConnectionSpec") -> bool:
        return self.key() == other.key()

    def constant_coeffs(self, dim: int) -> np.ndarray:
        """``(d, n, n)`` coefficients of a constant connection."""
        f = self.form
        if isinstance(f, FlatAbelian):
            if len(f.theta) != dim:
                raise ValueError("theta has the wrong dimension")
            return (2j * np.pi * np.asarray(f.theta)).reshape(dim, 1, 1)
        if isinstance(f, ConstantMatrix):
            if f.coeffs.shape[0] != dim:
                raise ValueError("coefficients have the wrong dimension")
            return f.coeffs
        raise TypeError("not a constant connection")


def trivial(rank=1, dim=2, real=False) -> ConnectionSpec:
    if rank == 1 and not real:
        return ConnectionSpec(1, FlatAbelian((0.0,) * dim), name="trivial")
    return ConnectionSpec(rank, ConstantMatrix(np.zeros((dim, rank, rank))),
                          "real-orthogonal" if real else "complex-unitary", name="trivial")


def flat_abelian(theta, name="") -> ConnectionSpec:
    return ConnectionSpec(1, FlatAbelian(tuple(theta)), name=name)


def constant_matrix(coeffs, real=False, name="") -> ConnectionSpec:
    c = np.asarray(coeffs)
    return ConnectionSpec(c.shape[1], ConstantMatrix(c),
                          "real-orthogonal" if real else "complex-unitary", name=name)


PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def su2_constant(cx=0.5, cy=0.5) -> ConnectionSpec:
    """``a_1 = i cx sigma_x``, ``a_2 = i cy sigma_y`` on the trivial C^2 bundle."""
    return constant_matrix([1j * cx * PAULI["x"], 1j * cy * PAULI["y"]], name="su2")


def uniform_field(B=1.0) -> ConnectionSpec:
    """Lift-defined field ``i pi B (x_1 dx_2 - x_2 dx_1)`` of curvature 2 pi B."""

    def ev(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros((pts.shape[0], 2, 1, 1), dtype=complex)
        out[:, 0, 0, 0] = -1j * np.pi * B * pts[:, 1]
        out[:, 1, 0, 0] = 1j * np.pi * B * pts[:, 0]
        return out

    return ConnectionSpec(1, FieldOneForm(ev, restrict_to_contractible=True,
                                          smoothness="polynomial"), name=f"uniform_field_{B}")


@dataclass
class GroupElement:
    matrix: np.ndarray

    @property
    def rank(self):
        return self.matrix.shape[0]

    def trace_norm(self):
        return trace_norm(self.matrix)

    def unitarity_defect(self) -> float:
        u = self.matrix
        return float(np.linalg.norm(np.conj(u.T) @ u - np.eye(u.shape[0]), 2))


def trace_norm(U):
    """Normalized trace; accepts a GroupElement or a stack of matrices."""
    if isinstance(U, GroupElement):
        U = U.matrix
    U = np.asarray(U)
    n = U.shape[-1]
    return np.trace(U, axis1=-2, axis2=-1) / n


def _field_generators(conn, points, offsets, torus):
    """``-sum_j A_j(mid) dy^j`` for every segment of every path."""
    form = conn.form
    seg_start = np.ones(points.shape[0] - 1, dtype=bool)
    seg_start[offsets[1:-1] - 1] = False
    a = points[:-1][seg_start]
    b = points[1:][seg_start]
    mid = 0.5 * (a + b)
    if not form.restrict_to_contractible and torus is not None:
        mid = torus.project(mid)
    coeffs = np.asarray(form.evaluator(mid), dtype=complex)
    _check_skew(coeffs)
    return -np.einsum("sjab,sj->sab", coeffs, b - a)


def holonomy_batch(conn: ConnectionSpec, points, offsets, torus: Optional[TorusSpec] = None,
                   windings=None) -> np.ndarray:
    """Holonomies of concatenated polygonal paths, shape ``(k, n, n)``."""
    points = np.ascontiguousarray(points, dtype=float)
    offsets = np.asarray(offsets, dtype=np.int64)
    k = len(offsets) - 1
    n = conn.rank
    form = conn.form
    if isinstance(form, FlatAbelian):
        disp = points[offsets[1:] - 1] - points[offsets[:-1]]
        phase = np.exp(-2j * np.pi * disp @ np.asarray(form.theta))
        return phase.reshape(k, 1, 1)
    out = np.empty((k, n, n), dtype=complex)
    if isinstance(form, ConstantMatrix):
        if not np.any(form.coeffs):
            out[:] = np.eye(n)
        else:
            _kernels.constant_transport(points, offsets, np.ascontiguousarray(form.coeffs), out)
    else:
        if form.restrict_to_contractible:
            if windings is None:
                disp = points[offsets[1:] - 1] - points[offsets[:-1]]
                closed_like = disp
            else:
                closed_like = np.asarray(windings)
            if np.any(np.abs(closed_like) > 1e-12):
                raise WindingError("lift-defined field used on a winding loop")
        gens = np.ascontiguousarray(_field_generators(conn, points, offsets, torus))
        seg_offsets = offsets - np.arange(k + 1)
        _kernels.ordered_exp_product(gens, seg_offsets, out)
    if conn.is_real:
        out = out.real
    return out


def holonomy(path, conn: ConnectionSpec, torus: Optional[TorusSpec] = None) -> GroupElement:
    """Parallel transport around a LoopPath or along an open ``(N+1, d)`` array."""
    if isinstance(path, LoopPath):
        pts, torus, winding = path.lifted_points, path.torus, path.winding[None, :]
    else:
        pts, winding = np.asarray(path, dtype=float), None
    offsets = np.array([0, pts.shape[0]], dtype=np.int64)
    return GroupElement(holonomy_batch(conn, pts, offsets, torus, winding)[0])


def chi(path, conn0: ConnectionSpec, conn1: ConnectionSpec):
    """Difference of normalized holonomy traces between two connections."""
    if conn0.same_as(conn1):
        return 0.0
    return trace_norm(holonomy(path, conn1)) - trace_norm(holonomy(path, conn0))


def chi_batch(conn0, conn1, points, offsets, torus=None, windings=None):
    if conn0.same_as(conn1):
        return np.zeros(len(offsets) - 1, dtype=complex)
    t1 = trace_norm(holonomy_batch(conn1, points, offsets, torus, windings))
    t0 = trace_norm(holonomy_batch(conn0, points, offsets, torus, windings))
    return np.asarray(t1 - t0, dtype=complex)


def winding_traces(conn: ConnectionSpec, windings) -> np.ndarray:
    """Normalized traces for winding-determined connections."""
    windings = np.atleast_2d(windings)
    if isinstance(conn.form, FlatAbelian):
        return np.exp(-2j * np.pi * windings @ np.asarray(conn.form.theta))
    if conn.winding_determined:
        return np.ones(windings.shape[0], dtype=complex)
    raise TypeError("holonomy is not determined by the winding")


def reroot(path: LoopPath, k: int) -> LoopPath:
    """Cyclically rotate a closed loop so that it starts at grid index k."""
    if not path.closed:
        raise ValueError("only closed loops can be rerooted")
    y = path.lifted_points
    k = k % path.n_steps
    shift = y[-1] - y[0]
    new = np.concatenate([y[k:], y[1:k + 1] + shift], axis=0)
    return LoopPath(path.torus, path.duration, new, path.winding.copy(), True)


def reverse(path):
    if isinstance(path, LoopPath):
        return path.reversed()
    return np.asarray(path)[::-1].copy()


def circle_loop(center, radius, n_steps, turns=1):
    """Closed polygon with ``n_steps`` equal steps on a circle."""
    s = np.linspace(0.0, 2 * np.pi * turns, n_steps + 1)
    pts = np.stack([center[0] + radius * np.cos(s), center[1] + radius * np.sin(s)], axis=1)
    pts[-1] = pts[0]
    return pts


@dataclass
class OrderReport:
    resolutions: list
    errors: list
    log2_ratios: list
    reference_resolution: int

    @property
    def observed_order(self) -> float:
        r = [v for v in self.log2_ratios if np.isfinite(v)]
        return float(np.median(r)) if r else float("inf")

    @property
    def exact(self) -> bool:
        return max(self.errors) < 1e-13


def integrator_order_study(conn: ConnectionSpec, curve: Callable, ladder=(32, 64, 128, 256, 512),
                           torus: Optional[TorusSpec] = None) -> OrderReport:
    """Error of the holonomy integrator on a smooth curve as resolution doubles.

    ``curve(n)`` must return the ``(n + 1, d)`` polygon with n steps. The
    reference uses 8 times the finest resolution.
    """
    ladder = list(ladder)
    ref_n = 8 * max(ladder)
    ref = holonomy(curve(ref_n), conn, torus).matrix
    errors = []
    for n in ladder:
        u = holonomy(curve(n), conn, torus).matrix
        errors.append(float(np.linalg.norm(u - ref, 2)))
    ratios = []
    for e0, e1 in zip(errors[:-1], errors[1:]):
        ratios.append(float(np.log2(e0 / e1)) if e0 > 1e-14 and e1 > 1e-14 else float("nan"))
    return OrderReport(ladder, errors, ratios, ref_n)
