"""Streaming moments and simple comparison statistics."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Welford:
    """Running count, mean and centred second moment of complex samples.

    Real and imaginary parts keep separate second moments.
    """
    count: int = 0
    mean: complex = 0j
    m2_re: float = 0.0
    m2_im: float = 0.0

    def add(self, values):
        values = np.asarray(values, dtype=complex).ravel()
        if values.size == 0:
            return self
        other = Welford(values.size, complex(values.mean()),
                        float(((values.real - values.real.mean()) ** 2).sum()),
                        float(((values.imag - values.imag.mean()) ** 2).sum()))
        return self.merge(other)

    def merge(self, other: "Welford"):
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2_re, self.m2_im = other.count, other.mean, other.m2_re, other.m2_im
            return self
        n = self.count + other.count
        d = other.mean - self.mean
        w = self.count * other.count / n
        self.mean = self.mean + d * other.count / n
        self.m2_re += other.m2_re + d.real ** 2 * w
        self.m2_im += other.m2_im + d.imag ** 2 * w
        self.count = n
        return self

    @property
    def var_re(self):
        return self.m2_re / (self.count - 1) if self.count > 1 else 0.0

    @property
    def var_im(self):
        return self.m2_im / (self.count - 1) if self.count > 1 else 0.0

    @property
    def stderr(self):
        return float(np.sqrt(self.var_re / self.count)) if self.count > 1 else 0.0

    @property
    def stderr_imag(self):
        return float(np.sqrt(self.var_im / self.count)) if self.count > 1 else 0.0


def zscore(a, sa, b, sb):
    s = np.hypot(sa, sb)
    if s == 0:
        return 0.0 if a == b else float("inf") * np.sign(a - b)
    return float((a - b) / s)


def loglog_slope(x, y, yerr=None):
    """Weighted least-squares slope of log y against log x with its standard error."""
    x = np.log(np.asarray(x, dtype=float))
    y_arr = np.asarray(y, dtype=float)
    ly = np.log(y_arr)
    if yerr is None:
        w = np.ones_like(x)
    else:
        rel = np.asarray(yerr, dtype=float) / y_arr
        w = 1.0 / np.maximum(rel, 1e-12) ** 2
    X = np.stack([np.ones_like(x), x], axis=1)
    A = X.T @ (w[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (w * ly))
    cov = np.linalg.inv(A)
    if yerr is None:
        resid = ly - X @ coef
        dof = max(len(x) - 2, 1)
        cov = cov * (resid @ resid) / dof
    return float(coef[1]), float(np.sqrt(cov[1, 1]))
