"""Config-driven experiment runner.

    loopdet run <config.yaml>
    loopdet compare <a.json> <b.json> [--pair KEY_A:KEY_B ...]
    loopdet suite <dir>

Exit codes: 0 success, 2 invalid config or incomparable records,
3 a numerical check failed (the record is still written), 4 I/O error.
"""

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml

from . import connection as cn
from . import estimator as est
from . import geometry as geo
from . import gff
from . import loopsoup as ls
from . import spectral as sp
from ._parallel import chunk_rng, default_workers

SCHEMA_VERSION = 1
KINDS = ["validate-kernel", "soup-sample", "estimate-det", "integral-form", "spectral-oracle",
         "moments", "symanzik", "conformal", "campbell", "feynman-kac", "levy-area",
         "delta-ladder"]

EXIT_OK, EXIT_SCHEMA, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4

_num = {"type": "number"}
_int = {"type": "integer"}
_vec = {"type": "array", "items": _num}
_names = {"type": "array", "items": {"type": "string"}}

_connection_schema = {
    "type": "object",
    "required": ["form"],
    "additionalProperties": False,
    "properties": {
        "form": {"enum": ["trivial", "flat_abelian", "constant_matrix", "su2", "so2", "uniform_field"]},
        "rank": _int,
        "real": {"type": "boolean"},
        "theta": _vec,
        "coeffs_re": {"type": "array"},
        "coeffs_im": {"type": "array"},
        "cx": _num,
        "cy": _num,
        "angles": _vec,
        "B": _num,
    },
}

_section_schema = {
    "type": "object",
    "required": ["modes", "coeffs_re"],
    "additionalProperties": False,
    "properties": {
        "modes": {"type": "array", "items": {"type": "array", "items": _int}},
        "coeffs_re": {"type": "array", "items": _vec},
        "coeffs_im": {"type": "array", "items": _vec},
    },
}

_params = {
    "validate-kernel": {
        "t_values": _vec, "n_points": _int, "grid": _int,
    },
    "soup-sample": {
        "n_soups": _int, "snapshot": {"type": "string"}, "histogram_bins": _int,
    },
    "estimate-det": {
        "conn0": {"type": "string"}, "conn1": {"type": "string"},
        "fitted_c": _num, "fit_samples": _int, "bands": _vec,
        "stderr_target": _num, "strict_diamagnetic": {"type": "boolean"},
        "integral_form": {"type": "object", "additionalProperties": False,
                          "properties": {"total_samples": _int, "n_panels": _int, "order": _int}},
    },
    "integral-form": {
        "conn0": {"type": "string"}, "conn1": {"type": "string"},
        "total_samples": _int, "n_panels": _int, "order": _int, "samples_per_t": _int,
    },
    "spectral-oracle": {
        "conn0": {"type": "string"}, "conn1": {"type": "string"}, "t0": _vec,
        "negate_theta": {"type": "boolean"},
    },
    "moments": {
        "conn": {"type": "string"}, "t_grid": _vec, "x_grid": {"type": "array", "items": _vec},
        "samples": _int, "zero_winding": {"type": "boolean"},
        "expected": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": False, "required": ["slope", "tolerance"],
            "properties": {"slope": _num, "tolerance": _num}}},
    },
    "symanzik": {
        "members": _names, "probs": _vec, "k": _int, "samples": _int,
        "sections": {"type": "array", "items": _section_schema},
        "f_indicator": {"type": ["integer", "null"]},
        "loop_soup_replicas": _int,
    },
    "conformal": {
        "conn0": {"type": "string"}, "conn1": {"type": "string"}, "amplitude": _num,
        "axis": _int, "pathwise_durations": _vec, "pathwise_tolerance": _num,
    },
    "campbell": {
        "intensity": _num, "samples": _int,
        "g": {"type": "object", "additionalProperties": False,
              "properties": {"constant": _num, "amplitude": _num, "frequency": _int}},
        "expected": {"type": "object", "additionalProperties": False,
                     "properties": {"re": _num, "im": _num}},
    },
    "feynman-kac": {
        "conn": {"type": "string"}, "t": _num, "x": _vec, "y": _vec, "bridges": _int,
        "n_steps": _int,
    },
    "levy-area": {
        "B": _num, "t_values": _vec, "bridges": _int, "h0": _num,
        "brute_force_bridges": _int, "brute_force_steps": _int,
    },
    "delta-ladder": {
        "conn0": {"type": "string"}, "conn1": {"type": "string"}, "ladder": _vec,
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "kind", "seed"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": KINDS},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "replicas": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "manifold": {
            "type": "object", "additionalProperties": False, "required": ["dim", "side_lengths"],
            "properties": {"dim": {"enum": [2, 3]}, "side_lengths": _vec},
        },
        "mass": {
            "type": "object", "additionalProperties": False,
            "properties": {"constant": {"type": "number", "minimum": 0},
                           "cosine": {"type": "object", "additionalProperties": False,
                                      "required": ["base", "amplitude"],
                                      "properties": {"base": _num, "amplitude": _num, "axis": _int}}},
        },
        "connections": {"type": "object", "additionalProperties": _connection_schema},
        "soup": {
            "type": "object", "additionalProperties": False,
            "properties": {"alpha": _num, "delta": _num, "big_r": _num, "n_min": _int, "h0": _num},
        },
        "params": {"type": "object"},
        "output": {"type": "string"},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": k}}},
         "then": {"properties": {"params": {"type": "object", "additionalProperties": False,
                                            "properties": props}}}}
        for k, props in _params.items()
    ],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    seed: int
    torus: geo.TorusSpec
    mass: geo.MassField
    connections: dict
    soup: ls.SoupConfig
    replicas: int
    params: dict
    output: str
    raw: dict
    workers: int = 1
    config_hash: str = ""

    def conn(self, key):
        try:
            return self.connections[key]
        except KeyError:
            raise ConfigError(f"unknown connection '{key}'") from None


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_connection(spec: dict, dim: int) -> cn.ConnectionSpec:
    form = spec["form"]
    if form == "trivial":
        return cn.trivial(spec.get("rank", 1), dim, spec.get("real", False))
    if form == "flat_abelian":
        theta = spec.get("theta")
        if theta is None or len(theta) != dim:
            raise ConfigError("flat_abelian needs theta with one entry per dimension")
        return cn.flat_abelian(theta)
    if form == "su2":
        if dim != 2:
            raise ConfigError("the su2 shortcut is two-dimensional")
        return cn.su2_constant(spec.get("cx", 0.5), spec.get("cy", 0.5))
    if form == "so2":
        angles = spec.get("angles")
        if angles is None or len(angles) != dim:
            raise ConfigError("so2 needs one angle per dimension")
        gen = np.array([[0.0, 1.0], [-1.0, 0.0]])
        return cn.constant_matrix([a * gen for a in angles], real=True)
    if form == "constant_matrix":
        re = np.asarray(spec.get("coeffs_re"), dtype=float)
        im = np.asarray(spec.get("coeffs_im", np.zeros_like(re)), dtype=float)
        return cn.constant_matrix(re + 1j * im, real=spec.get("real", False))
    if form == "uniform_field":
        return cn.uniform_field(spec.get("B", 1.0))
    raise ConfigError(f"unknown connection form {form}")


def build_mass(spec: Optional[dict], torus: geo.TorusSpec) -> geo.MassField:
    spec = spec or {"constant": 1.0}
    if "constant" in spec and "cosine" in spec:
        raise ConfigError("mass must be either constant or cosine")
    if "cosine" in spec:
        c = spec["cosine"]
        base, amp, axis = c["base"], c["amplitude"], c.get("axis", 0)
        if base - abs(amp) < 0:
            raise ConfigError("mass must be nonnegative")
        L = torus.side_lengths[axis]
        return geo.MassField.from_function(lambda p: base + amp * np.cos(2 * np.pi * p[:, axis] / L),
                                           lower_bound=base - abs(amp))
    return geo.MassField.constant(spec.get("constant", 1.0))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{'/'.join(str(p) for p in exc.absolute_path)}: {exc.message}") from exc
    try:
        man = raw.get("manifold", {"dim": 2, "side_lengths": [1.0, 1.0]})
        torus = geo.TorusSpec(man["dim"], tuple(man["side_lengths"]))
        mass = build_mass(raw.get("mass"), torus)
        conns = {k: build_connection(v, torus.dim) for k, v in raw.get("connections", {}).items()}
        s = raw.get("soup", {})
        soup = ls.SoupConfig(s.get("alpha", 1.0), s.get("delta", 1e-3), s.get("big_r", 20.0),
                             raw["seed"], s.get("n_min", geo.N_MIN), s.get("h0", geo.H0))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    env_workers = os.environ.get("LOOPDET_WORKERS")
    workers = int(env_workers) if env_workers else raw.get("workers", 1)
    return ExperimentConfig(raw["name"], raw["kind"], raw["seed"], torus, mass, conns, soup,
                            raw.get("replicas", 1000), raw.get("params", {}),
                            raw.get("output", f"results/{raw['name']}.json"), raw,
                            workers, config_hash(raw))


# payload helpers

def meas(value, stderr=None):
    """Measurement object: a value with its uncertainty or an exactness flag."""
    if stderr is None:
        return {"value": float(value), "exact": True}
    return {"value": float(value), "stderr": float(stderr)}


def diag(payload, key, value):
    """Seed-dependent summary kept out of record comparisons."""
    payload.setdefault("diagnostics", {})[key] = _plain(value)


def check(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **{k: _plain(v) for k, v in detail.items()}}


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


class Tables(dict):
    """Named CSV tables: name -> (header, rows)."""


def _oracle_for(cfg, conn0, conn1, alpha):
    if not cfg.mass.is_constant:
        return None
    try:
        m0 = sp.SpectralModel(cfg.torus, conn0, cfg.mass.constant_value)
        m1 = sp.SpectralModel(cfg.torus, conn1, cfg.mass.constant_value)
    except TypeError:
        return None
    return sp.oracle_ratio(m0, m1, alpha)


# experiments

def exp_validate_kernel(cfg: ExperimentConfig):
    p = cfg.params
    torus = cfg.torus
    rng = chunk_rng(cfg.seed, 0, stream=101)
    ts = p.get("t_values", [0.01, 0.1, 1.0, 10.0])
    n_pts = p.get("n_points", 5)
    g = p.get("grid", 96)
    payload, checks = {}, []
    axes = [(np.arange(g) + 0.5) * L / g for L in torus.side_lengths]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    cell = torus.volume / len(mesh)
    x = torus.uniform_points(n_pts, rng)
    y = torus.uniform_points(n_pts, rng)
    worst_norm, worst_sym = 0.0, 0.0
    for t in ts:
        for xi, yi in zip(x, y):
            worst_sym = max(worst_sym, abs(geo.heat_kernel(torus, t, xi, yi) - geo.heat_kernel(torus, t, yi, xi)))
            if t >= 0.01:
                tot = geo.heat_kernel(torus, t, xi[None, :], mesh).sum() * cell
                worst_norm = max(worst_norm, abs(tot - 1.0))
    payload["normalization_defect"] = meas(worst_norm)
    payload["symmetry_defect"] = meas(worst_sym)
    checks.append(check("normalization", worst_norm <= 1e-8, defect=worst_norm))
    checks.append(check("symmetry", worst_sym == 0.0, defect=worst_sym))
    worst_ck = 0.0
    for s, t in [(0.1, 0.2), (0.5, 1.0), (2.0, 0.3)]:
        for xi, yi in zip(x, y):
            integrand = geo.heat_kernel(torus, s, xi[None, :], mesh) * geo.heat_kernel(torus, t, mesh, yi[None, :])
            lhs = integrand.sum() * cell
            rhs = geo.heat_kernel(torus, s + t, xi, yi)
            worst_ck = max(worst_ck, abs(lhs - rhs) / rhs)
    payload["chapman_kolmogorov_defect"] = meas(worst_ck)
    checks.append(check("chapman_kolmogorov", worst_ck <= 1e-6, defect=worst_ck))
    tt = np.geomspace(1e-4, 1.0, 200)
    ratio = np.array([geo.heat_kernel(torus, t, x[0], x[0]) for t in tt]) * (2 * np.pi * tt) ** (torus.dim / 2)
    payload["diagonal_ratio_min"] = meas(ratio.min())
    payload["diagonal_ratio_max"] = meas(ratio.max())
    small = tt <= 0.03
    payload["diagonal_ratio_max_small_t"] = meas(ratio[small].max())
    if all(L == 1.0 for L in torus.side_lengths):
        # literal interval over the whole range; it cannot hold near t = 1
        checks.append(check("diagonal_control", ratio.min() >= 1.0 - 1e-12 and ratio.max() <= 1 + 1e-6,
                            lo=ratio.min(), hi=ratio.max()))
        checks.append(check("diagonal_control_small_t", ratio.min() >= 1.0 - 1e-12 and ratio[small].max() <= 1 + 1e-6,
                            hi=ratio[small].max()))
        checks.append(check("diagonal_bounded", ratio.max() <= (2 * np.pi) ** (torus.dim / 2) * (1 + 1e-6),
                            hi=ratio.max()))
        r001 = geo.heat_kernel(torus, 0.01, x[0], x[0]) * (2 * np.pi * 0.01) ** (torus.dim / 2)
        p50 = geo.heat_kernel(torus, 50.0, x[0], x[0])
        payload["diagonal_ratio_t0.01"] = meas(r001)
        payload["diagonal_t50"] = meas(p50)
        checks.append(check("small_t_limit", abs(r001 - 1) <= 1e-10, value=r001))
        checks.append(check("large_t_limit", abs(p50 - 1) <= 1e-10, value=p50))
    return payload, checks, Tables()


def exp_soup_sample(cfg: ExperimentConfig):
    p = cfg.params
    n = p.get("n_soups", cfg.replicas)
    counts, durations = [], []
    batches = ls.map_replica_chunks(lambda b: (np.bincount(b.replica, minlength=b.n_replicas), b.durations),
                                    cfg.torus, cfg.soup, cfg.mass, n, need_paths=not cfg.mass.is_constant,
                                    workers=cfg.workers)
    for c, d in batches:
        counts.append(c)
        durations.append(d)
    counts = np.concatenate(counts)
    durations = np.concatenate(durations)
    payload, checks = {}, []
    mean, se = counts.mean(), counts.std(ddof=1) / math.sqrt(n)
    payload["mean_count"] = meas(mean, se)
    if cfg.mass.is_constant:
        expected = ls.expected_kept_count(cfg.torus, cfg.soup, cfg.mass.constant_value)
        payload["expected_count"] = meas(expected)
        z = (mean - expected) / se
        diag(payload, "z_count", z)
        checks.append(check("kept_count", abs(z) <= 3, z=z))
    tables = Tables()
    bins = p.get("histogram_bins", 20)
    edges = np.geomspace(cfg.soup.delta, cfg.soup.big_r, bins + 1)
    hist, _ = np.histogram(durations, edges)
    tables["durations"] = (["t_lo", "t_hi", "count"], [[a, b, int(h)] for a, b, h in zip(edges[:-1], edges[1:], hist)])
    if p.get("snapshot"):
        soup = ls.sample_soup(cfg.torus, cfg.soup, cfg.mass, chunk_rng(cfg.seed, 0, stream=103))
        path = _resolve(p["snapshot"])
        path.parent.mkdir(parents=True, exist_ok=True)
        ls.save_soup(soup, path)
        diag(payload, "snapshot_loops", len(soup))
    return payload, checks, tables


def _det_checks(cfg, e, oracle, conn0, payload, checks, strict=False, stderr_target=None):
    mean = e.mean.real
    payload["estimate"] = meas(mean, e.stderr)
    payload["estimate_imag"] = meas(e.mean.imag, e.stderr_imag)
    payload["bias_small_t"] = meas(e.small_t_bias_bound)
    payload["bias_large_r"] = meas(e.large_r_bias_bound)
    diag(payload, "mean_bias", e.mean_bias)
    diag(payload, "fitted_c", e.fitted_c)
    z_im = e.mean.imag / e.stderr_imag if e.stderr_imag > 0 else 0.0
    # absolute floor for imaginary parts that are pure roundoff
    checks.append(check("realness", abs(e.mean.imag) <= 3 * e.stderr_imag + 1e-12, z=z_im))
    if oracle is not None:
        v, verr, z = oracle
        payload["oracle"] = meas(v, verr)
        payload["zeta_prime_diff"] = meas(z.value, z.error)
        s = math.hypot(e.stderr, verr)
        zz = (mean - v) / s if s > 0 else 0.0
        diag(payload, "z_oracle", zz)
        checks.append(check("oracle_agreement", abs(mean - v) <= 3 * s + e.mean_bias,
                            diff=mean - v, allowed=3 * s + e.mean_bias))
    if conn0.is_trivial and conn0.rank == 1:
        checks.append(check("diamagnetic", mean <= 1 + 3 * e.stderr, margin=1 + 3 * e.stderr - mean))
        if strict:
            checks.append(check("diamagnetic_strict", mean < 1 - 3 * e.stderr, margin=1 - 3 * e.stderr - mean))
    if stderr_target is not None:
        rel = e.stderr / abs(mean) if mean else math.inf
        diag(payload, "relative_stderr", rel)
        checks.append(check("stderr_target", rel <= stderr_target, relative=rel))


def exp_estimate_det(cfg: ExperimentConfig):
    p = cfg.params
    conn0, conn1 = cfg.conn(p.get("conn0", "trivial")), cfg.conn(p.get("conn1", "twisted"))
    e = est.estimate_partition_ratio(cfg.torus, cfg.soup, cfg.mass, conn0, conn1, cfg.replicas,
                                     workers=cfg.workers, fitted_c=p.get("fitted_c"),
                                     fit_samples=p.get("fit_samples", 20000), bands=p.get("bands"))
    oracle = None if conn0.same_as(conn1) else _oracle_for(cfg, conn0, conn1, cfg.soup.intensity_alpha)
    payload, checks = {}, []
    if conn0.same_as(conn1):
        diag(payload, "z_oracle", 0.0)
    _det_checks(cfg, e, oracle, conn0, payload, checks, p.get("strict_diamagnetic", False),
                p.get("stderr_target"))
    tables = Tables()
    if "integral_form" in p and not conn0.same_as(conn1):
        q = p["integral_form"]
        ie = est.integral_form_estimate(cfg.torus, cfg.mass, conn0, conn1, cfg.soup.delta,
                                        cfg.soup.big_r, q.get("total_samples", 400_000),
                                        n_panels=q.get("n_panels", 24), order=q.get("order", 8),
                                        alpha=cfg.soup.intensity_alpha, seed=cfg.seed,
                                        workers=cfg.workers, fitted_c=e.fitted_c,
                                        n_min=cfg.soup.n_min, h0=cfg.soup.h0)
        payload["integral_form"] = meas(ie.ratio, ie.ratio_err)
        payload["integral"] = meas(ie.integral.real, ie.stderr)
        a, sa = e.mean.real, e.stderr
        b, sb = ie.ratio, ie.ratio_err
        checks.append(check("triangle_soup_integral", abs(a - b) <= 3 * math.hypot(sa, sb), diff=a - b,
                            allowed=3 * math.hypot(sa, sb)))
        if oracle is not None:
            v, verr, _ = oracle
            allowed = 3 * math.hypot(sb, verr) + ie.ratio_bias
            checks.append(check("triangle_integral_oracle", abs(b - v) <= allowed, diff=b - v, allowed=allowed))
        tables["integrand"] = (["t", "weight", "mean_re", "mean_im", "stderr", "samples"],
                               [[t, w, m.real, m.imag, s, int(n)] for t, w, m, s, n in
                                zip(ie.t_nodes, ie.weights, ie.node_means, ie.node_stderr, ie.node_samples)])
    return payload, checks, tables


def exp_integral_form(cfg: ExperimentConfig):
    p = cfg.params
    conn0, conn1 = cfg.conn(p.get("conn0", "trivial")), cfg.conn(p.get("conn1", "twisted"))
    ie = est.integral_form_estimate(cfg.torus, cfg.mass, conn0, conn1, cfg.soup.delta, cfg.soup.big_r,
                                    p.get("total_samples", 400_000), n_panels=p.get("n_panels", 24),
                                    order=p.get("order", 8), alpha=cfg.soup.intensity_alpha,
                                    seed=cfg.seed, workers=cfg.workers, n_min=cfg.soup.n_min,
                                    h0=cfg.soup.h0, samples_per_t=p.get("samples_per_t"))
    payload = {"integral": meas(ie.integral.real, ie.stderr), "ratio": meas(ie.ratio, ie.ratio_err)}
    checks = []
    oracle = None if conn0.same_as(conn1) else _oracle_for(cfg, conn0, conn1, cfg.soup.intensity_alpha)
    if oracle is not None:
        v, verr, z = oracle
        payload["oracle"] = meas(v, verr)
        s = math.hypot(ie.ratio_err, verr)
        diag(payload, "z_oracle", (ie.ratio - v) / s if s else 0.0)
        checks.append(check("oracle_agreement", abs(ie.ratio - v) <= 3 * s + ie.ratio_bias, diff=ie.ratio - v))
    tables = Tables()
    tables["integrand"] = (["t", "weight", "mean_re", "mean_im", "stderr", "samples"],
                           [[t, w, m.real, m.imag, s, int(n)] for t, w, m, s, n in
                            zip(ie.t_nodes, ie.weights, ie.node_means, ie.node_stderr, ie.node_samples)])
    return payload, checks, tables


def exp_spectral_oracle(cfg: ExperimentConfig):
    p = cfg.params
    if not cfg.mass.is_constant:
        raise ConfigError("the spectral oracle needs a constant mass")
    m0 = cfg.mass.constant_value
    conn0, conn1 = cfg.conn(p.get("conn0", "trivial")), cfg.conn(p.get("conn1", "twisted"))
    payload, checks = {}, []
    values = []
    for t0 in p.get("t0", [1e-3]):
        a = sp.SpectralModel(cfg.torus, conn0, m0, t_floor=t0)
        b = sp.SpectralModel(cfg.torus, conn1, m0, t_floor=t0)
        z = sp.zeta_prime_diff(a, b, t0)
        payload[f"zeta_prime_diff_t0_{t0:g}"] = meas(z.value, z.error)
        values.append((z.value, z.error))
    for (v1, e1), (v2, e2) in zip(values[:-1], values[1:]):
        checks.append(check("split_consistency", abs(v1 - v2) <= e1 + e2 + 1e-12, diff=v1 - v2))
    v, err = values[0]
    payload["ratio"] = meas(math.exp(cfg.soup.intensity_alpha * v), math.exp(cfg.soup.intensity_alpha * v) * err)
    if p.get("negate_theta") and isinstance(conn1.form, cn.FlatAbelian):
        neg = cn.flat_abelian([-x for x in conn1.form.theta])
        a = sp.SpectralModel(cfg.torus, conn0, m0)
        zn = sp.zeta_prime_diff(a, sp.SpectralModel(cfg.torus, neg, m0))
        payload["zeta_prime_diff_negated"] = meas(zn.value, zn.error)
        checks.append(check("antipodal_symmetry", abs(zn.value - v) <= 1e-12, diff=zn.value - v))
    return payload, checks, Tables()


def exp_moments(cfg: ExperimentConfig):
    p = cfg.params
    conn = cfg.conn(p.get("conn", "twisted"))
    rep = est.moments_vs_t(cfg.torus, conn, p.get("t_grid", [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]),
                           p.get("x_grid", [[0.0] * cfg.torus.dim]), p.get("samples", cfg.replicas),
                           seed=cfg.seed, zero_winding=p.get("zero_winding", False),
                           n_min=cfg.soup.n_min, h0=cfg.soup.h0, workers=cfg.workers)
    payload, checks = {}, []
    for name, (s, e) in rep.slopes.items():
        payload[f"slope_{name}"] = meas(s, e)
    for name, exp in p.get("expected", {}).items():
        s = rep.slopes.get(name)
        ok = s is not None and abs(s[0] - exp["slope"]) <= exp["tolerance"]
        checks.append(check(f"slope_{name}", ok, slope=None if s is None else s[0],
                            expected=exp["slope"], tolerance=exp["tolerance"]))
    rows = []
    for i, t in enumerate(rep.t_grid):
        row = [t]
        for q in sorted(rep.moments):
            row += [rep.moments[q][i], rep.moment_stderr[q][i]]
        row += [rep.mean_defect[i], rep.mean_defect_stderr[i]]
        rows.append(row)
    header = ["t"] + [f"{k}{q}" for q in sorted(rep.moments) for k in ("moment_", "stderr_")] + ["mean_defect", "mean_defect_stderr"]
    return payload, checks, Tables(moments=(header, rows))


def _section(spec, real):
    re = np.asarray(spec["coeffs_re"], dtype=float)
    im = np.asarray(spec.get("coeffs_im", np.zeros_like(re)), dtype=float)
    return sp.Section(spec["modes"], re + 1j * im, real)


def exp_symanzik(cfg: ExperimentConfig):
    p = cfg.params
    if not cfg.mass.is_constant:
        raise ConfigError("symanzik experiments need a constant mass")
    m0 = cfg.mass.constant_value
    names = p["members"]
    probs = p.get("probs", [1.0 / len(names)] * len(names))
    models = [sp.SpectralModel(cfg.torus, cfg.conn(n), m0) for n in names]
    ens = gff.ConnectionEnsemble(models, probs)
    sections = [_section(s, ens.real) for s in p["sections"]]
    k = p.get("k", len(sections) // 2)
    ind = p.get("f_indicator")
    f = (lambda i: 1.0) if ind is None else (lambda i: float(i == ind))
    rng = chunk_rng(cfg.seed, 0, stream=107)
    w = gff.annealed_weights(ens, method="spectral")
    rep = gff.symanzik_moment(ens, sections, f, k, rng, p.get("samples", cfg.replicas), weights=w)
    payload = {"formula": meas(rep.formula.real, rep.formula_err),
               "direct": meas(rep.direct.real, rep.direct_err),
               "direct_imag": meas(rep.direct.imag, rep.direct_err_imag)}
    diag(payload, "z", rep.z)
    for i, wi in enumerate(w.weights):
        payload[f"weight_spectral_{names[i]}"] = meas(wi, w.stderr[i])
    checks = [check("symanzik", abs(rep.z) <= 3 and abs(rep.z_imag) <= 3, z=rep.z, z_imag=rep.z_imag)]
    n = rep.counts.sum()
    for i, c in enumerate(rep.counts):
        se = math.sqrt(w.weights[i] * (1 - w.weights[i]) / n)
        zc = (c / n - w.weights[i]) / se if se > 0 else 0.0
        checks.append(check(f"annealed_marginal_{names[i]}", abs(zc) <= 3, z=zc))
    if p.get("loop_soup_replicas"):
        wl = gff.annealed_weights(ens, method="loop_soup", replicas=p["loop_soup_replicas"],
                                  soup_config=cfg.soup, workers=cfg.workers)
        for i, wi in enumerate(wl.weights):
            payload[f"weight_loop_soup_{names[i]}"] = meas(wi, wl.stderr[i])
            s = wl.stderr[i]
            zw = (wi - w.weights[i]) / s if s > 0 else 0.0
            checks.append(check(f"weights_agree_{names[i]}", abs(zw) <= 3, z=zw))
    return payload, checks, Tables()


def exp_conformal(cfg: ExperimentConfig):
    p = cfg.params
    conn0, conn1 = cfg.conn(p.get("conn0", "trivial")), cfg.conn(p.get("conn1", "twisted"))
    amp, axis = p.get("amplitude", 0.2), p.get("axis", 0)
    L = cfg.torus.side_lengths[axis]
    f = lambda pts: amp * np.cos(2 * np.pi * pts[:, axis] / L)
    rep = est.conformal_cutoff_products(cfg.torus, cfg.soup, cfg.mass, conn0, conn1, f, abs(amp),
                                        cfg.replicas, workers=cfg.workers)
    payload = {"product_g_clock": meas(rep.mean_g.real, rep.stderr_g),
               "product_ghat_clock": meas(rep.mean_ghat.real, rep.stderr_ghat),
               "paired_difference": meas(rep.paired_diff.real, rep.paired_stderr)}
    diag(payload, "z", rep.z)
    checks = [check("cutoff_agreement", abs(rep.z) <= 3, z=rep.z)]
    defect = est.reparam_trace_defect(cfg.torus, conn1, f, p.get("pathwise_durations", [0.01, 0.1, 0.5, 1.0, 2.0]),
                                      seed=cfg.seed)
    diag(payload, "pathwise_trace_defect", defect)
    checks.append(check("pathwise_trace", defect <= p.get("pathwise_tolerance", 1e-6), defect=defect))
    return payload, checks, Tables()


def exp_campbell(cfg: ExperimentConfig):
    p = cfg.params
    g = p.get("g", {"constant": -0.5})
    if "constant" in g:
        c = g["constant"]
        fn = lambda x: np.full(np.shape(x), c, dtype=complex)
    else:
        a, k = g.get("amplitude", 0.4), g.get("frequency", 1)
        fn = lambda x: a * np.exp(2j * np.pi * k * np.asarray(x))
    rng = chunk_rng(cfg.seed, 0, stream=109)
    rep = ls.campbell_expectation_check(p.get("intensity", 2.0), fn, p.get("samples", cfg.replicas), rng)
    payload = {"mc_mean": meas(rep.mc_mean.real, rep.stderr),
               "mc_mean_imag": meas(rep.mc_mean.imag, rep.stderr_imag),
               "closed_form": meas(rep.closed_form.real),
               "closed_form_imag": meas(rep.closed_form.imag)}
    diag(payload, "z", rep.z_real)
    diag(payload, "z_imag", rep.z_imag)
    checks = [check("campbell", rep.passed, z=rep.z_real, z_imag=rep.z_imag)]
    if "expected" in p:
        e = complex(p["expected"].get("re", 0.0), p["expected"].get("im", 0.0))
        checks.append(check("closed_form_matches_expected", abs(rep.closed_form - e) <= 1e-10,
                            diff=abs(rep.closed_form - e)))
    return payload, checks, Tables()


def exp_feynman_kac(cfg: ExperimentConfig):
    p = cfg.params
    conn = cfg.conn(p.get("conn", "twisted"))
    if not cfg.mass.is_constant:
        raise ConfigError("the spectral kernel needs a constant mass")
    t, x, y = p.get("t", 0.5), p.get("x", [0.0, 0.0]), p.get("y", [0.3, 0.4])
    model = sp.SpectralModel(cfg.torus, conn, cfg.mass.constant_value)
    K, kerr = model.heat_kernel_twisted(t, x, y)
    mc = est.feynman_kac_estimate(cfg.torus, conn, cfg.mass, t, x, y, p.get("bridges", cfg.replicas),
                                  seed=cfg.seed, n_steps=p.get("n_steps"))
    payload, checks = {}, []
    worst = 0.0
    for (i, j), kv in np.ndenumerate(K):
        m, s = mc.mean[i, j], mc.stderr[i, j]
        payload[f"kernel_{i}{j}_re"] = meas(kv.real, kerr)
        payload[f"kernel_{i}{j}_im"] = meas(kv.imag, kerr)
        payload[f"mc_{i}{j}_re"] = meas(m.real, s / math.sqrt(2))
        payload[f"mc_{i}{j}_im"] = meas(m.imag, s / math.sqrt(2))
        z = abs(m - kv) / s if s > 0 else 0.0
        worst = max(worst, z)
    diag(payload, "max_z", worst)
    checks.append(check("feynman_kac", worst <= 3, max_z=worst))
    return payload, checks, Tables()


def exp_levy_area(cfg: ExperimentConfig):
    p = cfg.params
    B = p.get("B", 1.0)
    payload, checks = {}, []
    for i, t in enumerate(p.get("t_values", [0.05, 0.1])):
        mean, se, se_im = est.levy_area_estimate(B, t, p.get("bridges", cfg.replicas),
                                                 seed=cfg.seed + i, h0=p.get("h0", 5e-5))
        oracle = est.levy_area_oracle(2 * np.pi * B, t)
        payload[f"mc_t{t:g}"] = meas(mean.real, se)
        payload[f"oracle_t{t:g}"] = meas(oracle)
        z = (mean.real - oracle) / se
        zi = mean.imag / se_im if se_im > 0 else 0.0
        diag(payload, f"z_t{t:g}", z)
        checks.append(check(f"levy_area_t{t:g}", abs(z) <= 3 and abs(zi) <= 3, z=z, z_imag=zi))
        if p.get("brute_force_bridges"):
            bf, bse = est.levy_area_shoelace(2 * np.pi * B, t, p["brute_force_bridges"],
                                             p.get("brute_force_steps", 2000), seed=cfg.seed + i)
            payload[f"shoelace_t{t:g}"] = meas(bf, bse)
            zb = (bf - oracle) / bse
            checks.append(check(f"oracle_vs_shoelace_t{t:g}", abs(zb) <= 3, z=zb))
    return payload, checks, Tables()


def exp_delta_ladder(cfg: ExperimentConfig):
    p = cfg.params
    conn0, conn1 = cfg.conn(p.get("conn0", "trivial")), cfg.conn(p.get("conn1", "twisted"))
    ladder = p.get("ladder", [1e-1, 3e-2, 1e-2, 3e-3, 1e-3])
    rep = est.delta_ladder_diagnostic(cfg.torus, cfg.mass, conn0, conn1, ladder, cfg.replicas,
                                      cfg.soup, workers=cfg.workers)
    payload, checks = {}, []
    rows = []
    for i, d in enumerate(rep.deltas):
        payload[f"mean_delta_{d:g}"] = meas(rep.means[i].real, rep.stderr[i])
        payload[f"nsm_delta_{d:g}"] = meas(rep.normalized_second_moment[i], rep.nsm_stderr[i])
        rows.append([d, rep.means[i].real, rep.stderr[i], rep.normalized_second_moment[i], rep.nsm_stderr[i]])
    nsm = rep.normalized_second_moment
    spread = nsm.max() - nsm.min()
    allowed = 3 * math.sqrt(2) * rep.nsm_stderr.max()
    checks.append(check("second_moment_stable", spread <= allowed, spread=spread, allowed=allowed))
    for i in range(len(rep.increments)):
        inc, se = rep.increments[i].real, rep.increment_stderr[i]
        checks.append(check(f"cauchy_{i}", abs(inc) <= 3 * se + 1e-15, increment=inc, stderr=se))
    return payload, checks, Tables(ladder=(["delta", "mean", "stderr", "nsm", "nsm_stderr"], rows))


RUNNERS = {
    "validate-kernel": exp_validate_kernel,
    "soup-sample": exp_soup_sample,
    "estimate-det": exp_estimate_det,
    "integral-form": exp_integral_form,
    "spectral-oracle": exp_spectral_oracle,
    "moments": exp_moments,
    "symanzik": exp_symanzik,
    "conformal": exp_conformal,
    "campbell": exp_campbell,
    "feynman-kac": exp_feynman_kac,
    "levy-area": exp_levy_area,
    "delta-ladder": exp_delta_ladder,
}


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _resolve(path) -> Path:
    path = Path(path)
    if path.is_absolute():
        return path
    root = os.environ.get("LOOPDET_OUTPUT_ROOT")
    return (Path(root) if root else Path.cwd()) / path


def run_config(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Run one experiment and return its record (written to disk when asked)."""
    started = _now()
    payload, checks, tables = RUNNERS[cfg.kind](cfg)
    record = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "kind": cfg.kind,
        "config_hash": cfg.config_hash,
        "timestamps": {"started": started, "finished": _now()},
        "provenance": {"seed": cfg.seed, "workers": cfg.workers},
        "payload": payload,
        "checks": checks,
        "status": "pass" if all(c["passed"] for c in checks) else "fail",
    }
    if write:
        out = _resolve(cfg.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True, default=_plain)
        for name, (header, rows) in tables.items():
            with open(out.with_suffix(f".{name}.csv"), "w", newline="") as fh:
                wtr = csv.writer(fh)
                wtr.writerow(header)
                wtr.writerows(rows)
        record["path"] = str(out)
    return record


def _print_record(record):
    print(f"{record['name']} [{record['kind']}] status={record['status']}")
    for c in record["checks"]:
        extra = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in c.items() if k not in ("name", "passed"))
        print(f"  {'PASS' if c['passed'] else 'FAIL'} {c['name']} {extra}")


def cmd_run(path) -> int:
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        record = run_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    _print_record(record)
    return EXIT_OK if record["status"] == "pass" else EXIT_CHECK


def _flatten(payload, prefix=""):
    out = {}
    for k, v in payload.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and "value" in v:
            out[key] = v
        elif isinstance(v, dict):
            out.update(_flatten(v, key + "."))
    return out


def _sigma(m):
    return 0.0 if m.get("exact") else float(m.get("stderr", 0.0))


def compare_records(a: dict, b: dict, pairs=None):
    """Per-key z-scores between two records, or between named key pairs."""
    fa, fb = _flatten(a.get("payload", {})), _flatten(b.get("payload", {}))
    if pairs:
        keys = []
        for ka, kb in pairs:
            if ka not in fa or kb not in fb:
                raise ValueError(f"missing key for pair {ka}:{kb}")
            keys.append((ka, kb))
    else:
        keys = [(k, k) for k in sorted(set(fa) & set(fb))]
        if not keys:
            raise ValueError("records share no comparable payload key")
    rows = []
    for ka, kb in keys:
        x, y = fa[ka], fb[kb]
        s = math.hypot(_sigma(x), _sigma(y))
        d = x["value"] - y["value"]
        z = 0.0 if d == 0 else (d / s if s > 0 else math.copysign(math.inf, d))
        rows.append({"key": ka if ka == kb else f"{ka}:{kb}", "a": x["value"], "b": y["value"],
                     "z": z, "passed": abs(z) <= 3})
    return rows


def cmd_compare(path_a, path_b, pair_args) -> int:
    try:
        with open(path_a) as fh:
            a = json.load(fh)
        with open(path_b) as fh:
            b = json.load(fh)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"invalid record: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    pairs = [tuple(p.split(":", 1)) for p in pair_args] if pair_args else None
    try:
        rows = compare_records(a, b, pairs)
    except ValueError as exc:
        print(f"incomparable records: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['key']}: a={r['a']:.10g} b={r['b']:.10g} z={r['z']:.3f}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_CHECK


def cmd_suite(directory) -> int:
    paths = sorted(Path(directory).glob("*.yaml")) + sorted(Path(directory).glob("*.yml"))
    if not paths:
        print(f"no configs in {directory}", file=sys.stderr)
        return EXIT_IO
    worst = EXIT_OK
    summary = []
    for p in paths:
        code = cmd_run(p)
        summary.append((p.name, code))
        worst = max(worst, code)
    print("suite summary")
    for name, code in summary:
        print(f"  {'PASS' if code == 0 else f'FAIL({code})'} {name}")
    return worst


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="loopdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    c = sub.add_parser("compare", help="z-scores between two result records")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--pair", action="append", default=[], metavar="KEY_A:KEY_B")
    s = sub.add_parser("suite", help="run every config in a directory")
    s.add_argument("directory")
    args = parser.parse_args(argv)
    if args.cmd == "run":
        return cmd_run(args.config)
    if args.cmd == "compare":
        return cmd_compare(args.a, args.b, args.pair)
    return cmd_suite(args.directory)


if __name__ == "__main__":
    sys.exit(main())
