"""Acceptance gate: one test and one PASS/FAIL line per criterion."""

import math
import subprocess
import sys
import time
from pathlib import Path

import pytest
import yaml

import conftest
from loopdet import cli

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs" / "acceptance"
ZETA_DIFF_FLAT_03 = -0.7555657902930477
ZETA_DIFF_SU2 = -0.18738489

pytestmark = pytest.mark.slow

_records = {}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")

    def go(name):
        if name not in _records:
            with pytest.MonkeyPatch.context() as mp:
                mp.setenv("LOOPDET_OUTPUT_ROOT", str(root))
                cfg = cli.load_config(CONFIGS / f"{name}.yaml")
                _records[name] = cli.run_config(cfg)
        return _records[name]

    return go


def checks_of(rec):
    return {c["name"]: c for c in rec["checks"]}


def report(n, passed, detail):
    line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def test_criterion_1_abelian_determinant(run):
    rec = run("c01_abelian_det")
    c = checks_of(rec)
    p = rec["payload"]
    oracle_ok = abs(p["zeta_prime_diff"]["value"] - ZETA_DIFF_FLAT_03) <= 1e-9
    ok = (c["oracle_agreement"]["passed"] and c["stderr_target"]["passed"] and c["realness"]["passed"]
          and oracle_ok)
    detail = (f"mean={p['estimate']['value']:.5f}+-{p['estimate']['stderr']:.5f} "
              f"oracle={p['oracle']['value']:.5f} rel_stderr={p['diagnostics']['relative_stderr']:.4f}")
    assert report(1, ok, detail)


def test_criterion_2_nonabelian_determinant(run):
    rec = run("c02_su2_det")
    c = checks_of(rec)
    p = rec["payload"]
    oracle_ok = abs(p["zeta_prime_diff"]["value"] - ZETA_DIFF_SU2) <= 1e-8 + p["zeta_prime_diff"]["stderr"]
    ok = c["oracle_agreement"]["passed"] and c["realness"]["passed"] and oracle_ok
    detail = (f"mean={p['estimate']['value']:.5f}+-{p['estimate']['stderr']:.5f} "
              f"oracle={p['oracle']['value']:.5f}")
    assert report(2, ok, detail)


def test_criterion_3_estimator_triangle(run):
    parts = []
    ok = True
    for name in ("c01_abelian_det", "c02_su2_det"):
        c = checks_of(run(name))
        for key in ("oracle_agreement", "triangle_soup_integral", "triangle_integral_oracle"):
            ok &= c[key]["passed"]
        p = run(name)["payload"]
        parts.append(f"{name}: soup={p['estimate']['value']:.5f} integral={p['integral_form']['value']:.5f} "
                     f"oracle={p['oracle']['value']:.5f}")
    assert report(3, ok, "; ".join(parts))


def test_criterion_4_feynman_kac(run):
    rec = run("c04_feynman_kac")
    c = checks_of(rec)["feynman_kac"]
    assert report(4, c["passed"], f"max_z={rec['payload']['diagnostics']['max_z']:.3f}")


def test_criterion_5_small_loop_moments(run):
    rec = run("c05_small_loop_moments")
    c = checks_of(rec)
    p = rec["payload"]
    ok = c["slope_moment_2"]["passed"] and c["slope_mean_defect"]["passed"]
    detail = (f"slope2={p['slope_moment_2']['value']:.3f} "
              f"slope_mean={p['slope_mean_defect']['value']:.3f}")
    assert report(5, ok, detail)


def test_criterion_6_levy_area(run):
    rec = run("c06_levy_area")
    ok = all(c["passed"] for c in rec["checks"])
    z = rec["payload"]["diagnostics"]
    assert report(6, ok, " ".join(f"{k}={v:.3f}" for k, v in z.items()))


def test_criterion_7_campbell(run):
    a, b = run("c07a_campbell_constant"), run("c07b_campbell_oscillatory")
    ok = a["status"] == "pass" and b["status"] == "pass"
    assert abs(a["payload"]["closed_form"]["value"] - math.exp(-1)) <= 1e-12
    assert report(7, ok, f"z_const={a['payload']['diagnostics']['z']:.3f} "
                         f"z_osc={b['payload']['diagnostics']['z']:.3f}")


def test_criterion_8_diamagnetic(run):
    ok = True
    parts = []
    for name in ("c01_abelian_det", "c02_su2_det", "c08_diamagnetic_flat"):
        c = checks_of(run(name))
        ok &= c["diamagnetic"]["passed"]
        parts.append(f"{name}={c['diamagnetic']['margin']:.4f}")
    strict = checks_of(run("c02_su2_det"))["diamagnetic_strict"]
    ok &= strict["passed"]
    parts.append(f"strict_margin={strict['margin']:.4f}")
    assert report(8, ok, " ".join(parts))


def test_criterion_9_symanzik(run):
    a, b = run("c09a_symanzik_k1"), run("c09b_symanzik_k2")
    ca = checks_of(a)
    ok = a["status"] == "pass" and b["status"] == "pass"
    ok &= any(k.startswith("weights_agree") for k in ca)
    sections = yaml.safe_load(open(CONFIGS / "c09a_symanzik_k1.yaml"))["params"]["sections"]
    band = max(abs(v) for s in sections for n in s["modes"] for v in n)
    ok &= band <= 3
    assert report(9, ok, f"z_k1={a['payload']['diagnostics']['z']:.3f} z_k2={b['payload']['diagnostics']['z']:.3f}")


def test_criterion_10_conformal(run):
    rec = run("c10_conformal")
    c = checks_of(rec)
    ok = c["cutoff_agreement"]["passed"] and c["pathwise_trace"]["passed"]
    assert report(10, ok, f"z={rec['payload']['diagnostics']['z']:.3f} "
                          f"trace_defect={rec['payload']['diagnostics']['pathwise_trace_defect']:.2e}")


def _property_suite_seconds():
    if conftest.DURATIONS:
        return sum(conftest.DURATIONS.values()), "in-session"
    files = [str(ROOT / "tests" / f"{m}.py") for m in conftest.PROPERTY_MODULES]
    start = time.monotonic()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.monotonic() - start
    return (elapsed if proc.returncode == 0 else math.inf), "subprocess"


# the literal diagonal bound t (2 pi t) p_t(x, x) <= 1 + 1e-6 on [1e-4, 1] is false on the
# unit torus (the ratio is 2 pi at t = 1); the check is run as stated and fails
@pytest.mark.xfail(strict=True, reason="literal diagonal-control bound is unattainable; see decisions ledger")
def test_criterion_11_property_suites(run):
    rec = run("c11_kernel")
    c = checks_of(rec)
    secs, how = _property_suite_seconds()
    failed = [k for k, v in c.items() if not v["passed"]]
    ok = not failed and secs <= 300
    detail = f"kernel_failed={failed or 'none'} property_suite={secs:.1f}s ({how})"
    assert report(11, ok, detail)
