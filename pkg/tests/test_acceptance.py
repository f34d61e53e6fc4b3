"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible
without ``-s``) and then asserts the same condition.  Flow runs are cached
for the module so criteria 6, 7, 9 and 10 share them.

Runtime is roughly half an hour; deselect with ``-m "not slow"``.
"""
import json
import math
import time

import numpy as np
import pytest

from reifenberg.align import AngleSchedule, terminal_regions
from reifenberg.cli import EXIT_FAIL, main
from reifenberg.cone_model import (
    alpha,
    catalog_reference,
    check_non_flat,
    project_to_branch,
    validate_complex_cone,
)
from reifenberg.flow import (
    FlowConfig,
    holder_exponent,
    run_flow,
    skeleton_compatibility,
    tangential_singular_values,
    verify_theorem,
)
from reifenberg.harness import PerturbationField, RunConfig, generate, perturb, sample_cone
from reifenberg.metric import PointCloud, check_three_set, d_xr, default_constants, type_separation
from reifenberg.strata import recovery_rate, shuffled, stratify, validate_structure

from conftest import random_rotation
from test_align import conforming_probes
from test_cone_model import brute_force_branch
from test_metric import _small_rotation, plane_cloud

pytestmark = pytest.mark.slow

CATALOG = ("plane(2)", "Y_times(1)", "T_set")
FLOW_CONES = ("Y_times(1)", "T_set")
EPS_LADDER = (0.02, 0.01, 0.005)
DENSITY = 4000.0
K_MAX = 4
# displacement constant of the theorem check; fixed before any run and logged
C_DISP = 3.0


@pytest.fixture
def say(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


_RUNS = {}


def flow_run(cone, eps):
    """Cached ``(E, W, stack, monitors)`` for a perturbed catalog cone."""
    key = (cone, eps)
    if key not in _RUNS:
        E, W = generate(RunConfig(cone=cone, density=DENSITY, eps=eps, seed=0, field_seed=1))
        stack, mon = run_flow(W, E, E.truth.labels, config=FlowConfig(k_max=K_MAX))
        _RUNS[key] = (E, W, stack, mon)
    return _RUNS[key]


def theorem_tolerances(eps, h):
    tol_disp = C_DISP * eps if eps > 0 else 1e-6 + 3 * h
    return {"tol_disp": tol_disp, "tol_cov": C_DISP * eps + 3 * h}


# ----------------------------------------------------------------------------
# 1-4: geometry and metric
# ----------------------------------------------------------------------------


def test_criterion_1_cone_classifier(say):
    t = time.perf_counter()
    results = {}
    for name in CATALOG:
        W = catalog_reference(name)
        gens = [W.base.face_generators(X) for X in W.base.pieces]
        valid = True if all(len(g) == 0 for g in gens) else validate_complex_cone(gens).ok
        results[name] = valid and check_non_flat(W).ok
    flat = check_non_flat(catalog_reference("three_sector_plane"))
    secs = time.perf_counter() - t
    ok = all(results.values()) and not flat.ok and bool(flat.failures) and secs < 1.0
    say(1, ok, f"catalog={results} three_sector_plane_non_flat={flat.ok} seconds={secs:.3f}")
    assert ok


def test_criterion_2_projection_oracle(say):
    rng = np.random.default_rng(2)
    cones = [catalog_reference(n).with_pose(random_rotation(rng), rng.normal(size=3) * 0.3) for n in CATALOG]
    cases = []
    for _ in range(1000):
        W = cones[rng.integers(3)]
        t = int(rng.integers(W.m, W.n + 1))
        br = W.branches(t)
        cases.append((br[rng.integers(len(br))], W.vertex + rng.normal(size=3)))
    t0 = time.perf_counter()
    got = [project_to_branch(b, p) for b, p in cases]
    secs = time.perf_counter() - t0
    worst = 0.0
    for (b, p), (q, d) in zip(cases, got):
        qb, db = brute_force_branch(b, p)
        worst = max(worst, abs(d - db), float(np.linalg.norm(q - qb)))
    ok = worst <= 1e-6 and secs < 10.0
    say(2, ok, f"instances=1000 max_error={worst:.2e} projection_seconds={secs:.3f}")
    assert ok


def test_criterion_3_metric_axioms(say):
    rng = np.random.default_rng(3)
    sym = 0.0
    cov = 0.0
    for _ in range(50):
        A = PointCloud(rng.normal(size=(200, 3)), 0.1)
        B = PointCloud(rng.normal(size=(150, 3)), 0.1)
        ball = (rng.normal(size=3) * 0.2, 1.5)
        sym = max(sym, abs(d_xr(A, B, ball) - d_xr(B, A, ball)))
        W1 = catalog_reference("Y_times(1)").with_pose(random_rotation(rng), rng.normal(size=3) * 0.1)
        W2 = catalog_reference("T_set").with_pose(random_rotation(rng), rng.normal(size=3) * 0.1)
        x = rng.normal(size=3) * 0.1
        lam = float(rng.uniform(0.25, 4.0))
        cov = max(cov, abs(d_xr(W1.scaled(lam), W2.scaled(lam), (lam * x, lam)) - d_xr(W1, W2, (x, 1.0))))
    h = 0.03
    margins = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        base = plane_cloud(0.0, h).points
        clouds = [PointCloud(base @ _small_rotation(r, 0.05).T + r.normal(size=3) * 0.02, h) for _ in range(3)]
        rep = check_three_set(*clouds, (np.zeros(3), 1.0), (np.zeros(3), 1.0), np.zeros(3), 0.5)
        margins.append(rep.margin if rep.ok else -abs(rep.margin))
    ok = sym == 0.0 and cov <= 1e-12 and min(margins) > 0
    say(3, ok, f"symmetry_gap={sym:.1e} scale_covariance_gap={cov:.1e} three_set_min_margin={min(margins):.4f}")
    assert ok


def test_criterion_4_type_separation(say):
    t = time.perf_counter()
    delta0, pairs = type_separation(budget=100, seed=0)
    secs = time.perf_counter() - t
    stored = default_constants()["delta0"]
    ok = delta0 > 0 and delta0 == pytest.approx(stored, rel=1e-6)
    say(4, ok, f"delta0={delta0:.4f} stored={stored:.4f} worst_pair={min(pairs, key=pairs.get)} "
               f"seconds={secs:.1f}")
    assert ok


# ----------------------------------------------------------------------------
# 5: blind stratification
# ----------------------------------------------------------------------------

STRAT_SCALES = [0.08, 0.04, 0.02]
STRAT_TAU = {0: 0.4, 1: 0.4, 2: 0.8}
_STRAT = {}


def stratified_patches(name):
    """Labels on patches of radius ``5h`` around six points per stratum of a perturbed cloud."""
    if name in _STRAT:
        return _STRAT[name]
    W = catalog_reference(name)
    E = sample_cone(W, np.zeros(3), 1.0, 20000.0, seed=1)
    fld = PerturbationField(3, 0.01, seed=3)
    fld.certify()
    E = perturb(E, fld)
    rng = np.random.default_rng(0)
    tl = E.truth.labels
    inner = np.nonzero(np.linalg.norm(E.points, axis=1) < 0.75)[0]
    centers = []
    for m in range(W.m, W.n + 1):
        cand = inner[tl[inner] == m]
        centers += list(rng.choice(cand, min(6, len(cand)), replace=False))
    sub = np.unique(np.concatenate([E.in_ball(E.points[i], 5 * E.h) for i in centers]))
    # the classifier sees the points only; truth is read afterwards for scoring
    blind = PointCloud(E.points, E.h)
    L = stratify(blind, STRAT_SCALES, STRAT_TAU, delta0=default_constants()["delta0"], indices=sub,
                 window=(np.zeros(3), 1.0))
    _STRAT[name] = (E, L)
    return E, L


@pytest.mark.parametrize("name", FLOW_CONES)
def test_criterion_5_stratification_recovery(name, say):
    E, L = stratified_patches(name)
    rate, n = recovery_rate(L, E.truth.labels, E.truth.spine_dist, E.h)
    rep = validate_structure(L, E)
    ok = rate >= 0.95 and rep.partition_ok and rep.closure_ok and rep.flatness_ok
    say(5, ok, f"[{name}] recovery={rate:.3f} over {n} points partition={rep.partition_ok} "
               f"closure={rep.closure_ok} flatness={rep.flatness_ok} margins={rep.flatness_margins}")
    assert ok


# ----------------------------------------------------------------------------
# 6-7: end-to-end flows
# ----------------------------------------------------------------------------


@pytest.mark.parametrize("cone", FLOW_CONES)
def test_criterion_6_exact_run(cone, say):
    E, W, stack, mon = flow_run(cone, 0.0)
    tol = theorem_tolerances(0.0, E.h)
    rep = verify_theorem(stack, W, E, tol)
    ok = rep.ok and rep.displacement <= 1e-6 + 3 * E.h
    say(6, ok, f"[{cone}] displacement={rep.displacement:.2e} coverage={max(rep.coverage_E_to_fZ, rep.coverage_fZ_to_E):.4f} "
               f"tol_cov={rep.tol_cov:.4f} h={E.h:.4f} checks={rep.checks}")
    assert ok


@pytest.mark.parametrize("cone", FLOW_CONES)
def test_criterion_7_perturbed_runs(cone, say):
    lines = []
    passes = True
    devs = []
    for eps in EPS_LADDER:
        E, W, stack, mon = flow_run(cone, eps)
        rep = verify_theorem(stack, W, E, theorem_tolerances(eps, E.h))
        lo, hi = holder_exponent(stack)
        dev = max(1.0 - lo, hi - 1.0)
        devs.append(dev)
        inside = 0.9 <= lo <= hi <= 1.1
        if eps == 0.01:
            passes &= rep.ok and inside
        lines.append(f"eps={eps}: verify={rep.ok} disp/eps={rep.displacement / eps:.2f} "
                     f"holder=[{lo:.4f},{hi:.4f}]")
    trend = all(a >= b for a, b in zip(devs, devs[1:]))
    ok = passes and trend and C_DISP < 50
    say(7, ok, f"[{cone}] C={C_DISP} " + "; ".join(lines) + f" monotone_trend={trend}")
    assert ok


# ----------------------------------------------------------------------------
# 8: word regions
# ----------------------------------------------------------------------------


@pytest.mark.parametrize("schedule", ["desk", "strict"])
def test_criterion_8_region_machinery(schedule, say):
    rng = np.random.default_rng(8)
    out = {}
    for name, u in (("T_set", 1), ("T_set", 2), ("Y_times(1)", 2)):
        W = catalog_reference(name)
        sch = AngleSchedule.named(schedule, alpha([catalog_reference("T_set")]), 3)
        P = conforming_probes(W, u, sch, 10_000, rng)
        covered = np.zeros(len(P), bool)
        for spec in terminal_regions(W, u, sch, 0.5):
            covered |= spec.contains(P)
        Q = rng.normal(size=(10_000, 3)) * rng.uniform(0.01, 2, size=(10_000, 1))
        by_word = {}
        for spec in terminal_regions(W, u, sch):
            by_word.setdefault(str(spec.word), []).append(spec.contains(Q))
        overlaps = int(sum((np.sum(m, axis=0) > 1).sum() for m in by_word.values()))
        out[f"{name}/u={u}"] = (int((~covered).sum()), overlaps)
    ok = all(miss == 0 and ov == 0 for miss, ov in out.values())
    say(8, ok, f"[{schedule}] (coverage misses, disjointness violations) per case: {out}")
    assert ok


# ----------------------------------------------------------------------------
# 9: monitors
# ----------------------------------------------------------------------------


@pytest.mark.parametrize("cone", FLOW_CONES)
def test_criterion_9_monitors(cone, say):
    E, W, stack, mon = flow_run(cone, 0.01)
    s = mon.summary
    ratios = {"ext": s["mean_ratio"]}
    ratios.update({m: s[f"f{m}_mean_ratio"] for m in stack.steps if s.get(f"f{m}_mean_ratio") is not None})
    skel = max(skeleton_compatibility(stack, m) for m in stack.steps)
    sv = min(float(tangential_singular_values(stack, m).min(initial=np.inf)) for m in stack.steps)
    ok = (all(r <= 0.7 for r in ratios.values()) and skel <= 1e-9 and sv >= 0.9 and bool(s["cauchy_ok"]))
    say(9, ok, f"[{cone}] mean_ratios={ {k: round(v, 3) for k, v in ratios.items()} } skeleton={skel:.1e} "
               f"min_tangential_sv={sv:.4f} cauchy_gap={s['cauchy_gap']:.2e} tail={s['tail_prediction']:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 10: negative controls
# ----------------------------------------------------------------------------


def test_criterion_10_negative_controls(say, tmp_path, capsys):
    results = {}
    # truncated stack: verify the first ambient step only
    E, W, stack, _ = flow_run("T_set", 0.01)
    run = tmp_path / "run"
    run.mkdir()
    stack.save(run / "stack.pkl")
    E.save(run / "cloud.csv")
    (run / "manifest.json").write_text(json.dumps({"run_config": {"tolerances": {"eps": 0.01, "C": C_DISP}}}))
    code = main(["verify", str(run), "--truncate", "1"])
    rep = json.loads((run / "verify_report_truncated_1.json").read_text())
    gap = max(rep["coverage_E_to_fZ"], rep["coverage_fZ_to_E"])
    results["truncated"] = (code == EXIT_FAIL and not rep["checks"]["coverage"],
                            f"exit={code} coverage_gap={gap:.4f} tol_cov={rep['tol_cov']:.4f}")
    # shuffled labels on the stratified patches of both clouds
    for name in FLOW_CONES:
        Es, L = stratified_patches(name)
        d = tmp_path / name
        d.mkdir()
        Es.save(d / "cloud.csv")
        L.save_csv(d / "labels.csv")
        (d / "cfg.json").write_text(json.dumps({"scales": STRAT_SCALES, "thresholds": STRAT_TAU}))
        code = main(["stratify", str(d / "cloud.csv"), "--labels", str(d / "labels.csv"), "--config",
                     str(d / "cfg.json"), "--shuffle", "0", "--out", str(d / "out")])
        srep = json.loads((d / "out" / "stratify_report.json").read_text())["structure"]
        results[f"shuffled[{name}]"] = (code == EXIT_FAIL and not srep["closure_ok"],
                                        f"exit={code} closure_ok={srep['closure_ok']} "
                                        f"closure_failures={len(srep['closure_failures'])} "
                                        f"partition_ok={srep['partition_ok']}")
    # flat counterexample cone
    code = main(["validate-cone", "three_sector_plane", "--out", str(tmp_path / "flat.json")])
    frep = json.loads((tmp_path / "flat.json").read_text())["non_flat"]
    results["three_sector_plane"] = (code == EXIT_FAIL and not frep["ok"],
                                     f"exit={code} failing_faces={len(frep['failures'])}")
    capsys.readouterr()
    ok = all(v[0] for v in results.values())
    say(10, ok, "; ".join(f"{k}: {'fails as expected' if v[0] else 'DID NOT FAIL'} ({v[1]})"
                          for k, v in results.items()))
    assert ok
