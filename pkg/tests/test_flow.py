import json

import numpy as np
import pytest

from reifenberg.align import IdentityMap, PlaneProjection
from reifenberg.cone_model import catalog_reference
from reifenberg.cover import Cover, PartitionOfUnity
from reifenberg.errors import InsufficientRange, MonitorHardFail, OutOfDomain
from reifenberg.flow import (
    FlowConfig,
    MapStack,
    MonitorReport,
    cauchy_report,
    evaluate_f,
    g_step,
    holder_exponent,
    run_flow,
    skeleton_compatibility,
    tangential_singular_values,
    verify_theorem,
)
from reifenberg.harness import RunConfig, generate


def one_ball(center, r):
    return Cover(0, np.atleast_2d(np.asarray(center, float)), np.array([r]), np.array([2]), np.array([0]))


@pytest.fixture(scope="module")
def runs():
    out = {}
    for eps in (0.0, 0.01):
        E, W = generate(RunConfig(cone="Y_times(1)", density=1500, eps=eps, seed=0, field_seed=1))
        stack, mon = run_flow(W, E, E.truth.labels, config=FlowConfig(k_max=1, probes=100))
        out[eps] = (E, W, stack, mon)
    return out


class TestGStep:
    def test_outside_all_balls(self):
        pou = PartitionOfUnity(one_ball([0, 0, 0], 0.1))
        p = np.array([[1.0, 0.5, 0.2]])
        assert np.array_equal(g_step(pou, {0: PlaneProjection(np.zeros(3), np.eye(3)[:, :2])}, p), p)

    def test_single_ball_is_projection(self):
        pou = PartitionOfUnity(one_ball([0, 0, 0], 0.1))
        proj = PlaneProjection(np.zeros(3), np.eye(3)[:, :2])
        p = np.array([[0.05, -0.02, 0.03]])
        assert np.allclose(g_step(pou, {0: proj}, p), [[0.05, -0.02, 0.0]], atol=1e-15)

    def test_overlap_within_discrepancy(self, rng):
        cov = Cover(0, np.array([[0.0, 0, 0], [0.15, 0, 0]]), np.array([0.1, 0.1]), np.array([2, 2]),
                    np.array([0, 1]))
        pou = PartitionOfUnity(cov)
        a = PlaneProjection(np.zeros(3), np.eye(3)[:, :2])
        b = PlaneProjection(np.array([0, 0, 0.001]), np.eye(3)[:, :2])
        X = np.column_stack([rng.uniform(0, 0.15, 100), rng.uniform(-0.05, 0.05, 100), rng.normal(size=100) * 0.01])
        G = g_step(pou, {0: a, 1: b}, X)
        gap = np.linalg.norm(a(X) - b(X), axis=1)
        assert np.all(np.linalg.norm(G - a(X), axis=1) <= gap + 1e-15)


class TestMonitors:
    def test_jsonl(self, tmp_path):
        mon = MonitorReport()
        mon.add(kind="step", m=2, k=0, displacement=np.float64(0.1), branch_counts={1: 3})
        mon.summary["x"] = np.arange(2)
        mon.to_jsonl(tmp_path / "m.jsonl")
        lines = [json.loads(s) for s in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert lines[0]["displacement"] == 0.1 and lines[0]["branch_counts"] == {"1": 3}
        assert lines[-1]["kind"] == "summary" and lines[-1]["x"] == [0, 1]

    def test_caps(self):
        mon = MonitorReport()
        mon.check_cap("skeleton", 0.5, {"skeleton": 0.1}, hard=False)
        assert mon.violations == [{"monitor": "skeleton", "value": 0.5, "cap": 0.1}]
        with pytest.raises(MonitorHardFail):
            mon.check_cap("skeleton", 0.5, {"skeleton": 0.1}, hard=True)
        mon.check_cap("skeleton", 0.05, {"skeleton": 0.1}, hard=True)

    def test_cauchy_on_geometric_sequence(self):
        rep = cauchy_report([0.1 * 0.5 ** k for k in range(5)])
        assert rep["cauchy_ok"]

    def test_config_roundtrip(self):
        cfg = FlowConfig(k_max=2, angles="strict", caps={"skeleton": 1e-9})
        assert FlowConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


class TestRun:
    def test_exact_cone_is_identity(self, runs):
        E, W, stack, mon = runs[0.0]
        X = stack.samples[np.linalg.norm(stack.samples, axis=1) < 0.9]
        assert np.abs(stack.apply_ext(X) - X).max() <= 1e-6
        assert max(mon.summary["ext_displacements"]) <= 1e-6

    def test_perturbed_displacement(self, runs):
        E, W, stack, mon = runs[0.01]
        rep = verify_theorem(stack, W, E, {"tol_disp": 3 * 0.01, "tol_cov": 0.01 + 3 * E.h, "probes": 300,
                                           "sphere_probes": 300})
        assert rep.ok, rep.to_json()
        assert 0 < rep.displacement <= 0.03

    def test_evaluate_matches_composition(self, runs, rng):
        E, W, stack, _ = runs[0.01]
        P = rng.normal(size=(20, 3)) * 0.2
        manual = P.copy()
        for s in stack.ext:
            manual = g_step(stack.pous[s.cover_index], s.psis, manual)
        assert np.allclose(evaluate_f(stack, P), manual, atol=1e-12)
        assert np.allclose(evaluate_f(stack, P[0]), manual[0], atol=1e-12)
        # f through k+1 steps is g_k applied to f through k steps
        for k, s in enumerate(stack.ext):
            prev = evaluate_f(stack, P, upto=k)
            nxt = evaluate_f(stack, P, upto=k + 1)
            assert np.allclose(g_step(stack.pous[s.cover_index], s.psis, prev), nxt, atol=1e-12)

    def test_out_of_domain(self, runs):
        _, _, stack, _ = runs[0.0]
        c, R = stack.domain
        with pytest.raises(OutOfDomain):
            evaluate_f(stack, np.asarray(c) + np.array([2 * R, 0, 0]))

    def test_skeleton_and_tangential(self, runs):
        _, _, stack, _ = runs[0.01]
        assert skeleton_compatibility(stack, 2) <= 1e-9
        sv = tangential_singular_values(stack, 2, probes=60)
        assert np.min(sv) >= 0.9

    def test_truncated_is_identity(self, runs, rng):
        _, _, stack, _ = runs[0.01]
        P = rng.normal(size=(10, 3)) * 0.2
        assert np.array_equal(stack.truncated(0).apply_ext(P), P)

    def test_save_load(self, runs, tmp_path, rng):
        _, _, stack, _ = runs[0.01]
        stack.save(tmp_path / "s.pkl")
        back = MapStack.load(tmp_path / "s.pkl")
        P = rng.normal(size=(10, 3)) * 0.2
        assert np.array_equal(back.apply_ext(P), stack.apply_ext(P))


class TestHolder:
    def test_identity(self):
        Y = catalog_reference("Y_times(1)")
        lo, hi = holder_exponent(None, domain=(np.zeros(3), 1.0), n_pairs=1500, f=lambda X: X, Z=Y)
        assert lo == pytest.approx(1.0, abs=0.01) and hi == pytest.approx(1.0, abs=0.01)

    def test_linear_map(self, rng):
        Q1, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        Q2, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        A = Q1 @ np.diag([0.9, 1.0, 1.1]) @ Q2
        lo, hi = holder_exponent(None, domain=(np.zeros(3), 1.0), n_pairs=3000, f=lambda X: X @ A.T,
                                 Z=catalog_reference("T_set"))
        assert lo == pytest.approx(1.0, abs=0.02) and hi == pytest.approx(1.0, abs=0.02)

    def test_insufficient_range(self):
        with pytest.raises(InsufficientRange):
            holder_exponent(None, domain=(np.zeros(3), 1.0), n_pairs=100, f=lambda X: X,
                            Z=catalog_reference("plane(2)"), d_lo=0.1, d_hi=0.2)


def test_identity_stack_maps():
    cov = one_ball([0, 0, 0], 0.1)
    pou = PartitionOfUnity(cov)
    p = np.array([[0.01, 0.02, 0.03]])
    assert np.array_equal(g_step(pou, {0: IdentityMap()}, p), p)
