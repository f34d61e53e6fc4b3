import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reifenberg.cone_model import catalog_reference
from reifenberg.errors import DensityTooLow, FieldNotCertified
from reifenberg.harness import (
    GroundTruth,
    PerturbationField,
    RunConfig,
    branch_counts,
    generate,
    hypothesis_audit,
    perturb,
    sample_cone,
    truth_labels,
)


class TestSampling:
    def test_plane_count_and_spacing(self):
        P = catalog_reference("plane(2)")
        d = 2000.0
        E = sample_cone(P, np.zeros(3), 2.0, d, seed=0)
        assert len(E) == pytest.approx(math.pi * 4 * d, rel=0.02)
        s = d ** -0.5
        assert E.grid_spacing == pytest.approx(s)
        # interior covering radius of a square grid is s / sqrt(2); the clipped boundary circle and
        # the certificate's probe-grid term push the certified value to about s
        assert E.h >= s / math.sqrt(2) - 1e-9
        assert E.h == pytest.approx(s, rel=0.15)

    def test_axis_sampled_at_line_rate(self):
        Y = catalog_reference("Y_times(1)")
        E = sample_cone(Y, np.zeros(3), 1.0, 4000.0, seed=1)
        n_axis = int((E.truth.labels == 1).sum())
        s = 4000.0 ** -0.5
        assert n_axis == pytest.approx(2.0 / s, abs=2)

    def test_T_set_sector_counts_equal(self):
        T = catalog_reference("T_set")
        E = sample_cone(T, np.zeros(3), 1.0, 6000.0, seed=2)
        c = branch_counts(T, E)
        assert len(c) == 6
        # the six sectors are congruent, so each carries one sixth of the top-stratum samples
        assert np.all(np.abs(c / c.mean() - 1.0) < 0.05)

    def test_truth_labels(self):
        T = catalog_reference("T_set")
        P = np.array([[0.0, 0, 0], 0.4 * T.base.directions[1], 0.3 * (T.base.directions[0] + T.base.directions[2])])
        lab, D = truth_labels(T, P)
        assert lab.tolist() == [0, 1, 2]
        assert D.shape == (3, 3)

    def test_density_too_low(self):
        with pytest.raises(DensityTooLow):
            sample_cone(catalog_reference("plane(2)"), np.zeros(3), 1.0, 10.0)

    def test_truth_roundtrip(self, tmp_path):
        Y = catalog_reference("Y_times(1)")
        E = sample_cone(Y, np.zeros(3), 1.0, 1500.0, seed=3)
        E.truth.save(tmp_path / "t.csv")
        G = GroundTruth.load(tmp_path / "t.csv", Y)
        assert np.array_equal(G.labels, E.truth.labels)
        assert np.allclose(G.preimage, E.truth.preimage)


class TestPerturbation:
    def test_zero_eps_identity(self):
        E = sample_cone(catalog_reference("plane(2)"), np.zeros(3), 1.0, 1500.0)
        f = PerturbationField(3, 0.0, seed=1)
        f.certify()
        assert np.array_equal(perturb(E, f).points, E.points)

    def test_plane_displacement_bound(self):
        E = sample_cone(catalog_reference("plane(2)"), np.zeros(3), 1.0, 3000.0)
        f = PerturbationField(3, 0.01, seed=2)
        assert f.certify().ok
        F = perturb(E, f)
        assert np.linalg.norm(F.points - E.points, axis=1).max() <= 0.01

    def test_uncertified_rejected(self):
        E = sample_cone(catalog_reference("plane(2)"), np.zeros(3), 1.0, 1500.0)
        with pytest.raises(FieldNotCertified):
            perturb(E, PerturbationField(3, 0.01, seed=2))

    @given(st.integers(0, 10_000), st.sampled_from([0.005, 0.01, 0.05]))
    def test_certified_bounds(self, seed, eps):
        f = PerturbationField(3, eps, seed=seed, calib_probes=4000)
        rep = f.certify(probes=2000)
        assert rep.sup_disp <= eps * (1 + 1e-7) and rep.sup_jac <= eps * (1 + 1e-7)

    def test_jacobian_matches_finite_differences(self, rng):
        f = PerturbationField(3, 0.02, seed=5)
        X = rng.normal(size=(20, 3))
        J = f.jacobian(X)
        step = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = step
            fd = (f.displacement(X + e) - f.displacement(X - e)) / (2 * step)
            assert np.allclose(J[:, :, k], fd, atol=1e-8)

    def test_audit_on_perturbed_T(self):
        cfg = RunConfig(cone="T_set", density=5000, eps=0.01, seed=0, field_seed=1)
        E, W = generate(cfg)
        rep = hypothesis_audit(E, W, E.truth.field, trials=20, seed=0)
        measured = max(rec["d"] - rec["slack"] for rec in rep.records)
        assert rep.ok
        assert measured <= 0.015


class TestRunConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig(cone="T_set", eps=0.02, seed=4)
        p = tmp_path / "c.json"
        import json

        p.write_text(json.dumps(cfg.to_json()))
        assert RunConfig.load(p) == cfg

    def test_generate_is_reproducible(self):
        cfg = RunConfig(cone="Y_times(1)", density=1500, eps=0.01, seed=2, field_seed=3)
        A, _ = generate(cfg)
        B, _ = generate(cfg)
        assert np.array_equal(A.points, B.points)
