import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reifenberg.cone_model import catalog_reference
from reifenberg.cover import (
    Cover,
    PartitionOfUnity,
    RadiusSchedule,
    bump,
    build_cover,
    check_cover,
    enlargement,
    smoothstep5,
    weights,
)
from reifenberg.errors import EmptyStratumLadder
from reifenberg.harness import sample_cone


@pytest.fixture(scope="module")
def yr_cover():
    E = sample_cone(catalog_reference("Y_times(1)"), np.zeros(3), 1.0, 3000.0, seed=0)
    lab = E.truth.labels
    sch = RadiusSchedule(0.2, 0.5)
    return E, lab, build_cover(lab, E, 1, sch)


class TestSchedule:
    def test_enlargement_values(self):
        # 2 - 1 / 2**(m - t + 1)
        assert enlargement(0, 1) == 1.75
        assert enlargement(0, 2) == 1.875
        assert enlargement(1, 2) == 1.75

    def test_schedule_halves_per_step(self):
        sch = RadiusSchedule(0.05, 0.5)
        for m in range(3):
            for k in range(5):
                assert sch(m, k + 1) == 0.5 * sch(m, k)
        assert sch(1, 0) < sch(0, 0)


class TestBuildCover:
    def test_singleton_vertex(self):
        P = np.array([[0.0, 0, 0], [0.5, 0, 0], [0.0, 0.5, 0]])
        lab = np.array([0, 1, 1])
        cov = build_cover(lab, P, 0, RadiusSchedule(0.3, 0.5))
        ids = cov.of_stratum(0)
        assert len(ids) == 1
        assert np.array_equal(cov.centers[ids[0]], np.zeros(3)) and cov.radii[ids[0]] == 0.3

    def test_line_net_spacing(self):
        t = np.arange(0, 2.0, 0.001)
        P = np.column_stack([t, 0 * t, 0 * t])
        r = 0.05
        cov = build_cover(np.ones(len(P), int), P, 0, RadiusSchedule(r / 0.5, 0.5))
        gaps = np.diff(np.sort(cov.centers[:, 0]))
        assert gaps.min() >= r * (1 - 1e-9) and gaps.max() <= 2 * r

    def test_deterministic(self, yr_cover):
        E, lab, cov = yr_cover
        again = build_cover(lab, E, 1, cov.schedule)
        assert np.array_equal(cov.centers, again.centers)

    def test_Y_times_R_invariants(self, yr_cover):
        E, lab, cov = yr_cover
        assert len(cov.of_stratum(1)) > 0 and len(cov.of_stratum(2)) > 0
        # stratum-1 centers are on the axis
        assert np.all(E.truth.spine_dist[cov.point_index[cov.of_stratum(1)], 1] <= 1e-12)
        assert cov.exclusions
        rep = check_cover(cov, lab, E)
        assert rep.separation_ok and rep.coverage_ok and rep.overlap_ok
        # stratum-2 centers never sit inside the enlarged axis balls
        ax = cov.of_stratum(1)
        for i in cov.of_stratum(2):
            d = np.linalg.norm(cov.centers[ax] - cov.centers[i], axis=1)
            assert np.all(d >= enlargement(1, 2) * cov.radii[ax] * (1 - 1e-12))

    def test_empty(self):
        with pytest.raises(EmptyStratumLadder):
            build_cover(np.full(5, -1), np.zeros((5, 3)), 0)

    def test_truncated_cover_loses_coverage(self, yr_cover):
        E, lab, cov = yr_cover
        rep = check_cover(cov.truncated(np.arange(len(cov) // 2)), lab, E)
        assert not rep.coverage_ok and rep.uncovered

    def test_json_roundtrip(self, yr_cover):
        _, _, cov = yr_cover
        back = Cover.from_json(cov.to_json())
        assert np.array_equal(back.centers, cov.centers) and np.array_equal(back.strata, cov.strata)


class TestPartitionOfUnity:
    def test_profile(self):
        assert smoothstep5(0.0) == 0.0 and smoothstep5(1.0) == 1.0 and smoothstep5(0.5) == 0.5
        assert bump(1.5) == 1.0 and bump(3.0) == 0.0

    def test_midpoint_weights(self):
        cov = Cover(0, np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([0.4, 0.4]), np.array([2, 2]),
                    np.array([0, 1]))
        w = dict(weights(PartitionOfUnity(cov), [0.5, 0, 0]))
        assert w[0] == pytest.approx(0.5, abs=1e-15) and w[1] == pytest.approx(0.5, abs=1e-15)

    def test_single_ball(self):
        cov = Cover(0, np.zeros((1, 3)), np.array([0.1]), np.array([2]), np.array([0]))
        pou = PartitionOfUnity(cov)
        assert weights(pou, [0.25, 0, 0]) == [(0, 1.0)]
        assert weights(pou, [0.31, 0, 0]) == []

    @given(st.integers(0, 2 ** 31 - 1))
    def test_sums_to_one(self, seed):
        r = np.random.default_rng(seed)
        C = r.uniform(-1, 1, size=(30, 3))
        cov = Cover(0, C, r.uniform(0.1, 0.3, 30), np.full(30, 2), np.arange(30))
        pou = PartitionOfUnity(cov)
        X = C[r.integers(0, 30, 50)] + r.normal(size=(50, 3)) * 0.1
        M = pou.matrix(X)
        assert np.all(M.data >= 0)
        # rows sum to one wherever some ball's bump reaches, zero elsewhere
        reached = (np.linalg.norm(X[:, None] - C[None], axis=2) < 3 * cov.radii[None]).any(1)
        assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), reached.astype(float), atol=1e-12)

    def test_random_points_in_Y_cover(self, yr_cover, rng):
        E, lab, cov = yr_cover
        pou = PartitionOfUnity(cov)
        X = E.points[rng.choice(len(E), 1000, replace=False)]
        M = pou.matrix(X).tocsr()
        s = np.asarray(M.sum(axis=1)).ravel()
        assert np.all(np.abs(s - 1) <= 1e-9)
        assert np.diff(M.indptr).max() <= 7 ** 3

    def test_gradient_bound(self, yr_cover, rng):
        E, lab, cov = yr_cover
        pou = PartitionOfUnity(cov)
        i = int(cov.of_stratum(2)[0])
        X = cov.centers[i] + rng.uniform(-3, 3, size=(200, 3)) * cov.radii[i]
        G = pou.gradients(X, i)
        # the normalized bump changes by at most O(1) over a distance comparable to r_min
        C1 = np.linalg.norm(G, axis=1).max() * cov.radii.min()
        assert math.isfinite(C1) and C1 < 20.0
