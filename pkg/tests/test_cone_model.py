import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls

from reifenberg.cone_model import (
    ComplexCone,
    ConeSet,
    SimpleCone,
    alpha,
    angle_range,
    blow_up,
    catalog_reference,
    check_non_flat,
    default_catalog,
    intrinsic_type,
    load_cone,
    locate,
    project_to_branch,
    tangent_cone,
    validate_complex_cone,
)
from reifenberg.errors import EmptyFamily, FaceContainment, TooCloseToLowerSpine, UnknownName

from conftest import random_rotation


def brute_force_branch(branch, p, levels=9, res=61):
    """Nearest point of ``b + B @ c`` with the cone coordinates of ``c`` nonnegative, by zoomed grids.

    The branch is written in its own coordinates: nonnegative weights on the
    face generators and free weights on the product directions.
    """
    W = branch.owner
    G = W.base.face_generators(branch.face)
    cols = [W.rotation @ g for g in G] + [W.rotation @ v for v in W.product_basis.T]
    A = np.array(cols).T if cols else np.zeros((W.N, 0))
    k = len(G)
    d = A.shape[1]
    b = W.translation
    if d == 0:
        return b, float(np.linalg.norm(p - b))
    scale = 2.0 * (np.linalg.norm(p - b) + 1.0)
    lo = np.array([0.0] * k + [-scale] * (d - k))
    hi = np.full(d, scale)
    best = None
    for _ in range(levels):
        axes = [np.linspace(lo[j], hi[j], res) for j in range(d)]
        C = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        X = b + C @ A.T
        dist = np.linalg.norm(X - p, axis=1)
        i = int(np.argmin(dist))
        best = (X[i], float(dist[i]))
        step = (hi - lo) / (res - 1)
        c = C[i]
        lo = c - 2 * step
        hi = c + 2 * step
        lo[:k] = np.maximum(lo[:k], 0.0)
    return best


class TestCatalog:
    def test_catalog_validates_and_is_non_flat(self):
        for W in default_catalog(3):
            gens = [W.base.face_generators(X) for X in W.base.pieces]
            if any(len(g) for g in gens):
                assert validate_complex_cone(gens).ok
            assert check_non_flat(W).ok

    def test_three_sector_plane_is_flat(self):
        rep = check_non_flat(catalog_reference("three_sector_plane"))
        assert not rep.ok
        assert any(abs(f[3] - math.pi) < 1e-6 for f in rep.failures)

    def test_opposite_rays_fail_with_sup_pi(self):
        rep = check_non_flat(catalog_reference("opposite_rays"))
        assert not rep.ok
        assert rep.max_sup == pytest.approx(math.pi, abs=1e-9)

    def test_types_and_spines(self):
        P = catalog_reference("plane(2)")
        assert (P.m, P.n) == (2, 2)
        Y = catalog_reference("Y_times(1)")
        assert (Y.m, Y.n) == (1, 2)
        # L^1 of Y x R is the axis line
        assert Y.dist_spine(np.array([0.0, 0.0, 3.0]), 1) == pytest.approx(0.0, abs=1e-12)
        assert Y.dist_spine(np.array([1.0, 0.0, 0.0]), 1) == pytest.approx(1.0)
        T = catalog_reference("T_set")
        assert T.m == 0 and len(T.branches(1)) == 4 and len(T.branches(2)) == 6
        # the four rays point to the vertices of a regular tetrahedron
        D = T.base.directions
        off = (D @ D.T)[~np.eye(4, dtype=bool)]
        assert np.allclose(off, -1.0 / 3.0)

    def test_unknown_name(self):
        with pytest.raises(UnknownName):
            catalog_reference("pentagon")

    def test_json_roundtrip(self, rng):
        T = catalog_reference("T_set").with_pose(random_rotation(rng), rng.normal(size=3))
        T2 = load_cone(T.to_json())
        P = rng.normal(size=(50, 3))
        assert np.allclose(T.project(P)[0], T2.project(P)[0], atol=1e-12)


class TestValidation:
    def test_y_generators_pass(self):
        ang = 2 * np.pi * np.arange(3) / 3
        rays = [np.array([[math.cos(a), math.sin(a), 0.0]]) for a in ang]
        assert validate_complex_cone(rays).ok

    def test_single_simple_cone_passes(self):
        assert validate_complex_cone([np.eye(3)[:2]]).ok

    def test_sectors_sharing_unlisted_ray_fail(self):
        e1, e2, e3 = np.eye(3)
        m = (e1 + e2) / np.linalg.norm(e1 + e2)
        rep = validate_complex_cone([np.array([e1, e2]), np.array([m, e3])])
        assert not rep.ok
        assert rep.violations
        # the witness lies in both sectors (nonnegative least squares residual ~ 0)
        w = np.array(rep.violations[0][2])
        assert nnls(np.array([e1, e2]).T, w)[1] < 1e-6
        assert nnls(np.array([m, e3]).T, w)[1] < 1e-6


class TestAngles:
    def test_two_rays(self):
        u = np.array([1.0, 0, 0])
        v = np.array([math.cos(1.0), math.sin(1.0), 0])
        C = ComplexCone(np.array([u, v]), [(0,), (1,)], 3)
        lo, hi = angle_range(C, (0,), (1,))
        assert lo == pytest.approx(1.0, abs=1e-9) and hi == pytest.approx(1.0, abs=1e-9)

    def test_y_rays_120(self):
        Y = catalog_reference("Y_times(1)").base
        lo, hi = angle_range(Y, (0,), (1,))
        assert lo == pytest.approx(2 * math.pi / 3) and hi == pytest.approx(2 * math.pi / 3)

    @pytest.mark.parametrize("phi", [0.7, 1.3, 2.2])
    def test_half_planes_dihedral(self, phi):
        e3 = np.array([0.0, 0, 1])
        a = np.array([1.0, 0, 0])
        b = np.array([math.cos(phi), math.sin(phi), 0])
        C = ComplexCone(np.array([e3, a, b]), [(0, 1), (0, 2)], 3)
        lo, hi = angle_range(C, (0, 1), (0, 2), samples=64)
        assert lo == pytest.approx(phi, abs=1e-6)
        assert hi == pytest.approx(phi, abs=1e-6)

    def test_comparable_faces_raise(self):
        Y = catalog_reference("T_set").base
        with pytest.raises(FaceContainment):
            angle_range(Y, (0,), (0, 1))

    def test_alpha_values(self):
        assert alpha([catalog_reference("plane(2)")]) == pytest.approx(math.pi)
        assert alpha([catalog_reference("Y_times(1)")]) == pytest.approx(2 * math.pi / 3)

    def test_alpha_tetrahedral_by_enumeration(self):
        """Independent enumeration: angles between rays and dihedral angles along each ray."""
        T = catalog_reference("T_set")
        D = T.base.directions
        cand = [math.acos(np.clip(D[i] @ D[j], -1, 1)) for i in range(4) for j in range(i + 1, 4)]
        # dihedral angle between two sectors sharing ray i, measured orthogonally to the ray
        for i in range(4):
            others = [j for j in range(4) if j != i]
            perp = [D[j] - (D[j] @ D[i]) * D[i] for j in others]
            perp = [v / np.linalg.norm(v) for v in perp]
            cand += [math.acos(np.clip(perp[a] @ perp[b], -1, 1)) for a in range(3) for b in range(a + 1, 3)]
        assert alpha([T]) == pytest.approx(min(cand), abs=1e-6)
        assert alpha([T]) == pytest.approx(math.acos(-1.0 / 3.0), abs=1e-6)

    def test_alpha_empty(self):
        with pytest.raises(EmptyFamily):
            alpha([])


class TestProjection:
    def test_on_branch_is_fixed(self):
        T = catalog_reference("T_set")
        p = 0.3 * T.base.directions[0] + 0.5 * T.base.directions[1]
        q, d = T.project(p)
        assert np.allclose(q, p) and d == pytest.approx(0.0, abs=1e-12)

    def test_ray(self):
        C = SimpleCone(np.array([[1.0, 0, 0]]))
        q, d = C.project(np.array([1.0, 1.0, 0.0]))
        assert np.allclose(q, [1, 0, 0]) and d == pytest.approx(1.0)

    def test_random_sectors_match_nnls(self, rng):
        for _ in range(200):
            G = rng.normal(size=(2, 3))
            G /= np.linalg.norm(G, axis=1)[:, None]
            if abs(G[0] @ G[1]) > 0.99:
                continue
            p = rng.normal(size=3) * 2
            q, d = SimpleCone(G).project(p)
            lam, res = nnls(G.T, p)
            assert d == pytest.approx(res, abs=1e-9)
            assert np.allclose(q, G.T @ lam, atol=1e-9)

    def test_branch_projection_matches_grid(self, rng):
        cones = [catalog_reference(n).with_pose(random_rotation(rng), rng.normal(size=3) * 0.3)
                 for n in ("T_set", "Y_times(1)", "plane(2)")]
        for _ in range(60):
            W = cones[rng.integers(3)]
            t = int(rng.integers(W.m, W.n + 1))
            br = W.branches(t)
            b = br[rng.integers(len(br))]
            p = W.vertex + rng.normal(size=3)
            q, d = project_to_branch(b, p)
            qb, db = brute_force_branch(b, p)
            assert d == pytest.approx(db, abs=1e-6)
            assert np.linalg.norm(q - qb) < 1e-5

    @given(st.integers(0, 2 ** 31 - 1))
    def test_projection_idempotent_and_nonexpansive(self, seed):
        r = np.random.default_rng(seed)
        W = catalog_reference("T_set").with_pose(random_rotation(r), r.normal(size=3))
        P = W.vertex + r.normal(size=(20, 3))
        Q, D = W.project(P)
        Q2, D2 = W.project(Q)
        assert np.allclose(Q2, Q, atol=1e-10) and np.all(D2 < 1e-10)
        # distance to the union is at most the distance to any sampled point of the set
        S = W.densify(W.vertex, 2.0, 0.2)
        far = np.linalg.norm(P[:, None, :] - S[None], axis=2).min(axis=1)
        assert np.all(D <= far + 1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_isometry_equivariance(self, seed):
        r = np.random.default_rng(seed)
        W = catalog_reference("Y_times(1)")
        R, b = random_rotation(r), r.normal(size=3)
        W2 = W.transformed(R, b)
        P = r.normal(size=(30, 3))
        q1, d1 = W.project(P)
        q2, d2 = W2.project(P @ R.T + b)
        assert np.allclose(d1, d2, atol=1e-10)
        assert np.allclose(q1 @ R.T + b, q2, atol=1e-10)


class TestTangentCones:
    def test_vertex_of_type0(self):
        T = catalog_reference("T_set")
        tc = tangent_cone(T, (), T.vertex)
        P = np.random.default_rng(0).normal(size=(40, 3))
        assert np.allclose(tc.project(P)[1], T.project(P)[1])

    def test_edge_of_T_is_Y_times_R(self):
        T = catalog_reference("T_set")
        x = 0.5 * T.base.directions[0]
        W = blow_up(T, x, 0.05)
        assert W.m == 1 and W.name == "Y_times(1)"
        assert intrinsic_type(W) == 1

    def test_wing_of_Y_is_plane(self):
        Y = catalog_reference("Y_times(1)")
        x = 0.5 * Y.base.directions[1] + np.array([0, 0, 0.2])
        W = blow_up(Y, x, 0.05)
        assert W.m == 2 and W.base.dim == 0
        P = x + np.random.default_rng(1).normal(size=(30, 3)) * 0.05
        assert np.allclose(W.project(P)[1], Y.project(P)[1], atol=1e-12)

    def test_too_close_to_lower_spine(self):
        Y = catalog_reference("Y_times(1)")
        with pytest.raises(TooCloseToLowerSpine):
            blow_up(Y, 0.01 * Y.base.directions[0], 0.5)

    def test_locate(self):
        T = catalog_reference("T_set")
        assert locate(T, np.zeros(3))[0] == 0
        assert locate(T, 0.3 * T.base.directions[2])[0] == 1
        assert locate(T, np.array([5.0, 5.0, -5.0]))[0] is None


def test_coneset_rejects_non_orthogonal_rotation():
    from reifenberg.errors import DimensionMismatch

    with pytest.raises(DimensionMismatch):
        ConeSet(catalog_reference("T_set").base, 0, rotation=np.diag([1.0, 2.0, 1.0]))
