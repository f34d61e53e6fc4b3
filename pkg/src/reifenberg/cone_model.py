"""Exact models of simple cones, complex cones and sets of type m.

Conventions
-----------
A :class:`ConeSet` is stored in *canonical* coordinates and mapped to the
ambient space by an isometry ``p = R @ q + b``.  In canonical coordinates the
base complex cone is spanned by unit ``directions`` and the product factor
``R^m`` is spanned by the orthonormal columns of ``product_basis``; the two
are orthogonal.  The spine ``L^t`` is the union over lattice faces ``Y`` with
``#Y = t - m`` of ``C(Y) x R^m``; each such face contributes one branch.

Nearest-point projections onto branches are exact: the kernel in
:mod:`reifenberg._backend` enumerates the faces of each simplicial cone.
"""
from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import (
    AffineDependence,
    DimensionMismatch,
    EmptyFamily,
    FaceContainment,
    TooCloseToLowerSpine,
    UnknownName,
)

TOL = 1e-9
UNIT_TOL = 1e-12


def _rows(p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p), single


def _orth_complement(vectors, N):
    """Orthonormal basis (columns) of the complement of ``span(vectors)``,
    obtained by Gram-Schmidt on the standard axes in order."""
    basis = [np.asarray(v, float) for v in vectors]
    out = []
    Q = np.zeros((N, 0))
    if basis:
        Q, _ = np.linalg.qr(np.array(basis).T)
        Q = Q[:, : np.linalg.matrix_rank(np.array(basis))]
    for i in range(N):
        e = np.zeros(N)
        e[i] = 1.0
        v = e - Q @ (Q.T @ e)
        for u in out:
            v = v - u * (u @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            out.append(v / nv)
    return np.array(out).T if out else np.zeros((N, 0))


def simplex_grid(k, res):
    """Barycentric grid on the (k-1)-simplex with ``res`` subdivisions."""
    if k == 0:
        return np.zeros((1, 0))
    if k == 1:
        return np.ones((1, 1))
    pts = []
    for c in itertools.product(range(res + 1), repeat=k - 1):
        s = sum(c)
        if s <= res:
            pts.append(list(c) + [res - s])
    return np.array(pts, dtype=float) / res


class PackedCones:
    """Face-enumeration tables for a list of simplicial cones (canonical frame)."""

    def __init__(self, gen_list, N):
        A_rows, G_rows, off, owner = [], [], [0], []
        for ci, G in enumerate(gen_list):
            G = np.asarray(G, float).reshape(-1, N)
            k = len(G)
            for size in range(k + 1):
                for S in itertools.combinations(range(k), size):
                    if size:
                        GS = G[list(S)]
                        AS = np.linalg.solve(GS @ GS.T, GS)
                        A_rows.append(AS)
                        G_rows.append(GS)
                    off.append(off[-1] + size)
                    owner.append(ci)
        self.N = N
        self.ncones = len(gen_list)
        self.A = np.ascontiguousarray(np.vstack(A_rows) if A_rows else np.zeros((0, N)))
        self.G = np.ascontiguousarray(np.vstack(G_rows) if G_rows else np.zeros((0, N)))
        self.sub_off = np.asarray(off, dtype=np.int64)
        self.owner = np.asarray(owner, dtype=np.int64)

    def project(self, pts, tol=TOL):
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
        if len(pts) == 0:
            return np.zeros((0, self.N)), np.zeros(0), np.zeros(0, dtype=np.int64)
        return _backend.project_union(pts, self.A, self.G, self.sub_off, self.owner, tol)


# ----------------------------------------------------------------------------
# simple cones and face lattices
# ----------------------------------------------------------------------------


class DirectionSet:
    """Unit vectors ``x_1..x_k`` with ``{0, x_1, ..., x_k}`` affinely independent."""

    def __init__(self, directions, N=None):
        D = np.asarray(directions, dtype=float)
        if D.size == 0:
            D = np.zeros((0, N if N is not None else 0))
        D = np.atleast_2d(D)
        norms = np.linalg.norm(D, axis=1)
        if np.any(norms < 1e-12):
            raise AffineDependence("zero generator")
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise AffineDependence("generators must be unit vectors")
        D = D / norms[:, None]
        if len(D) and np.linalg.matrix_rank(D, tol=1e-10) != len(D):
            raise AffineDependence("generators together with the origin are affinely dependent")
        self.directions = D

    def __len__(self):
        return len(self.directions)


class SimpleCone:
    """``C(X)``: nonnegative combinations of the generators in ``X``."""

    def __init__(self, generators, N=None):
        self.generators = DirectionSet(generators, N).directions
        self.N = self.generators.shape[1]
        self._packed = None

    @property
    def dimension(self):
        return len(self.generators)

    @property
    def packed(self):
        if self._packed is None:
            self._packed = PackedCones([self.generators], self.N)
        return self._packed

    def project(self, p):
        P, single = _rows(p)
        q, d2, _ = self.packed.project(P)
        d = np.sqrt(np.maximum(d2, 0.0))
        return (q[0], d[0]) if single else (q, d)

    def contains(self, p, tol=TOL):
        _, d = self.project(p)
        return d <= tol * np.maximum(1.0, np.linalg.norm(np.atleast_2d(p), axis=1).squeeze())

    def faces(self):
        k = self.dimension
        return [
            SimpleCone(self.generators[list(S)], self.N)
            for size in range(k + 1)
            for S in itertools.combinations(range(k), size)
        ]


class FaceLattice:
    """All subsets of the pieces' generator index sets, with containment."""

    def __init__(self, pieces):
        faces = set()
        for X in pieces:
            for size in range(len(X) + 1):
                for S in itertools.combinations(sorted(X), size):
                    faces.add(tuple(S))
        self.faces = sorted(faces, key=lambda f: (len(f), f))
        self.pieces = [tuple(sorted(X)) for X in pieces]

    def of_size(self, t):
        return [f for f in self.faces if len(f) == t]

    def superfaces(self, Y):
        Ys = set(Y)
        return [f for f in self.faces if Ys <= set(f)]

    def incidence(self):
        return {f: [g for g in self.faces if set(f) < set(g)] for f in self.faces}


class ComplexCone:
    """Union of equal-dimension simple cones over a shared direction table."""

    def __init__(self, directions, pieces, N=None):
        D = np.asarray(directions, float)
        if D.size == 0:
            D = np.zeros((0, N))
        self.directions = np.atleast_2d(D)
        self.N = self.directions.shape[1] if N is None else N
        self.pieces = [tuple(sorted(p)) for p in pieces]
        dims = {len(p) for p in self.pieces}
        if len(dims) != 1:
            raise DimensionMismatch("pieces of a complex cone must share one dimension")
        self.dim = dims.pop()
        self.lattice = FaceLattice(self.pieces)
        self._min_angle = None
        self._packs = {}

    def face_generators(self, Y):
        return self.directions[list(Y)] if len(Y) else np.zeros((0, self.N))

    def packed(self, faces):
        key = tuple(faces)
        if key not in self._packs:
            self._packs[key] = PackedCones([self.face_generators(Y) for Y in faces], self.N)
        return self._packs[key]

    @property
    def min_angle(self):
        if self._min_angle is None:
            self._min_angle = _cone_min_angle(self)
        return self._min_angle

    def simple_cones(self):
        return [SimpleCone(self.face_generators(X), self.N) for X in self.pieces]


@dataclass
class ValidationReport:
    ok: bool
    violations: list = field(default_factory=list)
    cone: ComplexCone | None = None
    checked_pairs: int = 0

    def to_json(self):
        return {
            "ok": bool(self.ok),
            "checked_pairs": self.checked_pairs,
            "violations": [
                {"pair": [list(map(int, a)), list(map(int, b))], "witness": list(map(float, w))}
                for a, b, w in self.violations
            ],
        }


def _dedupe_directions(pieces_arrays, N):
    dirs = []
    pieces = []
    for G in pieces_arrays:
        idx = []
        for v in G:
            for j, u in enumerate(dirs):
                if np.linalg.norm(u - v) < 1e-9:
                    idx.append(j)
                    break
            else:
                dirs.append(v)
                idx.append(len(dirs) - 1)
        pieces.append(tuple(sorted(idx)))
    D = np.array(dirs) if dirs else np.zeros((0, N))
    return D, pieces


def validate_complex_cone(pieces, tol=TOL, res=24, probes=400, seed=0):
    """Check that simple cones fit together as a complex cone.

    Parameters
    ----------
    pieces : list of SimpleCone or array-like
        Generators of each piece (ambient coordinates).
    tol : float
        Membership tolerance on unit-scale geometry.
    res, probes : int
        Barycentric grid resolution and number of random probes per piece.

    Returns
    -------
    ValidationReport
        ``violations`` lists ``(X, Y, witness)`` with a witness point of
        ``C(X) & C(Y)`` outside ``C(X & Y)``.
    """
    if len(pieces) == 0:
        raise DimensionMismatch("no pieces")
    arrays = []
    Ns = set()
    for P in pieces:
        if isinstance(P, SimpleCone):
            G, N = P.generators, P.N
        else:
            G = np.asarray(P, float)
            if G.ndim == 1 and G.size == 0:
                raise DimensionMismatch("bare empty piece needs an ambient dimension")
            G = np.atleast_2d(G)
            N = G.shape[1]
            G = DirectionSet(G, N).directions
        arrays.append(G)
        Ns.add(N)
    if len(Ns) != 1:
        raise DimensionMismatch("pieces live in different ambient dimensions")
    N = Ns.pop()
    if len({len(G) for G in arrays}) != 1:
        raise DimensionMismatch("pieces have different dimensions")
    D, idx = _dedupe_directions(arrays, N)
    violations = []
    if len(set(idx)) != len(idx):
        violations.append((idx[0], idx[0], np.zeros(N)))
    rng = np.random.default_rng(seed)
    cone = ComplexCone(D, sorted(set(idx)), N)
    k = cone.dim
    grid = simplex_grid(k, res) if k else np.zeros((1, 0))
    rnd = rng.dirichlet(np.ones(k), size=probes) if k else np.zeros((0, 0))
    bary = np.vstack([grid, rnd]) if k else grid
    checked = 0
    uniq = sorted(set(idx))
    for a, b in itertools.combinations(range(len(uniq)), 2):
        X, Y = uniq[a], uniq[b]
        checked += 1
        common = tuple(sorted(set(X) & set(Y)))
        packY = cone.packed([Y])
        packXY = cone.packed([common])
        packX = cone.packed([X])
        for src, pack_other in ((X, packY), (Y, packX)):
            pts = bary @ cone.face_generators(src) if k else np.zeros((1, N))
            nrm = np.linalg.norm(pts, axis=1)
            keep = nrm > 1e-12
            pts = pts[keep] / nrm[keep, None]
            if len(pts) == 0:
                continue
            _, d2o, _ = pack_other.project(pts)
            inside = np.sqrt(np.maximum(d2o, 0)) < tol
            if not np.any(inside):
                continue
            _, d2c, _ = packXY.project(pts[inside])
            bad = np.sqrt(np.maximum(d2c, 0)) > tol
            if np.any(bad):
                violations.append((X, Y, pts[inside][np.argmax(d2c)]))
                break
    ok = not violations
    return ValidationReport(ok=ok, violations=violations, cone=cone if ok else None, checked_pairs=checked)


# ----------------------------------------------------------------------------
# angles and the non-flat condition
# ----------------------------------------------------------------------------


def _face_samples(G, res):
    k = len(G)
    if k == 0:
        return np.zeros((0, G.shape[1]))
    pts = simplex_grid(k, res) @ G
    n = np.linalg.norm(pts, axis=1)
    return pts / n[:, None]


def _foot_directions(cone, F, Z, res):
    """Unit vectors ``f - z`` for samples ``f`` of ``C(F)`` off ``C(Z)``, bucketed
    by the face of ``C(Z)`` whose relative interior contains the foot ``z``."""
    f = _face_samples(cone.face_generators(F), res)
    GZ = cone.face_generators(Z)
    if len(Z) == 0:
        feet = np.zeros_like(f)
        supports = [()] * len(f)
    else:
        feet, _, _ = cone.packed([Z]).project(f)
        coef = np.linalg.lstsq(GZ.T, feet.T, rcond=None)[0].T
        supports = [tuple(np.asarray(Z)[c > 1e-9]) for c in coef]
    v = f - feet
    nv = np.linalg.norm(v, axis=1)
    keep = nv > 1e-9
    buckets = {}
    for i in np.nonzero(keep)[0]:
        buckets.setdefault(supports[i], []).append(v[i] / nv[i])
    return {s: np.array(vs) for s, vs in buckets.items()}


def angle_range(cone, F1, F2, samples=48):
    """Estimated inf and sup of the angle between two faces.

    The angle is measured at a common foot ``z`` in ``C(F1 & F2)`` of points
    ``f_j`` in ``C(F_j)`` whose nearest point on ``C(F1 & F2)`` is ``z``; when
    the faces share no generator the vertex is the origin.

    Parameters
    ----------
    cone : ComplexCone
    F1, F2 : tuple of int
        Faces given as indices into ``cone.directions``.
    samples : int
        Barycentric grid resolution on each face.

    Returns
    -------
    (float, float)
        ``(inf, sup)`` in radians.
    """
    F1, F2 = tuple(sorted(F1)), tuple(sorted(F2))
    if not F1 or not F2 or set(F1) <= set(F2) or set(F2) <= set(F1):
        raise FaceContainment(f"faces {F1} and {F2} must be nonempty and incomparable")
    Z = tuple(sorted(set(F1) & set(F2)))
    b1 = _foot_directions(cone, F1, Z, samples)
    b2 = _foot_directions(cone, F2, Z, samples)
    lo, hi = math.pi, 0.0
    for s, V1 in b1.items():
        if s not in b2:
            continue
        cos = np.clip(V1 @ b2[s].T, -1.0, 1.0)
        lo = min(lo, float(np.arccos(cos.max())))
        hi = max(hi, float(np.arccos(cos.min())))
    if hi < lo:  # no realizing pair found at this resolution
        return math.nan, math.nan
    return lo, hi


def _incomparable_pairs(faces):
    for F1, F2 in itertools.combinations(faces, 2):
        if not F1 or not F2:
            continue
        if set(F1) <= set(F2) or set(F2) <= set(F1):
            continue
        yield F1, F2


def _cone_min_angle(cone, samples=32):
    best = math.pi
    for F1, F2 in _incomparable_pairs(cone.lattice.faces):
        lo, _ = angle_range(cone, F1, F2, samples)
        if not math.isnan(lo):
            best = min(best, lo)
    return best


@dataclass
class NonFlatReport:
    ok: bool
    failures: list = field(default_factory=list)
    checked: int = 0
    max_sup: float = 0.0

    def to_json(self):
        return {
            "ok": bool(self.ok),
            "checked": self.checked,
            "max_sup_angle": self.max_sup,
            "failures": [
                {"Y": list(map(int, Y)), "Z1": list(map(int, a)), "Z2": list(map(int, b)), "sup_angle": s}
                for Y, a, b, s in self.failures
            ],
        }


def check_non_flat(cone, margin=1e-6, samples=32):
    """Check ``sup angle(Z1, Z2) < pi - margin`` for adjacent faces.

    Every face ``Y`` with ``#Y = t < dim`` and every pair of faces ``Z1, Z2``
    of size ``t + 1`` meeting exactly in ``Y`` is tested.
    """
    if isinstance(cone, ConeSet):
        cone = cone.base
    fails, checked, worst = [], 0, 0.0
    for t in range(cone.dim):
        upper = cone.lattice.of_size(t + 1)
        for Y in cone.lattice.of_size(t):
            around = [Z for Z in upper if set(Y) < set(Z)]
            for Z1, Z2 in itertools.combinations(around, 2):
                if set(Z1) & set(Z2) != set(Y):
                    continue
                checked += 1
                _, hi = angle_range(cone, Z1, Z2, samples)
                worst = max(worst, hi)
                if not hi < math.pi - margin:
                    fails.append((Y, Z1, Z2, hi))
    return NonFlatReport(ok=not fails, failures=fails, checked=checked, max_sup=worst)


def alpha(family):
    """Smallest face angle over a family of cones (``pi`` when no face pairs exist)."""
    family = list(family)
    if not family:
        raise EmptyFamily("alpha of an empty family")
    return min(W.base.min_angle if isinstance(W, ConeSet) else W.min_angle for W in family)


# ----------------------------------------------------------------------------
# sets of type m
# ----------------------------------------------------------------------------


@dataclass
class SpineBranch:
    """One face's contribution ``R(C(Y) x R^m) + b`` to the spine ``L^t``."""

    owner: "ConeSet"
    dim: int
    face: tuple
    index: int

    @property
    def plane(self):
        W = self.owner
        cols = [W.base.face_generators(self.face).T, W.product_basis]
        B = np.hstack(cols) if self.dim else np.zeros((W.N, 0))
        if B.shape[1]:
            B, _ = np.linalg.qr(B)
        return W.translation.copy(), W.rotation @ B

    def project(self, p):
        return project_to_branch(self, p)


def project_to_branch(branch, p):
    """Nearest point of a (closed convex) branch and the distance to it."""
    return branch.owner.project_branch(p, branch.dim, branch.index)


class ConeSet:
    """A set of type ``m``: ``R(T x R^m) + b`` with ``T`` a complex cone.

    Parameters
    ----------
    base : ComplexCone
        In canonical coordinates, orthogonal to ``product_basis``.
    product_dim : int
    rotation, translation : array-like
        The isometry; identity / origin by default.
    product_basis : (N, m) array, optional
        Orthonormal columns spanning the ``R^m`` factor.
    name : str, optional
        Catalog class name (used by registration).
    """

    def __init__(self, base, product_dim, rotation=None, translation=None, product_basis=None, name=None):
        self.base = base
        self.N = base.N
        self.m = int(product_dim)
        self.rotation = np.eye(self.N) if rotation is None else np.asarray(rotation, float).reshape(self.N, self.N)
        self.translation = np.zeros(self.N) if translation is None else np.asarray(translation, float).reshape(self.N)
        if product_basis is None:
            product_basis = _orth_complement(list(base.directions), self.N)[:, : self.m]
        self.product_basis = np.asarray(product_basis, float).reshape(self.N, self.m)
        self.name = name
        if np.abs(self.rotation @ self.rotation.T - np.eye(self.N)).max() > 1e-10:
            raise DimensionMismatch("rotation is not orthogonal")
        if self.product_basis.shape[1] != self.m:
            raise DimensionMismatch("product basis has the wrong number of columns")
        if len(base.directions) and self.m and np.abs(base.directions @ self.product_basis).max() > 1e-9:
            raise DimensionMismatch("product factor must be orthogonal to the base cone")
        if self.n > self.N:
            raise DimensionMismatch("set dimension exceeds ambient dimension")
        self._prodproj = self.product_basis @ self.product_basis.T

    # --- structure ---------------------------------------------------------
    @property
    def n(self):
        return self.m + self.base.dim

    @property
    def type_label(self):
        return self.m

    @property
    def ambient_dim(self):
        return self.N

    @property
    def vertex(self):
        return self.translation.copy()

    def faces_of_spine(self, t):
        if t < self.m or t > self.n:
            return []
        return self.base.lattice.of_size(t - self.m)

    def branches(self, t):
        return [SpineBranch(self, t, Y, i) for i, Y in enumerate(self.faces_of_spine(t))]

    # --- coordinates -------------------------------------------------------
    def to_canonical(self, p):
        return (np.atleast_2d(p) - self.translation) @ self.rotation

    def from_canonical(self, q):
        return np.atleast_2d(q) @ self.rotation.T + self.translation

    def _split(self, pc):
        prod = pc @ self._prodproj
        return prod, pc - prod

    # --- projections -------------------------------------------------------
    def project_spine(self, p, t=None):
        """Nearest point on ``L^t`` (``t=n`` by default): ``(q, dist, branch)``."""
        t = self.n if t is None else t
        P, single = _rows(p)
        faces = self.faces_of_spine(t)
        if not faces:
            q = np.full_like(P, np.nan)
            d = np.full(len(P), np.inf)
            w = np.full(len(P), -1, dtype=np.int64)
        else:
            pc = self.to_canonical(P)
            prod, perp = self._split(pc)
            qp, d2, w = self.base.packed(faces).project(perp)
            q = self.from_canonical(qp + prod)
            d = np.sqrt(np.maximum(d2, 0.0))
        if single:
            return q[0], d[0], int(w[0])
        return q, d, w

    def dist_spine(self, p, t=None):
        return self.project_spine(p, t)[1]

    def project(self, p):
        q, d, _ = self.project_spine(p)
        return q, d

    def project_branch(self, p, t, index):
        P, single = _rows(p)
        Y = self.faces_of_spine(t)[index]
        pc = self.to_canonical(P)
        prod, perp = self._split(pc)
        qp, d2, _ = self.base.packed([Y]).project(perp)
        q = self.from_canonical(qp + prod)
        d = np.sqrt(np.maximum(d2, 0.0))
        return (q[0], d[0]) if single else (q, d)

    def spine_planes(self, t):
        """Orthogonal projectors onto the affine planes of the branches of ``L^t``."""
        out = []
        for br in self.branches(t):
            b, B = br.plane
            out.append((b, B))
        return out

    # --- transforms ---------------------------------------------------------
    def transformed(self, R2, b2):
        R2 = np.asarray(R2, float)
        return ConeSet(self.base, self.m, R2 @ self.rotation, R2 @ self.translation + np.asarray(b2, float),
                       self.product_basis, self.name)

    def with_pose(self, rotation, translation):
        return ConeSet(self.base, self.m, rotation, translation, self.product_basis, self.name)

    def scaled(self, s, about=None):
        about = np.zeros(self.N) if about is None else np.asarray(about, float)
        return ConeSet(self.base, self.m, self.rotation, about + s * (self.translation - about),
                       self.product_basis, self.name)

    def normalized(self, x, r):
        """The cone ``(W - x) / r`` (used for scale-free computations)."""
        return ConeSet(self.base, self.m, self.rotation, (self.translation - np.asarray(x, float)) / r,
                       self.product_basis, self.name)

    # --- sampling -----------------------------------------------------------
    def densify(self, center, radius, h, include_spines=True, rng=None, return_branch=False):
        """Grid samples of ``W & B(center, radius)`` with spacing ``h``.

        Every branch of every spine (or only the top pieces) is gridded in its
        own plane, so lower strata are represented at their own resolution.
        With ``rng`` each branch grid gets a random offset.  With
        ``return_branch`` the spine dimension ``t`` and branch index of the
        generating branch are returned for every point.
        """
        center = np.asarray(center, float)
        out, tags = [], []
        tmin = self.m if include_spines else self.n
        for t in range(tmin, self.n + 1):
            for br in self.branches(t):
                off = None if rng is None else rng.uniform(0.0, h, size=t)
                P = self._grid_branch(br, center, radius, h, off)
                out.append(P)
                tags.append(np.tile([t, br.index], (len(P), 1)))
        pts = np.vstack(out) if out else np.zeros((0, self.N))
        if return_branch:
            tag = np.vstack(tags).astype(np.int64) if tags else np.zeros((0, 2), np.int64)
            return pts, tag
        return pts

    def _grid_branch(self, br, center, radius, h, offset=None):
        b, B = br.plane
        t = B.shape[1]
        c = B.T @ (center - b)
        foot = b + B @ c
        off = np.linalg.norm(center - foot)
        if off > radius:
            return np.zeros((0, self.N))
        rho = math.sqrt(max(radius * radius - off * off, 0.0))
        if t == 0:
            return b[None, :].copy() if np.linalg.norm(b - center) <= radius else np.zeros((0, self.N))
        n1 = int(math.ceil(rho / h)) + 1
        ax = np.arange(-n1, n1 + 1) * h
        grids = np.meshgrid(*([ax] * t), indexing="ij")
        loc = np.stack([g.ravel() for g in grids], axis=1)
        if offset is not None:
            loc = loc + np.asarray(offset, float)
        loc = loc[np.einsum("ij,ij->i", loc, loc) <= rho * rho + 1e-12]
        pts = foot + loc @ B.T
        # keep points inside the convex cone of the branch
        Y = br.face
        if len(Y):
            pc = self.to_canonical(pts)
            _, perp = self._split(pc)
            GY = self.base.face_generators(Y)
            coef = np.linalg.lstsq(GY.T, perp.T, rcond=None)[0].T
            pts = pts[np.all(coef >= -1e-12, axis=1)]
        return pts

    # --- io -----------------------------------------------------------------
    def to_json(self):
        return {
            "name": self.name,
            "ambient_dim": self.N,
            "product_dim": self.m,
            "generators": [self.base.face_generators(X).tolist() for X in self.base.pieces],
            "product_basis": self.product_basis.T.tolist(),
            "isometry": {"rotation": self.rotation.ravel().tolist(), "translation": self.translation.tolist()},
        }

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        N = int(obj["ambient_dim"])
        m = int(obj["product_dim"])
        gens = [np.asarray(g, float).reshape(-1, N) for g in obj["generators"]]
        if not gens:
            gens = [np.zeros((0, N))]
        if all(len(g) == 0 for g in gens):
            base = ComplexCone(np.zeros((0, N)), [()], N)
        else:
            rep = validate_complex_cone(gens)
            base = rep.cone if rep.ok else ComplexCone(*_dedupe_directions(gens, N), N)
        iso = obj.get("isometry", {}) or {}
        R = np.asarray(iso.get("rotation", np.eye(N)), float).reshape(N, N)
        b = np.asarray(iso.get("translation", np.zeros(N)), float).reshape(N)
        P = obj.get("product_basis")
        P = None if P is None else np.asarray(P, float).reshape(m, N).T
        return cls(base, m, R, b, P, obj.get("name"))

    def __repr__(self):
        return f"ConeSet(name={self.name!r}, N={self.N}, m={self.m}, n={self.n})"


# ----------------------------------------------------------------------------
# blow-ups, type peeling and clearance constants
# ----------------------------------------------------------------------------


def clearance(W):
    """Clearance multiplier ``lambda(W)`` = 1 / sin(alpha) (inf when no face pairs exist).

    With ``dist(x, L^{t-1}) >= lambda r`` the ball ``B(x, r)`` meets only the
    branches that contain the face of ``x`` (branch separation)."""
    a = W.base.min_angle
    s = math.sin(a)
    if a >= math.pi - 1e-12 or s < 1e-12:
        return math.inf if W.base.dim > 0 and len(W.base.pieces) > 1 else 1.0
    return 1.0 / s


def locate(W, x, tol=1e-9):
    """Smallest ``t`` with ``x`` on ``L^t`` and the branch index there."""
    x = np.asarray(x, float)
    scale = max(1.0, float(np.linalg.norm(x - W.translation)))
    for t in range(W.m, W.n + 1):
        _, d, w = W.project_spine(x, t)
        if d <= tol * scale:
            return t, w
    return None, None


def tangent_cone(W, Y, x):
    """Type-``(m + #Y)`` cone tangent to ``W`` at a relative-interior point of face ``Y``."""
    base = W.base
    N = W.N
    GY = base.face_generators(Y)
    if len(Y):
        QY, _ = np.linalg.qr(GY.T)
    else:
        QY = np.zeros((N, 0))
    star = [X for X in base.pieces if set(Y) <= set(X)]
    arrays = []
    for X in star:
        rest = [j for j in X if j not in Y]
        G = base.face_generators(tuple(rest))
        G = G - (G @ QY) @ QY.T
        if len(G):
            G = G / np.linalg.norm(G, axis=1)[:, None]
        arrays.append(G if len(G) else np.zeros((0, N)))
    if all(len(g) == 0 for g in arrays):
        new_base = ComplexCone(np.zeros((0, N)), [()], N)
    else:
        D, pieces = _dedupe_directions(arrays, N)
        new_base = ComplexCone(D, sorted(set(pieces)), N)
    P = np.hstack([QY, W.product_basis])
    if P.shape[1]:
        P, _ = np.linalg.qr(P)
    return ConeSet(new_base, W.m + len(Y), W.rotation, np.asarray(x, float), P, None)


def blow_up(W, x, r, lam=None):
    """The cone over ``W & B(x, r) - x``, returned as a set of type ``t``.

    Raises
    ------
    TooCloseToLowerSpine
        If ``B(x, lam * r)`` meets ``L^{t-1}``.
    """
    t, w = locate(W, x)
    if t is None:
        raise TooCloseToLowerSpine("point is not on the set")
    lam = clearance(W) if lam is None else lam
    if t > W.m:
        d_low = W.dist_spine(x, t - 1)
        if not d_low >= lam * r:
            raise TooCloseToLowerSpine(f"dist to L^{t - 1} is {d_low:.3g} < {lam:.3g} * {r:.3g}")
    Y = W.faces_of_spine(t)[w]
    out = tangent_cone(W, Y, x)
    out.name = _class_name_guess(out)
    return out


def _is_planar(base, seed=0):
    """Whether the union of a complex cone's pieces is a linear subspace."""
    d = base.dim
    if d == 0:
        return True
    D = base.directions
    if np.linalg.matrix_rank(D, tol=1e-9) != d:
        return False
    Q, _ = np.linalg.qr(D.T)
    Q = Q[:, :d]
    rng = np.random.default_rng(seed)
    probes = rng.normal(size=(256, d)) @ Q.T
    probes = np.vstack([probes, -D])
    probes /= np.linalg.norm(probes, axis=1)[:, None]
    _, d2, _ = base.packed(base.pieces).project(probes)
    return bool(np.all(np.sqrt(d2) < 1e-7))


def intrinsic_type(W):
    """Peel planar strata: the smallest ``t`` carrying a non-planar tangent cone."""
    for t in range(W.m, W.n + 1):
        for Y in W.faces_of_spine(t):
            T = tangent_cone(W, Y, W.translation)
            if not _is_planar(T.base):
                return t
    return W.n


def _class_name_guess(W):
    """Recognize catalog classes up to isometry from the base cone's angles."""
    base = W.base
    if base.dim == 0:
        return f"plane({W.m})"
    D = base.directions
    G = D @ D.T
    off = G[~np.eye(len(D), dtype=bool)]
    if base.dim == 1 and len(D) == 3 and np.allclose(off, -0.5, atol=1e-9):
        return f"Y_times({W.m})"
    if base.dim == 2 and len(D) == 4 and len(base.pieces) == 6 and np.allclose(off, -1.0 / 3.0, atol=1e-9):
        return "T_set" if W.m == 0 else f"T_times({W.m})"
    return None


# ----------------------------------------------------------------------------
# catalog
# ----------------------------------------------------------------------------

_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3.0)


def _embed(vecs, N):
    V = np.zeros((len(vecs), N))
    if len(vecs):
        V[:, : np.asarray(vecs).shape[1]] = vecs
    return V


def _axes(start, count, N):
    P = np.zeros((N, count))
    for j in range(count):
        P[start + j, j] = 1.0
    return P


def _y_dirs():
    ang = 2 * math.pi * np.arange(3) / 3
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


CATALOG_NAMES = ("plane", "Y_times", "T_set", "simplex_cone", "three_sector_plane", "opposite_rays")


def catalog_reference(name, ambient_dim=3):
    """Exact reference cones.

    Accepted names: ``plane(d)``, ``Y_times(k)`` (a Y-set times ``R^k``),
    ``T_set`` (cone over the edges of a regular tetrahedron), ``T_times(k)``,
    ``simplex_cone(k)`` and the flat counterexamples ``three_sector_plane``
    and ``opposite_rays``.
    """
    N = int(ambient_dim)
    mt = re.fullmatch(r"\s*([A-Za-z_]+)\s*(?:\(\s*(\d+)\s*\))?\s*", str(name))
    if not mt:
        raise UnknownName(f"cannot parse cone name {name!r}")
    key, arg = mt.group(1), mt.group(2)
    arg = None if arg is None else int(arg)
    if key in ("plane",):
        d = N - 1 if arg is None else arg
        if d > N:
            raise DimensionMismatch("plane dimension exceeds ambient dimension")
        base = ComplexCone(np.zeros((0, N)), [()], N)
        return ConeSet(base, d, product_basis=_axes(0, d, N), name=f"plane({d})")
    if key in ("Y_times", "Y"):
        k = N - 2 if arg is None else arg
        if k + 2 > N:
            raise DimensionMismatch("Y_times needs 2 + k ambient dimensions")
        base = ComplexCone(_embed(_y_dirs(), N), [(0,), (1,), (2,)], N)
        return ConeSet(base, k, product_basis=_axes(2, k, N), name=f"Y_times({k})")
    if key in ("T_set", "T", "T_times"):
        k = 0 if arg is None else arg
        if key != "T_times":
            k = 0
        if 3 + k > N:
            raise DimensionMismatch("T_set needs 3 ambient dimensions")
        pieces = list(itertools.combinations(range(4), 2))
        base = ComplexCone(_embed(_TETRA, N), pieces, N)
        nm = "T_set" if k == 0 else f"T_times({k})"
        return ConeSet(base, k, product_basis=_axes(3, k, N), name=nm)
    if key == "simplex_cone":
        k = 2 if arg is None else arg
        if k > N:
            raise DimensionMismatch("simplex_cone(k) needs k <= ambient dimension")
        base = ComplexCone(np.eye(N)[:k], [tuple(range(k))], N)
        return ConeSet(base, 0, name=f"simplex_cone({k})")
    if key == "three_sector_plane":
        base = ComplexCone(_embed(_y_dirs(), N), [(0, 1), (1, 2), (0, 2)], N)
        return ConeSet(base, 0, name="three_sector_plane")
    if key == "opposite_rays":
        base = ComplexCone(np.array([[1.0] + [0.0] * (N - 1), [-1.0] + [0.0] * (N - 1)]), [(0,), (1,)], N)
        return ConeSet(base, 0, name="opposite_rays")
    raise UnknownName(f"unknown catalog cone {name!r}")


def default_catalog(ambient_dim=3):
    """The minimal-cone catalog used for registration: plane, Y-set product, T-set."""
    N = ambient_dim
    out = [catalog_reference(f"plane({N - 1})", N), catalog_reference(f"Y_times({N - 2})", N)]
    if N == 3:
        out.append(catalog_reference("T_set", 3))
    else:
        out.append(catalog_reference(f"T_times({N - 3})", N))
    return out


def load_cone(spec, ambient_dim=3):
    """A catalog name or a path / dict in the cone JSON format."""
    if isinstance(spec, ConeSet):
        return spec
    if isinstance(spec, dict):
        return ConeSet.from_json(spec)
    s = str(spec)
    if s.endswith(".json"):
        with open(s) as fh:
            return ConeSet.from_json(json.load(fh))
    return catalog_reference(s, ambient_dim)
