"""Normalized local Hausdorff distance, cone registration and flatness numbers.

``d_xr(F1, F2, ball)`` is the two-sided Hausdorff distance restricted to the
closed ball ``B(x, r)`` divided by ``r``.  Point clouds are treated as exact
finite sets; cones are evaluated exactly on the cloud side (nearest-point
projection) and through a grid of spacing ``h <= r/200`` on the cone side.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from scipy.linalg import expm

from .cone_model import ConeSet, catalog_reference, default_catalog
from .errors import EmptyIntersection, HypothesisFailed, NoTypeMModel


# ----------------------------------------------------------------------------
# data types
# ----------------------------------------------------------------------------


class PointCloud:
    """Sampled closed set with a KD-tree and a certified covering radius ``h``.

    Parameters
    ----------
    points : (M, N) array
    sampling_radius : float, optional
        Covering radius of the underlying set by the samples.  When omitted
        it is estimated as the largest nearest-neighbour distance (a lower
        bound, flagged by ``h_estimated``).
    """

    def __init__(self, points, sampling_radius=None):
        self.points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, float)))
        self.tree = cKDTree(self.points)
        self.h_estimated = sampling_radius is None
        if sampling_radius is None:
            if len(self.points) > 1:
                d, _ = self.tree.query(self.points, k=2)
                sampling_radius = float(d[:, 1].max())
            else:
                sampling_radius = 1.0
        if not sampling_radius > 0:
            raise ValueError("sampling radius must be positive")
        self.h = float(sampling_radius)

    @property
    def sampling_radius(self):
        return self.h

    @property
    def N(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)

    def in_ball(self, center, r):
        return np.asarray(self.tree.query_ball_point(np.asarray(center, float), r), dtype=np.int64)

    def nearest(self, q, upper=np.inf):
        d, i = self.tree.query(np.atleast_2d(q), distance_upper_bound=upper)
        return d, i

    def subset(self, idx):
        return PointCloud(self.points[idx], self.h)

    # --- io -----------------------------------------------------------------
    def save_csv(self, path):
        np.savetxt(path, self.points, delimiter=",", fmt="%.17g",
                   header=f"sampling_radius={self.h!r}", comments="# ")

    @classmethod
    def load_csv(cls, path):
        h = None
        with open(path) as fh:
            first = fh.readline()
        if first.startswith("#") and "sampling_radius=" in first:
            h = float(first.split("sampling_radius=")[1])
        pts = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls(pts, h)

    def save_ply(self, path):
        names = "xyzw"[: self.N]
        header = ["ply", "format binary_little_endian 1.0", f"comment sampling_radius {self.h!r}",
                  f"element vertex {len(self.points)}"]
        header += [f"property double {c}" for c in names]
        header.append("end_header")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(self.points.astype("<f8").tobytes())

    @classmethod
    def load_ply(cls, path):
        with open(path, "rb") as fh:
            h, nvert, nprop = None, 0, 0
            while True:
                line = fh.readline().decode("ascii").strip()
                if line.startswith("comment sampling_radius"):
                    h = float(line.split()[-1])
                elif line.startswith("element vertex"):
                    nvert = int(line.split()[-1])
                elif line.startswith("property"):
                    nprop += 1
                elif line == "end_header":
                    break
            data = np.frombuffer(fh.read(8 * nvert * nprop), dtype="<f8").reshape(nvert, nprop)
        return cls(data.copy(), h)

    @classmethod
    def load(cls, path):
        path = str(path)
        return cls.load_ply(path) if path.endswith(".ply") else cls.load_csv(path)

    def save(self, path):
        path = str(path)
        return self.save_ply(path) if path.endswith(".ply") else self.save_csv(path)


@dataclass
class BallSpec:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass
class Registration:
    model: ConeSet
    rotation: np.ndarray
    translation: np.ndarray
    score: float
    constrained: bool
    evaluations: int = 0
    history: list = field(default_factory=list)

    @property
    def cone(self):
        return self.model.with_pose(self.rotation, self.translation)


def _ball(ball, center=None, radius=None):
    if isinstance(ball, BallSpec):
        return ball.center, ball.radius
    if ball is None:
        return np.asarray(center, float), float(radius)
    c, r = ball
    return np.asarray(c, float), float(r)


# ----------------------------------------------------------------------------
# d_{x,r}
# ----------------------------------------------------------------------------


def _inside(P, window):
    c, R = window
    d = P - np.asarray(c, float)
    return np.einsum("ij,ij->i", d, d) <= R * R


def _restricted(F, x, r, hm, window=None):
    """Points of ``F & B(x, r)`` in normalized coordinates ``(y - x) / r``."""
    if isinstance(F, PointCloud):
        idx = F.in_ball(x, r)
        return (F.points[idx] - x) / r
    if isinstance(F, ConeSet):
        Wn = F.normalized(x, r)
        Y = Wn.densify(np.zeros(F.N), 1.0, hm)
        if window is not None:
            Y = Y[_inside(x + r * Y, window)]
        return Y
    raise TypeError(f"unsupported set type {type(F).__name__}")


def max_nn_dist(tree, Q, cap=np.inf, stride=16, _depth=0):
    """Exact ``max_q min(dist(q, tree data), cap)`` by branch and bound.

    Every ``stride``-th query is evaluated first; its maximum ``L`` is a lower
    bound.  A remaining query ``q`` with nearest coarse query ``c`` obeys
    ``dist(q) <= dist(c) + |q - c|`` and is skipped when that bound is below
    ``L``.  Large nearest-neighbour radii make KD-tree queries expensive, so
    this avoids most of them while returning the same value as a full scan.
    """
    n = len(Q)
    if n == 0:
        return 0.0
    ub = cap * (1 + 1e-12) if np.isfinite(cap) else np.inf
    if n <= 512 or _depth > 3:
        d, _ = tree.query(Q, distance_upper_bound=ub)
        return float(np.minimum(d, cap).max())
    Qc = Q[::stride]
    dc, _ = tree.query(Qc, distance_upper_bound=ub)
    dc = np.minimum(dc, cap)
    L = float(dc.max())
    off, par = cKDTree(Qc).query(Q)
    cand = np.nonzero(dc[par] + off > L)[0]
    if len(cand) == 0:
        return L
    if len(cand) > 0.25 * n:
        d, _ = tree.query(Q[cand], distance_upper_bound=ub)
        return max(L, float(np.minimum(d, cap).max()))
    return max(L, max_nn_dist(tree, Q[cand], cap, stride, _depth + 1))


def _max_dist_to(F, Y, x, r):
    """``max_y dist(y, F)`` in normalized units for normalized points ``Y``."""
    if len(Y) == 0:
        return 0.0
    if isinstance(F, PointCloud):
        # both sets lie in B(x, r), so the distance never exceeds 2r
        return max_nn_dist(F.tree, x + r * Y, 2.0 * r) / r
    return float(F.normalized(x, r).dist_spine(Y).max())


def _dist_to(F, Y, x, r):
    """``dist(y, F)`` in normalized units for normalized points ``Y``."""
    if len(Y) == 0:
        return np.zeros(0)
    if isinstance(F, PointCloud):
        # both sets lie in B(x, r), so the distance never exceeds 2r
        d, _ = F.tree.query(x + r * Y, distance_upper_bound=2.0 * r * (1 + 1e-12))
        return np.minimum(d, 2.0 * r) / r
    Wn = F.normalized(x, r)
    return Wn.dist_spine(Y)


def d_xr_terms(F1, F2, ball, h_model=None, window=None):
    """The two one-sided terms ``(sup_{F1 & B} dist(., F2), sup_{F2 & B} dist(., F1)) / r``."""
    x, r = _ball(ball)
    hm = (1.0 / 200.0) if h_model is None else h_model / r
    Y1 = _restricted(F1, x, r, hm, window)
    Y2 = _restricted(F2, x, r, hm, window)
    if len(Y1) == 0 or len(Y2) == 0:
        raise EmptyIntersection("a set misses the ball")
    t1 = _max_dist_to(F2, Y1, x, r)
    t2 = _max_dist_to(F1, Y2, x, r)
    return t1, t2


def d_xr(F1, F2, ball, h_model=None, window=None):
    """Normalized local Hausdorff distance ``d_{x,r}(F1, F2)``.

    Parameters
    ----------
    F1, F2 : PointCloud or ConeSet
    ball : BallSpec or (center, radius)
    h_model : float, optional
        Grid spacing used on cone arguments (default ``r / 200``).
    window : (center, radius), optional
        Data window: cone samples outside it are ignored (the cloud is only
        known inside its sampled region).

    Raises
    ------
    EmptyIntersection
        If either set misses the ball.
    """
    t1, t2 = d_xr_terms(F1, F2, ball, h_model, window)
    return max(t1, t2)


def sampling_slack(h, r):
    """Additive error budget ``2h/r`` of a sampled d_{x,r} estimate."""
    return 2.0 * h / r


@dataclass
class ThreeSetReport:
    ok: bool
    value: float
    bound: float
    margin: float
    eps1: float
    eps2: float


def check_three_set(F, G, H, ball1, ball2, z, rho, eps1=None, eps2=None, slack=0.0):
    """Check ``d_{z,rho}(F, H) < (eps1 r1 + eps2 r2) / rho``.

    ``eps1`` and ``eps2`` default to the measured ``d_{x,r1}(F, G)`` and
    ``d_{y,r2}(G, H)`` inflated by one part in ``1e9`` (strict inequality).

    Raises
    ------
    HypothesisFailed
        If the ball-inclusion preconditions or the ``eps`` bounds fail.
    """
    x, r1 = _ball(ball1)
    y, r2 = _ball(ball2)
    z = np.asarray(z, float)
    m1 = d_xr(F, G, (x, r1))
    m2 = d_xr(G, H, (y, r2))
    eps1 = m1 * (1 + 1e-9) + 1e-15 if eps1 is None else eps1
    eps2 = m2 * (1 + 1e-9) + 1e-15 if eps2 is None else eps2
    if not (m1 < eps1 and m2 < eps2):
        raise HypothesisFailed("measured distances exceed the supplied epsilons")
    if np.linalg.norm(z - y) + rho + eps1 * r1 > r2 or np.linalg.norm(z - x) + rho + eps2 * r2 > r1:
        raise HypothesisFailed("ball inclusion preconditions fail")
    val = d_xr(F, H, (z, rho))
    bound = (eps1 * r1 + eps2 * r2) / rho + slack
    return ThreeSetReport(ok=val < bound, value=val, bound=bound, margin=bound - val, eps1=eps1, eps2=eps2)


# ----------------------------------------------------------------------------
# registration
# ----------------------------------------------------------------------------


def random_rotation(N, rng):
    """Haar-distributed rotation from one ``(N, N)`` Gaussian draw."""
    A = rng.normal(size=(N, N))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def _skew(omega, N):
    S = np.zeros((N, N))
    iu = np.triu_indices(N, 1)
    S[iu] = omega
    return S - S.T


def _rot_from_params(omega, N):
    if N == 3:
        return Rotation.from_rotvec(np.asarray(omega, float)).as_matrix()
    return expm(_skew(omega, N))


def voxel_subsample(points, s):
    """One representative per cubic voxel of side ``s`` (first in input order)."""
    if len(points) == 0:
        return points
    keys = np.floor(points / s).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(idx)]


class _Objective:
    """d_{x,r}(E, R(M) + b) with a rotation-independent template of ``M``."""

    def __init__(self, model, E, x, r, constrained, hm_frac, subsample=False, window=None):
        self.model0 = model.with_pose(np.eye(model.N), np.zeros(model.N))
        self.E = E
        self.x = np.asarray(x, float)
        self.r = float(r)
        self.constrained = constrained
        idx = E.in_ball(self.x, self.r)
        if len(idx) == 0:
            raise EmptyIntersection("cloud misses the registration ball")
        self.pts = E.points[idx]
        if subsample:
            self.pts = voxel_subsample(self.pts, hm_frac * self.r)
        rad = self.r if constrained else 2.0 * self.r
        self.template = self.model0.densify(np.zeros(model.N), rad, hm_frac * self.r)
        self.window = window
        # template points lie in B(x, r) (B(x, 3r) unconstrained) and distances
        # are capped at 2r, so a local tree answers every query exactly
        reach = (3.0 if constrained else 5.0) * self.r
        self.tree = cKDTree(E.points[E.in_ball(self.x, reach)])
        self.nevals = 0

    def __call__(self, R, b):
        self.nevals += 1
        r = self.r
        pc = (self.pts - b) @ R
        t1 = float(self.model0.dist_spine(pc).max())
        if self.constrained:
            tpl = self.template
        else:
            c = (self.x - b) @ R
            tpl = self.template[np.einsum("ij,ij->i", self.template - c, self.template - c) <= r * r]
        if len(tpl) == 0:
            return 2.0
        W = tpl @ R.T + b
        if self.window is not None:
            W = W[_inside(W, self.window)]
        return max(t1, max_nn_dist(self.tree, W, 2.0 * r)) / r


def _refine(obj, R0, b0, constrained, maxfev, step):
    N = R0.shape[0]
    k = N * (N - 1) // 2
    dim = k + (0 if constrained else N)

    def unpack(v):
        R = R0 @ _rot_from_params(v[:k], N)
        b = b0 if constrained else b0 + obj.r * v[k:]
        return R, b

    def f(v):
        R, b = unpack(v)
        return obj(R, b)

    x0 = np.zeros(dim)
    simplex = np.vstack([x0] + [x0 + step * np.eye(dim)[i] for i in range(dim)])
    res = minimize(f, x0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "maxfev": maxfev, "xatol": 1e-4, "fatol": 1e-6})
    R, b = unpack(res.x)
    return R, b, float(res.fun)


def register_cone(model_class, E, ball, constrain_spine_through_center=True, budget=32, seed=0,
                  init=None, hm_frac=1.0 / 24.0, final_frac=1.0 / 60.0, maxfev=None, step=0.15,
                  window=None, stop_below=None, h_floor=0.0, refine_below=None):
    """Fit an isometric copy of ``model_class`` to ``E`` inside ``ball``.

    Seeded Haar rotations (prefix-consistent in ``budget``) are scored on a
    coarse template; every seed that improves the running minimum is refined
    by Nelder-Mead and re-scored on a finer template.  The reported score is
    the minimum over refined candidates, hence nonincreasing in ``budget``.

    Parameters
    ----------
    model_class : ConeSet
        Model class (its pose is ignored).
    E : PointCloud
    ball : BallSpec or (center, radius)
    constrain_spine_through_center : bool
        Place the vertex at the ball center so ``L^m`` passes through it.
    budget : int
        Number of random rotation seeds.
    init : list, optional
        Extra starts tried before the random seeds: rotations, or
        ``(rotation, translation)`` pairs (the translation is ignored when
        constrained).
    window : (center, radius), optional
        Data window passed to the objective.
    stop_below : float, optional
        Stop once a refined candidate scores below this value.
    refine_below : float, optional
        Only refine seeds whose coarse score is below this value; if none
        qualifies, only the best coarse pose is refined.
    h_floor : float
        Lower bound on the template spacing (no point in resolving the model
        much below the data's sampling radius).

    Returns
    -------
    Registration
    """
    x, r = _ball(ball)
    N = model_class.N
    rng = np.random.default_rng(seed)
    hm_frac = max(hm_frac, h_floor / r)
    final_frac = max(final_frac, h_floor / r)
    obj = _Objective(model_class, E, x, r, constrain_spine_through_center, hm_frac, True, window)
    fine = _Objective(model_class, E, x, r, constrain_spine_through_center, final_frac, False, window)
    cands = []
    for it in init or []:
        if isinstance(it, tuple):
            R0, b0 = it
            b0 = x if constrain_spine_through_center else np.asarray(b0, float)
        else:
            R0, b0 = it, x
        cands.append((np.asarray(R0, float), b0))
    cands += [(random_rotation(N, rng), x) for _ in range(int(budget))]
    if not cands:
        cands = [(np.eye(N), x)]
    maxfev = maxfev if maxfev is not None else 30 * (N * (N - 1) // 2 + (0 if constrain_spine_through_center else N))
    best = None
    running = math.inf
    history = []
    coarse_best = None
    for i, (R, b0) in enumerate(cands):
        s = obj(R, b0)
        if s < running:
            running = s
            coarse_best = (R, b0)
            if refine_below is not None and s >= refine_below:
                continue
            Rr, br, _ = _refine(obj, R, b0, constrain_spine_through_center, maxfev, step)
            sf = fine(Rr, br)
            history.append((i, s, sf))
            if best is None or sf < best[2]:
                best = (Rr, br, sf)
            if stop_below is not None and best[2] < stop_below:
                break
    if best is None:
        R, b0 = coarse_best
        Rr, br, _ = _refine(obj, R, b0, constrain_spine_through_center, maxfev, step)
        best = (Rr, br, fine(Rr, br))
    R, b, score = best
    return Registration(model=model_class, rotation=R, translation=b, score=score,
                        constrained=constrain_spine_through_center,
                        evaluations=obj.nevals + fine.nevals, history=history)


def pca_rotation(model_class, E, x, r):
    """Rotation aligning a plane class with the principal directions of ``E & B(x, r)``."""
    idx = E.in_ball(x, r)
    N = model_class.N
    if len(idx) < N:
        return np.eye(N)
    P = E.points[idx] - x
    _, _, Vt = np.linalg.svd(P - P.mean(0), full_matrices=True)
    R = Vt.T.copy()
    # canonical plane(d) spans the first d axes
    if np.linalg.det(R) < 0:
        R[:, -1] = -R[:, -1]
    return R


def a_m(E, ball, m, catalog=None, budget=16, seed=0, init=None, return_registration=False, **kw):
    """Flatness number ``a_m(x, r)``: best type-``m`` fit with ``L^m`` through ``x``.

    Raises
    ------
    NoTypeMModel
        If the catalog has no class of type ``m``.
    """
    x, r = _ball(ball)
    catalog = default_catalog(E.N) if catalog is None else catalog
    classes = [W for W in catalog if W.m == m]
    if not classes:
        raise NoTypeMModel(f"catalog has no type-{m} class")
    best = None
    for W in classes:
        ini = list(init or [])
        if W.base.dim == 0:
            ini = [pca_rotation(W, E, x, r)] + ini
        reg = register_cone(W, E, (x, r), True, budget, seed, init=ini, **kw)
        if best is None or reg.score < best.score:
            best = reg
    return (best.score, best) if return_registration else best.score


# ----------------------------------------------------------------------------
# empirical constants
# ----------------------------------------------------------------------------


def cone_cloud(W, center, radius, h):
    """Exact-cone point cloud on a grid of spacing ``h`` (covering radius ``h``)."""
    pts = W.densify(center, radius, h / math.sqrt(2.0) if W.n >= 2 else h)
    return PointCloud(pts, h)


def type_separation(catalog=None, budget=100, seed=0, h=0.02):
    """Measured ``delta_0``: smallest d_{0,1} between a catalog cone and a
    differently-typed class registered with its spine through the vertex.

    Returns ``(delta0, pairs)`` where ``pairs`` maps ``"A|B"`` to the score.
    """
    catalog = default_catalog(3) if catalog is None else catalog
    pairs = {}
    for A in catalog:
        E = cone_cloud(A, np.zeros(A.N), 1.3, h)
        for B in catalog:
            if B.m == A.m:
                continue
            reg = register_cone(B, E, (np.zeros(A.N), 1.0), True, budget, seed)
            pairs[f"{A.name}|{B.name}"] = reg.score
    return min(pairs.values()), pairs


def spine_distance_constant(W, tau=0.05, trials=100, seed=0, r=1.0):
    """Fitted ``K`` in ``dist(x, L^m(Z)) <= K tau r`` for perturbed copies ``Z``.

    ``W`` is placed with its vertex at ``x = 0``; ``Z`` is a random isometric
    copy within rotation angle and shift of order ``tau``.  Only trials with
    ``d_{x,r}(W, Z) < tau`` count.
    """
    rng = np.random.default_rng(seed)
    N = W.N
    x = np.zeros(N)
    K = 0.0
    used = 0
    k = N * (N - 1) // 2
    for _ in range(trials):
        omega = rng.normal(size=k)
        omega *= rng.uniform(0, tau) / max(np.linalg.norm(omega), 1e-12)
        shift = rng.normal(size=N)
        shift *= rng.uniform(0, tau) * r / max(np.linalg.norm(shift), 1e-12)
        Z = W.transformed(_rot_from_params(omega, N), shift)
        d = d_xr(W, Z, (x, r), h_model=r / 60.0)
        if d >= tau or d <= 0:
            continue
        used += 1
        K = max(K, float(Z.dist_spine(x, W.m)) / (d * r))
    return K, used


def empirical_constants(catalog=None, budget=100, seed=0, h=0.02):
    """The constants file contents: ``delta0``, ``n0`` proxy, ``alpha``, clearances."""
    from .cone_model import alpha as _alpha
    from .cone_model import clearance

    catalog = default_catalog(3) if catalog is None else catalog
    delta0, pairs = type_separation(catalog, budget, seed, h)
    Ks = {}
    for W in catalog:
        if W.m < W.n:
            Ks[W.name] = spine_distance_constant(W, tau=0.5 * delta0, trials=100, seed=seed)[0]
    K = max(Ks.values()) if Ks else 1.0
    return {
        "delta0": float(delta0),
        "delta0_pairs": {k: float(v) for k, v in pairs.items()},
        "n0": float(K / (1.0 + 1.0 / delta0)),
        "spine_constant_K": {k: float(v) for k, v in Ks.items()},
        "alpha": float(_alpha(catalog)),
        "clearance": {W.name: (None if math.isinf(clearance(W)) else float(clearance(W))) for W in catalog},
        "budget": budget,
        "seed": seed,
        "sampling_radius": h,
    }


def save_constants(consts, path):
    with open(path, "w") as fh:
        json.dump(consts, fh, indent=2, sort_keys=True)


def load_constants(path):
    with open(path) as fh:
        return json.load(fh)


def default_constants():
    """The stored constants shipped with the package (``delta0``, ``alpha``, clearances)."""
    import os

    return load_constants(os.path.join(os.path.dirname(__file__), "data", "constants.json"))
