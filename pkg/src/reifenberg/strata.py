"""Stratification of a sampled set by persistent smallness of the flatness numbers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cone_model import default_catalog
from .errors import HypothesisFailed, ScaleLadderTooShort
from .metric import _inside, max_nn_dist, register_cone

UNRESOLVED = -1


# ----------------------------------------------------------------------------
# labels
# ----------------------------------------------------------------------------


@dataclass
class StratumLabels:
    """Per-point stratum labels with the flatness record behind them.

    Attributes
    ----------
    labels : (M,) int array
        Stratum index, or ``UNRESOLVED`` (-1) for points that did not qualify
        or were not classified.
    j0 : (M,) int array
        Coarsest rung from which the winning ``a_m`` stays below threshold
        down to the finest rung (-1 when unresolved).
    a_values : (M, n + 1, J) array
        Measured ``a_m(x, r_j)``; NaN where not evaluated (pruned by type
        separation or not needed).
    classified : (M,) bool array
        Points that went through classification.
    """

    labels: np.ndarray
    j0: np.ndarray
    a_values: np.ndarray
    classified: np.ndarray
    scales: list
    thresholds: dict
    persistence: int
    n: int
    meta: dict = field(default_factory=dict)

    def indices(self, m):
        return np.nonzero(self.labels == m)[0]

    def counts(self):
        out = {int(m): int((self.labels == m).sum()) for m in range(self.n + 1)}
        out["unresolved"] = int((self.classified & (self.labels == UNRESOLVED)).sum())
        return out

    @property
    def finest(self):
        return float(self.scales[-1])

    def save_csv(self, path):
        idx = np.nonzero(self.classified)[0]
        J = len(self.scales)
        cols = ["point_index", "label", "j0"] + [f"a{m}_r{j}" for m in range(self.n + 1) for j in range(J)]
        A = self.a_values[idx].reshape(len(idx), -1)
        data = np.column_stack([idx, self.labels[idx], self.j0[idx], A])
        fmt = ["%d", "%d", "%d"] + ["%.10g"] * A.shape[1]
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt=fmt)

    def with_labels(self, labels):
        return StratumLabels(np.asarray(labels).copy(), self.j0.copy(), self.a_values, self.classified.copy(),
                             self.scales, self.thresholds, self.persistence, self.n, dict(self.meta))

    def to_json(self):
        return {"counts": self.counts(), "scales": [float(s) for s in self.scales],
                "thresholds": {str(k): float(v) for k, v in self.thresholds.items()},
                "persistence": self.persistence, "meta": self.meta}


# ----------------------------------------------------------------------------
# flatness numbers
# ----------------------------------------------------------------------------


def dyadic_ladder(r_max, count):
    """``[r_max, r_max/2, ..., r_max/2^(count-1)]``."""
    return [float(r_max) * 2.0 ** (-j) for j in range(int(count))]


def default_thresholds(ms, h, r_min, delta0):
    """``tau_m = max(10 * 2h / r_min, delta0 / 2)`` for every type ``m``."""
    tau = max(10.0 * 2.0 * h / r_min, 0.5 * delta0)
    return {int(m): tau for m in ms}


def _disk_grid(d, hm):
    n1 = int(math.ceil(1.0 / hm))
    ax = np.arange(-n1, n1 + 1) * hm
    G = np.stack([g.ravel() for g in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
    return G[np.einsum("ij,ij->i", G, G) <= 1.0 + 1e-12]


def plane_score(E, x, r, d, hm_frac=1.0 / 24.0, window=None, grid=None):
    """Best ``d``-plane through ``x`` by principal directions, scored by ``d_{x,r}``.

    Returns ``(score, basis)``; the score is an upper bound for ``a_d`` when
    the catalog's type-``d`` class is a plane.
    """
    idx = E.in_ball(x, r)
    if len(idx) == 0:
        return math.inf, None
    P = E.points[idx] - x
    _, V = np.linalg.eigh(P.T @ P)
    B = V[:, ::-1][:, :d]
    res = P - (P @ B) @ B.T
    t1 = float(np.sqrt(np.einsum("ij,ij->i", res, res).max()))
    G = _disk_grid(d, hm_frac) if grid is None else grid
    W = x + r * (G @ B.T)
    if window is not None:
        W = W[_inside(W, window)]
    t2 = max_nn_dist(E.tree, W, 2.0 * r)
    return max(t1, t2) / r, B


def _rotation_to_plane(W, B):
    """Rotation carrying the product factor of plane class ``W`` onto ``span(B)``."""
    N = W.N

    def complete(A):
        Q, _ = np.linalg.qr(np.column_stack([A, np.eye(N)]))
        Q = Q[:, :N]
        Q[:, : A.shape[1]] = A
        return Q

    R = complete(B) @ complete(W.product_basis).T
    if np.linalg.det(R) < 0:
        R = complete(B) @ np.diag([1.0] * (N - 1) + [-1.0]) @ complete(W.product_basis).T
    return R


class _WarmStarts:
    """Poses of recent successful registrations, keyed by (class, rung)."""

    def __init__(self, keep=64):
        self.keep = keep
        self.store = {}

    def add(self, key, x, R):
        lst = self.store.setdefault(key, [])
        lst.append((np.asarray(x, float), R))
        if len(lst) > self.keep:
            del lst[0]

    def near(self, key, x, radius, k=2):
        lst = self.store.get(key, [])
        if not lst:
            return []
        d = np.array([np.linalg.norm(p - x) for p, _ in lst])
        order = [i for i in np.argsort(d, kind="stable")[:k] if d[i] <= radius]
        return [lst[i][1] for i in order]


def a_profile(E, x, scales, m, classes, budget=4, seed=0, window=None, warm=None, stop_below=None,
              hm_frac=1.0 / 16.0, final_frac=1.0 / 24.0, maxfev=45):
    """``a_m(x, r_j)`` for each rung ``j`` (min over the type-``m`` classes)."""
    out = np.full(len(scales), np.nan)
    for j, r in enumerate(scales):
        best = math.inf
        for ci, W in classes:
            if W.base.dim == 0:
                s, _ = plane_score(E, x, r, W.n, max(hm_frac, 0.5 * E.h / r), window)
            else:
                init = warm.near((ci, j), x, 2 * r) if warm is not None else []
                reg = register_cone(W, E, (x, r), True, budget, seed, init=init, hm_frac=hm_frac,
                                    final_frac=final_frac, maxfev=maxfev, window=window,
                                    stop_below=stop_below, h_floor=0.5 * E.h,
                                    refine_below=None if stop_below is None else 3.0 * stop_below)
                s = reg.score
                if warm is not None and stop_below is not None and s < 2 * stop_below:
                    warm.add((ci, j), x, reg.rotation)
            best = min(best, s)
        out[j] = best
    return out


# ----------------------------------------------------------------------------
# stratify
# ----------------------------------------------------------------------------


def separation_floor(a, delta0):
    """Lower bound on ``a_m(x, r)`` given ``a_{m'}(x, r) = a`` for another type.

    Both models have their spines through ``x`` and are ``delta0`` apart at
    every scale.  The three-set inequality on ``B(x, r(1 - max))`` gives
    ``delta0 (1 - max(a, a_m)) <= a + a_m``; solving for ``a_m`` in both
    orderings yields the bound.
    """
    return min((delta0 - a) / (1.0 + delta0), (1.0 - a) * delta0 - a)



def stratify(E, scales, thresholds=None, catalog=None, budget=8, seed=0, persistence=3, delta0=None,
             indices=None, window=None, hm_frac=1.0 / 16.0, final_frac=1.0 / 24.0, maxfev=45):
    """Label each point with the smallest type whose flatness number persists.

    Point ``x`` receives the smallest ``m`` with ``a_m(x, r_j) < tau_m`` on the
    ``persistence`` finest rungs.  With a measured type separation ``delta0``
    the lower types are pruned rung by rung using :func:`separation_floor`.

    Parameters
    ----------
    E : PointCloud
    scales : sequence of float
        Strictly decreasing rung radii (at least 3).
    thresholds : dict, optional
        ``tau_m`` per type; defaults to :func:`default_thresholds`.
    catalog : list of ConeSet, optional
    delta0 : float, optional
        Type separation used for pruning (and for the default thresholds).
    indices : array of int, optional
        Classify only these points; the rest stay ``UNRESOLVED``.
    window : (center, radius), optional
        Region where the data is known (model samples outside are ignored).

    Returns
    -------
    StratumLabels

    Raises
    ------
    ScaleLadderTooShort
    """
    scales = [float(s) for s in scales]
    if len(scales) < 3 or len(scales) < persistence:
        raise ScaleLadderTooShort("need at least 3 rungs and at least `persistence` rungs")
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ScaleLadderTooShort("scales must be strictly decreasing")
    catalog = default_catalog(E.N) if catalog is None else catalog
    ms = sorted({W.m for W in catalog})
    n = max(W.n for W in catalog)
    if thresholds is None:
        thresholds = default_thresholds(ms, E.h, scales[-1], 0.0 if delta0 is None else delta0)
    thresholds = {int(k): float(v) for k, v in thresholds.items()}
    M = len(E)
    J = len(scales)
    A = np.full((M, n + 1, J), np.nan)
    labels = np.full(M, UNRESOLVED, dtype=np.int64)
    j0 = np.full(M, -1, dtype=np.int64)
    classified = np.zeros(M, dtype=bool)
    idx = np.arange(M) if indices is None else np.sort(np.asarray(indices, dtype=np.int64))
    classified[idx] = True
    fine = list(range(J - persistence, J))
    by_m = {m: [(ci, W) for ci, W in enumerate(catalog) if W.m == m] for m in ms}
    warm = _WarmStarts()
    pruned = 0
    for i in idx:
        x = E.points[i]
        qualifies = {}
        for m in sorted(ms, reverse=True):
            tau = thresholds[m]
            ok = True
            for j in reversed(fine):
                if delta0 is not None:
                    higher = A[i, m + 1:, j]
                    higher = higher[np.isfinite(higher)]
                    if len(higher):
                        if separation_floor(float(higher.min()), delta0) >= tau:
                            pruned += 1
                            ok = False
                            break
                v = a_profile(E, x, [scales[j]], m, by_m[m], budget, seed, window, warm,
                              stop_below=0.5 * tau, hm_frac=hm_frac, final_frac=final_frac, maxfev=maxfev)[0]
                A[i, m, j] = v
                if not v < tau:
                    ok = False
                    break
            qualifies[m] = ok
        winners = [m for m in ms if qualifies[m]]
        if winners:
            m = winners[0]
            labels[i] = m
            jj = J - persistence
            while jj > 0:
                v = A[i, m, jj - 1]
                if np.isnan(v):
                    break
                if not v < thresholds[m]:
                    break
                jj -= 1
            j0[i] = jj
    meta = {"pruned_evaluations": int(pruned), "budget": budget, "seed": seed,
            "delta0": None if delta0 is None else float(delta0)}
    return StratumLabels(labels, j0, A, classified, scales, thresholds, persistence, n, meta)


# ----------------------------------------------------------------------------
# structural validation
# ----------------------------------------------------------------------------


@dataclass
class StructureReport:
    ok: bool
    partition_ok: bool
    closure_ok: bool
    flatness_ok: bool
    zero_clusters: int
    closure_failures: list
    flatness_failures: list
    flatness_margins: dict
    closure_assessed: int = 0

    def to_json(self):
        return {"ok": self.ok, "partition_ok": self.partition_ok, "closure_ok": self.closure_ok,
                "closure_assessed": self.closure_assessed,
                "flatness_ok": self.flatness_ok, "zero_clusters": self.zero_clusters,
                "closure_failures": self.closure_failures[:50], "flatness_failures": self.flatness_failures[:50],
                "flatness_margins": self.flatness_margins}


def _clusters(P, radius):
    if len(P) == 0:
        return 0, np.zeros(0, dtype=np.int64)
    pairs = cKDTree(P).query_pairs(radius, output_type="ndarray")
    from scipy.sparse import coo_matrix

    G = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(P), len(P))) if len(pairs) else \
        coo_matrix((len(P), len(P)))
    return connected_components(G, directed=False)


def _spine_fit(P, m):
    """Best ``m``-plane through the mean of ``P`` and the max residual."""
    if m == 0:
        c = P.mean(0)
        return float(np.linalg.norm(P - c, axis=1).max())
    c = P.mean(0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    B = Vt[:m].T
    res = (P - c) - ((P - c) @ B) @ B.T
    return float(np.linalg.norm(res, axis=1).max())


def _reach_through(P, src, comp, ncomp, unres, ttree, link, band):
    """Per blob, the distance to the targets from unresolved samples chained to the blob.

    The chain links unresolved samples at ``link`` and only uses those within
    ``band`` of the blob.
    """
    reach = np.full(ncomp, np.inf)
    d_src, near_src = cKDTree(P[src]).query(P[unres], distance_upper_bound=band)
    keep = np.isfinite(d_src)
    if not keep.any():
        return reach
    U = unres[keep]
    owner_seed = comp[near_src[keep]]
    _, ucomp = _clusters(P[U], link)
    # an unresolved chain belongs to every blob that one of its members touches at `link`
    touch = cKDTree(P[src]).query(P[U], distance_upper_bound=link)[0] < np.inf
    du, _ = ttree.query(P[U])
    for c in np.unique(ucomp):
        mem = ucomp == c
        if not np.any(touch & mem):
            continue
        owners = np.unique(owner_seed[mem & touch])
        best = du[mem].min()
        reach[owners] = np.minimum(reach[owners], best)
    return reach


def validate_structure(labels, E, closure_c=1.5, link_c=2.0, flat_radius=None, tau_flat=None, cluster_radius=None,
                       min_flat_points=4):
    """Check partition, closure and flatness of the labels.

    (i) every classified point carries exactly one label in ``0..n`` or is
    unresolved, and label 0 forms at most one cluster; (ii) every label-``m``
    blob (a component of label-``m`` points linked at ``link_c * h``, ``m < n``)
    has a label-``(m+1)`` point within ``closure_c * h`` of one of its members
    or of the unresolved samples chained to it within two finest rungs (judged
    only for blobs whose members' ``closure_c * h`` balls were all
    classified);
    (iii) within ``B(x, 0.99 r)`` around each label-``m`` point (``0 < m < n``)
    whose ball misses the lower labels, the label-``m`` points lie within
    ``tau_flat * r`` of an ``m``-plane.  ``r`` is the coarsest rung on which
    the label was certified (``flat_radius`` overrides it) and
    ``tau_flat = tau_m / 0.99`` by default.
    """
    lab = labels.labels
    n = labels.n
    h = E.h
    vals = lab[labels.classified]
    partition_ok = bool(np.all((vals == UNRESOLVED) | ((vals >= 0) & (vals <= n))))
    cluster_radius = 2.0 * labels.finest if cluster_radius is None else cluster_radius
    z = np.nonzero(lab == 0)[0]
    nz, _ = _clusters(E.points[z], cluster_radius)
    partition_ok = partition_ok and nz <= 1

    # closure can only be judged where the whole closure ball was classified
    rad = closure_c * h
    assessable = np.zeros(len(lab), dtype=bool)
    cls_idx = np.nonzero(labels.classified)[0]
    if len(cls_idx):
        nbs = E.tree.query_ball_point(E.points[cls_idx], rad)
        assessable[cls_idx] = [bool(labels.classified[nb].all()) for nb in nbs]
    # labels are only resolved down to the finest rung, so a lower stratum shows up as a blob
    # of samples, and a sample whose finest-rung ball straddles a transition may stay
    # unresolved (a strip up to one ball diameter wide); closure asks that each connected blob,
    # extended through the unresolved samples chained to it inside that strip, reach a
    # label-(m+1) sample
    link = link_c * h
    band = 2.0 * labels.finest
    unres = np.nonzero(labels.classified & (lab == UNRESOLVED))[0]
    closure_fail = []
    for m in range(n):
        src = np.nonzero(lab == m)[0]
        tgt = np.nonzero(lab == m + 1)[0]
        if len(src) == 0:
            continue
        _, comp = _clusters(E.points[src], link)
        ncomp = comp.max() + 1
        reach = np.full(ncomp, np.inf)
        if len(tgt):
            ttree = cKDTree(E.points[tgt])
            d, _ = ttree.query(E.points[src])
            np.minimum.at(reach, comp, d)
            if len(unres):
                reach = np.minimum(reach, _reach_through(E.points, src, comp, ncomp, unres, ttree, link, band))
        judged = np.ones(ncomp, dtype=bool)
        np.logical_and.at(judged, comp, assessable[src])
        bad = judged & (reach > rad)
        closure_fail += [int(i) for i in src[bad[comp]]]
    closure_ok = not closure_fail

    # a label certifies a_m < tau_m on every rung from j0 down, so flatness is checked on the
    # 0.99 r ball of the coarsest certified rung r, against tau_m / 0.99
    scales = np.asarray(labels.scales, float)
    if flat_radius is None:
        radius = 0.99 * scales[np.clip(labels.j0, 0, len(scales) - 1)]
    else:
        radius = np.full(len(lab), 0.99 * float(flat_radius))
    taus = {m: (labels.thresholds.get(m, 0.5) / 0.99 if tau_flat is None else tau_flat) for m in range(1, n)}
    flat_fail = []
    margins = {}
    for m in range(1, n):
        pts_idx = np.nonzero(lab == m)[0]
        if len(pts_idx) == 0:
            continue
        P = E.points[pts_idx]
        R = radius[pts_idx]
        tree = cKDTree(P)
        lower = np.nonzero((lab >= 0) & (lab < m))[0]
        if len(lower):
            # flatness of the m-stratum is only claimed on balls that miss the lower strata
            dl, _ = cKDTree(E.points[lower]).query(P)
            clear = dl > R
        else:
            clear = np.ones(len(P), dtype=bool)
        worst = 0.0
        for k, i in enumerate(pts_idx):
            if not clear[k]:
                continue
            nb = tree.query_ball_point(P[k], R[k])
            if len(nb) < min_flat_points:
                continue
            v = _spine_fit(P[nb], m) / R[k]
            worst = max(worst, v)
            if v >= taus[m]:
                flat_fail.append(int(i))
        margins[m] = float(taus[m] - worst)
    flatness_ok = not flat_fail
    return StructureReport(ok=partition_ok and closure_ok and flatness_ok, partition_ok=partition_ok,
                           closure_ok=closure_ok, flatness_ok=flatness_ok, zero_clusters=int(nz),
                           closure_assessed=int(assessable.sum()),
                           closure_failures=closure_fail, flatness_failures=flat_fail, flatness_margins=margins)


def shuffled(labels, seed=0):
    """Negative control: the same multiset of labels, randomly permuted."""
    rng = np.random.default_rng(seed)
    lab = labels.labels.copy()
    idx = np.nonzero(labels.classified)[0]
    lab[idx] = lab[idx][rng.permutation(len(idx))]
    return labels.with_labels(lab)


def recovery_rate(labels, truth_labels, truth_dist, band, region=None, points=None):
    """Fraction of classified points outside the transition band with the true label.

    ``truth_dist[:, t - m_min]`` is the generator-side distance to ``L^t``;
    a point is inside the band when it is within ``band`` of a spine of
    dimension below its true label.
    """
    lab = labels.labels
    mask = labels.classified.copy()
    D = np.asarray(truth_dist)
    tl = np.asarray(truth_labels)
    mmin = labels.n + 1 - D.shape[1]
    for i in np.nonzero(mask)[0]:
        lower = D[i, : tl[i] - mmin]
        if len(lower) and lower.min() < band:
            mask[i] = False
    if region is not None and points is not None:
        mask &= _inside(points, region)
    sel = np.nonzero(mask)[0]
    if len(sel) == 0:
        return math.nan, 0
    return float(np.mean(lab[sel] == tl[sel])), int(len(sel))


# ----------------------------------------------------------------------------
# decay check
# ----------------------------------------------------------------------------


@dataclass
class DecayReport:
    ok: bool
    lhs: float
    rhs: float
    margin: float
    r_small: float
    r_large: float

    def to_json(self):
        return self.__dict__.copy()


def check_decay(E, x, r, m, catalog=None, constants=None, N0=1.0, c1_eps=0.0, lower_points=None,
                budget=16, seed=0, window=None):
    """Check ``a_m(x, 8 N0 r) <= a_m(x, r) / 2 + c1_eps + slack``.

    ``slack`` is the sampling slack ``2h / r`` at the small scale.

    Raises
    ------
    HypothesisFailed
        If ``x`` is not a data point (no sample within ``h``) or, for
        ``m > 0``, a lower-stratum point lies in ``B(x, 8 N0 r)``.
    """
    catalog = default_catalog(E.N) if catalog is None else catalog
    x = np.asarray(x, float)
    if constants is not None:
        N0 = constants.get("N0", N0)
    R = 8.0 * N0 * r
    d, _ = E.tree.query(x)
    if d > E.h:
        raise HypothesisFailed("center is not within the sampling radius of the data")
    if m > 0 and lower_points is not None and len(lower_points):
        if np.linalg.norm(np.asarray(lower_points) - x, axis=1).min() < R:
            raise HypothesisFailed("lower-stratum point inside the exclusion ball")
    classes = [(i, W) for i, W in enumerate(catalog) if W.m == m]
    if not classes:
        from .errors import NoTypeMModel

        raise NoTypeMModel(f"no type-{m} class")
    small = a_profile(E, x, [r], m, classes, budget, seed, window)[0]
    large = a_profile(E, x, [R], m, classes, budget, seed, window)[0]
    rhs = 0.5 * small + c1_eps + 2.0 * E.h / r
    return DecayReport(ok=bool(large <= rhs), lhs=float(large), rhs=float(rhs), margin=float(rhs - large),
                       r_small=float(r), r_large=float(R))
