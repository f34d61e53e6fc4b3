"""Iterative parameterization of a sampled set by a registered cone.

For each spine dimension ``m`` (ascending) the surface ``Gamma^m_0 = L^m(Z)``
is pushed by ``g^m_k = sum_i theta_i psi^m_i`` through a sequence of covers
of shrinking radius; points of the ``(m-1)``-skeleton replay the flow of
dimension ``m - 1``.  The ambient extension uses the same averaging with
``psi_i = eta^n_i``.  Every monitored quantity is logged with its measured
value; nothing is clipped.
"""
from __future__ import annotations

import json
import math
import pickle
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .align import AngleSchedule, IdentityMap, build_eta, build_psi
from .cone_model import alpha as cone_alpha
from .cone_model import tangent_cone
from .cover import PartitionOfUnity, RadiusSchedule, build_cover
from .errors import (
    CoverageGap,
    GraphFitMissing,
    InsufficientRange,
    LipschitzExceeded,
    MonitorHardFail,
    OutOfDomain,
)
from .harness import truth_labels
from .metric import _rot_from_params

# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


@dataclass
class FlowConfig:
    """Knobs of :func:`run_flow`.

    Attributes
    ----------
    k_max : int
        Last step index (steps ``0 .. k_max``).
    c, gamma : float
        Cover radii ``r(m, k) = c * gamma**m * 2**-k``.
    angles : str
        ``"desk"`` or ``"strict"`` angle schedule for the word regions.
    fit_multiple, fit_min_h : float
        Local models are fitted on ``E & B(x_i, max(fit_multiple * r_i, fit_min_h * h))``.
    gamma_spacing : float, optional
        Grid spacing of the samples of ``Z`` that carry ``Gamma``; ``E.h`` by default.
    shrink : float
        Domain schedule ``rho(m, k) = R * (1 - shrink * (m + 1) / (n + 1) * (1 - 2**-k))``.
    lipschitz_cap : float, optional
        Graph fits above this estimate are rejected (the ball's map is then the identity).
    caps : dict
        Optional monitor caps (``step_displacement``, ``skeleton``, ``lipschitz``).
    hard_fail : bool
        Raise :class:`MonitorHardFail` instead of recording cap violations.
    probes : int
        Monitor probe count.
    """

    k_max: int = 4
    c: float = 1.0
    gamma: float = 0.5
    angles: str = "desk"
    fit_multiple: float = 3.0
    fit_min_h: float = 6.0
    gamma_spacing: float = None
    shrink: float = 0.0
    lipschitz_cap: float = None
    caps: dict = field(default_factory=dict)
    hard_fail: bool = False
    probes: int = 400
    seed: int = 0

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: v for k, v in (obj or {}).items() if k in cls.__dataclass_fields__})


# ----------------------------------------------------------------------------
# monitors
# ----------------------------------------------------------------------------


@dataclass
class MonitorReport:
    """One row per (dimension, step) plus run-level summaries."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def check_cap(self, name, value, caps, hard):
        cap = caps.get(name)
        if cap is None or not value > cap:
            return
        item = {"monitor": name, "value": float(value), "cap": float(cap)}
        if hard:
            raise MonitorHardFail(json.dumps(item))
        self.violations.append(item)

    def series(self, kind, m=None, key="displacement"):
        return [r[key] for r in self.rows if r.get("kind") == kind and (m is None or r.get("m") == m)]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(_jsonable(r)) + "\n")
            fh.write(json.dumps(_jsonable({"kind": "summary", **self.summary, "violations": self.violations})) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# ----------------------------------------------------------------------------
# local models
# ----------------------------------------------------------------------------


def _complete(B):
    """Orthonormal ``(N, N)`` matrix whose first columns are ``B``."""
    N = B.shape[0]
    Q, _ = np.linalg.qr(np.hstack([B, np.eye(N)]))
    Q = Q[:, :N]
    Q[:, : B.shape[1]] = B
    return Q


def fit_local_model(E, x, rho, template):
    """Least-squares pose of ``template`` with ``L^t`` through ``x`` on ``E & B(x, rho)``.

    Planes are fitted by principal directions about ``x``; other classes by
    Levenberg-Marquardt over rotations started at the template's pose.
    Returns ``(cone, rms / rho)``.
    """
    x = np.asarray(x, float)
    idx = E.in_ball(x, rho)
    N = template.N
    if len(idx) < N + 1:
        return template.with_pose(template.rotation, x), math.inf
    P = E.points[idx]
    if template.base.dim == 0:
        Y = P - x
        w, V = np.linalg.eigh(Y.T @ Y)
        QB = _complete(V[:, ::-1][:, : template.m])
        QP = _complete(template.product_basis)
        if np.linalg.det(QB @ QP.T) < 0 and N > template.m:
            QB[:, -1] *= -1
        R = QB @ QP.T
        W = template.with_pose(R, x)
    else:
        R0 = template.rotation
        k = N * (N - 1) // 2

        def res(v):
            return np.atleast_1d(template.with_pose(R0 @ _rot_from_params(v, N), x).project(P)[1])

        sol = least_squares(res, np.zeros(k), method="lm" if len(P) >= k else "trf", xtol=1e-12, ftol=1e-12,
                            max_nfev=200)
        W = template.with_pose(R0 @ _rot_from_params(sol.x, N), x)
    d = np.atleast_1d(W.project(P)[1])
    return W, float(np.sqrt(np.mean(d * d)) / rho)


def anchored(Z, E, labels):
    """``Z`` translated so its vertex sits at the lowest-stratum point of ``E`` nearest to it."""
    lab = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    ok = lab >= 0
    if not ok.any():
        return Z
    m0 = lab[ok].min()
    cand = np.nonzero(lab == m0)[0]
    j = cand[np.argmin(np.linalg.norm(E.points[cand] - Z.vertex, axis=1))]
    return Z.transformed(np.eye(Z.N), E.points[j] - Z.vertex)


def _template(Z, t, x):
    """The cone of type ``t`` tangent to ``Z`` along the branch of ``L^t(Z)`` nearest to ``x``."""
    if t == Z.m:
        return Z
    q, _, w = Z.project_spine(x, t)
    Y = Z.faces_of_spine(t)[w]
    return tangent_cone(Z, Y, q)


# ----------------------------------------------------------------------------
# steps and stacks
# ----------------------------------------------------------------------------


@dataclass
class GStep:
    """One averaged step ``g_k = sum_i theta_i psi_i``."""

    k: int
    m: object
    cover_index: int
    psis: dict


def g_step(pou, psis, X):
    """``sum_i theta_i(p) psi_i(p)``; the identity where no weight is available."""
    X = np.atleast_2d(np.asarray(X, float))
    if pou.tree is None or len(X) == 0:
        return X.copy()
    T = pou.matrix(X).tocsc()
    out = np.zeros_like(X)
    tot = np.zeros(len(X))
    for i in range(T.shape[1]):
        a, b = T.indptr[i], T.indptr[i + 1]
        if a == b:
            continue
        rows = T.indices[a:b]
        vals = T.data[a:b]
        psi = psis.get(i)
        Y = X[rows] if psi is None else psi(X[rows])
        out[rows] += vals[:, None] * Y
        tot[rows] += vals
    free = tot <= 0
    out[free] = X[free]
    return out


class MapStack:
    """The composed flows ``f^m`` (one per spine dimension) and the ambient ``f``."""

    def __init__(self, Z, covers, models, config, domain, n):
        self.Z = Z
        self.covers = covers
        self.pous = [PartitionOfUnity(c) for c in covers]
        self.models = models
        self.config = config
        self.domain = domain
        self.n = n
        self.steps = {}
        self.ext = []
        self.samples = None
        self.sample_labels = None
        self.images = {}
        self.h = None
        self._cache = {}
        self.truncated_at = None

    def _upto(self, upto):
        K = len(self.ext) if upto is None else upto
        if self.truncated_at is not None:
            K = min(K, self.truncated_at)
        return K

    def apply_ext(self, X, upto=None):
        """The ambient map through ``upto`` steps (all by default)."""
        Y = np.array(np.atleast_2d(X), float)
        for st in self.ext[: self._upto(upto)]:
            Y = g_step(self.pous[st.cover_index], st.psis, Y)
        return Y

    def apply_m(self, m, X, upto=None):
        """``f^m`` on points of ``L^m(Z)``; skeleton points replay lower dimensions."""
        X = np.array(np.atleast_2d(X), float)
        lab, _ = truth_labels(self.Z, X, tol=1e-9)
        out = X.copy()
        for u in sorted(self.steps):
            if u > m:
                break
            sel = lab == u if u < m else lab >= m
            if not sel.any():
                continue
            Y = X[sel]
            for st in self.steps[u][: self._upto(upto)]:
                Y = g_step(self.pous[st.cover_index], st.psis, Y)
            out[sel] = Y
        return out

    def sample_images(self, upto=None):
        """``f`` on ``self.samples`` (from the run's trace; recomputed if absent)."""
        K = self._upto(upto)
        trace = getattr(self, "ext_trace", None)
        if trace is not None and K < len(trace):
            return trace[K]
        return self.apply_ext(self.samples, upto)

    def truncated(self, k):
        """A view of the stack keeping only the first ``k`` steps."""
        other = MapStack.__new__(MapStack)
        other.__dict__ = dict(self.__dict__)
        other._cache = {}
        other.truncated_at = int(k)
        return other

    def manifest(self):
        return {"cone": self.Z.to_json(), "domain": {"center": np.asarray(self.domain[0]).tolist(),
                                                     "radius": float(self.domain[1])},
                "config": self.config.to_json(), "steps": len(self.ext), "truncated_at": self.truncated_at,
                "covers": [{"k": c.k, "balls": len(c), "strata": np.bincount(c.strata).tolist()} for c in self.covers]}

    def save(self, path):
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)


def evaluate_f(stack, p, upto=None):
    """The ambient map at ``p`` (a point or rows); cached for single points.

    Raises
    ------
    OutOfDomain
        If a point lies outside the domain ball.
    """
    P = np.asarray(p, float)
    single = P.ndim == 1
    P2 = np.atleast_2d(P)
    c, R = stack.domain
    if np.any(np.linalg.norm(P2 - c, axis=1) > R * (1 + 1e-12)):
        raise OutOfDomain("point outside the domain ball")
    if single:
        key = (P.tobytes(), upto, stack.truncated_at)
        if key not in stack._cache:
            stack._cache[key] = stack.apply_ext(P2, upto)[0]
        return stack._cache[key].copy()
    return stack.apply_ext(P2, upto)


# ----------------------------------------------------------------------------
# the flow
# ----------------------------------------------------------------------------


def _models_for(cover, E, Z, config, h, lab):
    # The fit ball of a stratum-t centre stops 2h short of lower-labelled data
    # (one sample spacing plus the label band): past that it takes in other
    # branches meeting at the junction and tilts the fit.
    trees = {t: cKDTree(E.points[(lab >= 0) & (lab < t)]) for t in set(cover.strata.tolist())
             if np.any((lab >= 0) & (lab < t))}
    out = []
    for i in range(len(cover)):
        x = cover.centers[i]
        t = int(cover.strata[i])
        rho = max(config.fit_multiple * cover.radii[i], config.fit_min_h * h)
        if t in trees:
            rho = max(min(rho, float(trees[t].query(x)[0]) - 2.0 * h), cover.radii[i])
        W, rms = fit_local_model(E, x, rho, _template(Z, t, x))
        out.append((W, rms))
    return out


def run_flow(Z, E, labels, k_max=None, config=None, seed=None):
    """Build the flows ``f^m`` and the ambient extension ``f``.

    Parameters
    ----------
    Z : ConeSet
        Model registered to ``E`` at the top scale (re-anchored at the
        lowest-stratum point of ``E``).
    E : PointCloud
        Data; ``E.region`` (center, radius) is the domain when present.
    labels : StratumLabels or int array
        Stratum labels of ``E`` (``-1`` = unresolved, ignored).
    k_max : int, optional
        Overrides ``config.k_max``.

    Returns
    -------
    (MapStack, MonitorReport)
    """
    config = FlowConfig() if config is None else config
    if isinstance(config, dict):
        config = FlowConfig.from_json(config)
    if k_max is not None:
        config.k_max = int(k_max)
    if seed is not None:
        config.seed = int(seed)
    t0 = time.time()
    lab = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    Z = anchored(Z, E, lab)
    n = Z.n
    domain = getattr(E, "region", None)
    if domain is None:
        c = E.points.mean(0)
        domain = (c, float(np.linalg.norm(E.points - c, axis=1).max()))
    center, R = np.asarray(domain[0], float), float(domain[1])
    h = float(E.h)
    hg = config.gamma_spacing or h
    sched = AngleSchedule.named(config.angles, cone_alpha([Z]), max(n - Z.m, 1))
    rs = RadiusSchedule(config.c, config.gamma)
    mon = MonitorReport()

    # covers and local models (shared by all dimensions)
    covers, models = [], []
    for k in range(config.k_max + 1):
        cov = build_cover(lab, E, k, rs)
        rho = R * (1.0 - config.shrink * (1.0 - 2.0 ** -k))
        keep = np.nonzero(np.linalg.norm(cov.centers - center, axis=1) <= rho)[0]
        cov = cov.truncated(keep)
        covers.append(cov)
        mods = _models_for(cov, E, Z, config, h, lab)
        models.append([w for w, _ in mods])
        rms = np.array([r for _, r in mods])
        mon.add(kind="cover", k=k, balls=len(cov), strata=np.bincount(cov.strata, minlength=n + 1).tolist(),
                model_rms_max=float(rms.max()) if len(rms) else 0.0,
                model_rms_median=float(np.median(rms)) if len(rms) else 0.0)
    stack = MapStack(Z, covers, models, config, (center, R), n)
    stack.h = hg

    # samples of Z carrying Gamma
    rng = np.random.default_rng(config.seed)
    S = Z.densify(center, R, hg, include_spines=True, rng=rng)
    Slab, _ = truth_labels(Z, S)
    stack.samples = S
    stack.sample_labels = Slab
    ms = list(range(Z.m, n + 1))
    imgs = {m: [S.copy()] for m in ms}

    def gammas_at(k, upto):
        return {u: imgs[u][k][Slab <= u] for u in ms if u <= upto}

    for m in ms:
        stack.steps[m] = []
        on = Slab <= m
        skel = Slab < m
        prev = None
        for k in range(config.k_max + 1):
            cov = covers[k]
            gam = gammas_at(k, m - 1)
            psis = {}
            nfail = 0
            for i in range(len(cov)):
                W = models[k][i]
                if W.m > m:
                    continue
                try:
                    psi, _ = build_psi(W, gam, m, sched, hg, cov.centers[i], cov.radii[i],
                                       lipschitz_tol=config.lipschitz_cap)
                except (GraphFitMissing, LipschitzExceeded, CoverageGap) as exc:
                    psi = IdentityMap()
                    nfail += 1
                    mon.violations.append({"monitor": "graph_fit", "m": m, "k": k, "ball": i, "error": exc.code})
                psis[i] = psi
            st = GStep(k, m, k, psis)
            stack.steps[m].append(st)
            X = imgs[m][k]
            Xn = X.copy()
            top = on & ~skel
            Xn[top] = g_step(stack.pous[k], psis, X[top])
            skel_res = 0.0
            if skel.any():
                natural = g_step(stack.pous[k], psis, X[skel])
                Xn[skel] = imgs[m - 1][k + 1][skel]
                skel_res = float(np.linalg.norm(natural - Xn[skel], axis=1).max())
            imgs[m].append(Xn)
            disp = float(np.linalg.norm(Xn[on] - X[on], axis=1).max()) if on.any() else 0.0
            Em = E.points[(lab >= 0) & (lab <= m)]
            m1 = float(cKDTree(Em).query(Xn[on])[0].max()) if len(Em) and on.any() else math.inf
            mon.add(kind="flow", m=m, k=k, displacement=disp, M1=m1, skeleton_residue=skel_res,
                    psi_failures=nfail, ratio=(disp / prev if prev else None))
            mon.check_cap("step_displacement", disp, config.caps, config.hard_fail)
            prev = disp
    stack.images = imgs

    # ambient extension: psi_i = eta^n_i
    Xa = S.copy()
    stack.ext_trace = [Xa]
    prev = None
    for k in range(config.k_max + 1):
        cov = covers[k]
        gam = gammas_at(k, n)
        psis = {}
        counts = {}
        for i in range(len(cov)):
            W = models[k][i]
            try:
                eta, rep = build_eta(W, gam, n, sched, hg, cov.centers[i], cov.radii[i],
                                     lipschitz_tol=config.lipschitz_cap)
                for key, v in rep.branch_counts.items():
                    counts.setdefault(f"t{W.m}:L{key}", []).append(v)
            except (GraphFitMissing, LipschitzExceeded, CoverageGap) as exc:
                eta = IdentityMap()
                mon.violations.append({"monitor": "graph_fit", "m": "ext", "k": k, "ball": i, "error": exc.code})
            psis[i] = eta
        stack.ext.append(GStep(k, "ext", k, psis))
        Xn = g_step(stack.pous[k], psis, Xa)
        disp = float(np.linalg.norm(Xn - Xa, axis=1).max())
        mon.add(kind="ext", k=k, displacement=disp, ratio=(disp / prev if prev else None),
                branch_counts={key: sorted(set(v)) for key, v in counts.items()},
                gap_to_fn=float(np.linalg.norm(Xn - imgs[n][k + 1], axis=1).max()))
        prev = disp
        Xa = Xn
        stack.ext_trace.append(Xa)
    mon.summary = flow_summary(mon, config.k_max)
    mon.summary["seconds"] = time.time() - t0
    return stack, mon


def _geometric(d):
    d = np.asarray([v for v in d], float)
    ratios = d[1:] / np.where(d[:-1] > 0, d[:-1], np.nan)
    return ratios


def flow_summary(mon, k_max):
    """Decay ratios, Cauchy gap versus the extrapolated tail, skeleton residues."""
    out = {}
    d = np.array(mon.series("ext"), float)
    out["ext_displacements"] = d.tolist()
    out.update(cauchy_report(d))
    for m in sorted({r["m"] for r in mon.rows if r.get("kind") == "flow"}):
        dm = np.array(mon.series("flow", m), float)
        rat = _geometric(dm)
        out[f"f{m}_displacements"] = dm.tolist()
        out[f"f{m}_mean_ratio"] = float(np.nanmean(rat)) if len(rat) and np.isfinite(rat).any() else None
        out[f"f{m}_skeleton_residue"] = float(max(mon.series("flow", m, "skeleton_residue")))
    return out


def cauchy_report(d):
    """``gap = d[-1]`` against the geometric extrapolation of ``d[:-1]``."""
    d = np.asarray(d, float)
    out = {"mean_ratio": None, "cauchy_gap": float(d[-1]) if len(d) else None, "tail_prediction": None,
           "cauchy_ok": None}
    rat = _geometric(d)
    if len(rat) and np.isfinite(rat).any():
        out["mean_ratio"] = float(np.nanmean(rat))
    prior = d[:-1]
    if len(prior) >= 2 and np.all(prior > 0):
        k = np.arange(len(prior))
        slope, icpt = np.polyfit(k, np.log(prior), 1)
        pred = float(np.exp(icpt + slope * len(prior)))
        out["tail_prediction"] = pred
        out["cauchy_ok"] = bool(d[-1] <= 2.0 * pred)
    return out


# ----------------------------------------------------------------------------
# Jacobian and skeleton monitors
# ----------------------------------------------------------------------------


def tangential_singular_values(stack, m, probes=200, margin=None, seed=0, step=1e-6):
    """Smallest singular value of ``Df^m`` along ``L^m(Z)`` at probes off ``L^{m-1}(Z)``."""
    Z = stack.Z
    rng = np.random.default_rng(seed)
    c, R = stack.domain
    margin = 4.0 * stack.h if margin is None else margin
    S, lab = stack.samples, stack.sample_labels
    sel = np.nonzero((lab == m) & (np.linalg.norm(S - c, axis=1) < 0.9 * R))[0]
    if m > Z.m:
        dl = np.atleast_1d(Z.dist_spine(S[sel], m - 1))
        sel = sel[dl > margin]
    if len(sel) == 0:
        return np.zeros(0)
    sel = rng.choice(sel, min(len(sel), probes), replace=False)
    P = S[sel]
    w = np.atleast_1d(Z.project_spine(P, m)[2])
    br = Z.branches(m)
    d = br[0].plane[1].shape[1]
    if d == 0:
        return np.ones(len(P))
    Bs = np.stack([br[int(j)].plane[1] for j in w])  # (M, N, d)
    Q = np.concatenate([P[:, None, :] + step * Bs.transpose(0, 2, 1), P[:, None, :] - step * Bs.transpose(0, 2, 1)],
                       axis=1).reshape(-1, Z.N)
    F = stack.apply_m(m, Q).reshape(len(P), 2 * d, Z.N)
    J = (F[:, :d] - F[:, d:]).transpose(0, 2, 1) / (2 * step)
    out = np.linalg.svd(J, compute_uv=False).min(axis=1)
    return out


def skeleton_compatibility(stack, m, probes=200, seed=0):
    """``max |f^m - f^{m-1}|`` on samples of ``L^{m-1}(Z)``."""
    S, lab = stack.samples, stack.sample_labels
    sel = np.nonzero(lab <= m - 1)[0]
    if len(sel) == 0 or m - 1 < stack.Z.m:
        return 0.0
    rng = np.random.default_rng(seed)
    sel = rng.choice(sel, min(len(sel), probes), replace=False)
    P = S[sel]
    return float(np.linalg.norm(stack.apply_m(m, P) - stack.apply_m(m - 1, P), axis=1).max())


# ----------------------------------------------------------------------------
# Hoelder exponents
# ----------------------------------------------------------------------------


def holder_exponent(stack, domain=None, n_pairs=4000, seed=0, d_lo=None, d_hi=None, bins_per_decade=2, f=None,
                    Z=None):
    """Envelope exponents of ``log|f(y) - f(z)|`` against ``log|y - z|`` for pairs on ``Z``.

    Pairs are drawn in log-uniform distance bins spanning ``[d_lo, d_hi]``
    (four decades by default).  The slopes of the per-bin maximum and
    minimum of ``log|f(y)-f(z)| - log|y-z|`` give the two exponents
    ``1 + slope``.

    Parameters
    ----------
    stack : MapStack or None
    domain : (center, radius), optional
        Region of ``Z`` to sample; the inner 90% of the stack's domain by default.
    f : callable, optional
        Map to test instead of the stack's ambient map.

    Returns
    -------
    (lo, hi)

    Raises
    ------
    InsufficientRange
        Fewer than three bins with usable pairs.
    """
    Z = stack.Z if Z is None else Z
    f = stack.apply_ext if f is None else f
    if domain is None:
        c, R = stack.domain
        domain = (c, 0.9 * R)
    c, R = np.asarray(domain[0], float), float(domain[1])
    d_hi = 0.5 * R if d_hi is None else d_hi
    d_lo = d_hi * 1e-4 if d_lo is None else d_lo
    rng = np.random.default_rng(seed)
    nb = max(int(round(bins_per_decade * math.log10(d_hi / d_lo))), 1)
    edges = np.logspace(math.log10(d_lo), math.log10(d_hi), nb + 1)
    per = max(n_pairs // nb, 2)
    br = Z.branches(Z.n)
    Y, Zs, bins = [], [], []
    for bi in range(nb):
        got = 0
        tries = 0
        while got < per and tries < 50:
            tries += 1
            M = 4 * per
            s = rng.integers(len(br), size=M)
            pts = np.zeros((M, Z.N))
            dirs = np.zeros((M, Z.N))
            for j in range(len(br)):
                sel = s == j
                if not sel.any():
                    continue
                b, B = br[j].plane
                coef = rng.normal(size=(sel.sum(), B.shape[1])) * R
                q = Z.project_spine(b + coef @ B.T, Z.n)[0]
                pts[sel] = q
                v = rng.normal(size=(sel.sum(), B.shape[1]))
                dirs[sel] = (v / np.linalg.norm(v, axis=1)[:, None]) @ B.T
            ok = np.linalg.norm(pts - c, axis=1) < R - edges[bi + 1]
            dist = np.exp(rng.uniform(math.log(edges[bi]), math.log(edges[bi + 1]), size=M))
            z = pts + dist[:, None] * dirs
            z = Z.project_spine(z, Z.n)[0]
            dd = np.linalg.norm(z - pts, axis=1)
            ok &= (dd >= edges[bi]) & (dd < edges[bi + 1])
            ok = np.nonzero(ok)[0][: per - got]
            Y.append(pts[ok])
            Zs.append(z[ok])
            bins.append(np.full(len(ok), bi))
            got += len(ok)
    Y = np.vstack(Y)
    Zs = np.vstack(Zs)
    bins = np.concatenate(bins)
    fy, fz = f(Y), f(Zs)
    dx = np.linalg.norm(Y - Zs, axis=1)
    df = np.linalg.norm(fy - fz, axis=1)
    q = np.log(np.maximum(df, 1e-300)) - np.log(dx)
    xs, up, lo = [], [], []
    for bi in range(nb):
        sel = bins == bi
        if sel.sum() < 2:
            continue
        xs.append(np.log(dx[sel]).mean())
        up.append(q[sel].max())
        lo.append(q[sel].min())
    if len(xs) < 3:
        raise InsufficientRange(f"only {len(xs)} usable distance bins")
    su = np.polyfit(xs, up, 1)[0]
    sl = np.polyfit(xs, lo, 1)[0]
    a, b = 1.0 + su, 1.0 + sl
    return float(min(a, b)), float(max(a, b))


# ----------------------------------------------------------------------------
# theorem conclusions
# ----------------------------------------------------------------------------


@dataclass
class TheoremReport:
    ok: bool
    displacement: float
    tol_disp: float
    coverage_E_to_fZ: float
    coverage_fZ_to_E: float
    tol_cov: float
    sphere_min: float
    sphere_max: float
    inner: float
    outer: float
    checks: dict
    worst: dict = field(default_factory=dict)

    def to_json(self):
        return _jsonable(asdict(self))


def verify_theorem(stack, Z, E, tolerances):
    """Displacement bound, two-sided coverage and ball inclusions for the ambient map.

    ``tolerances`` holds ``tol_disp`` and ``tol_cov`` and optionally
    ``inner`` (0.95), ``sphere`` (0.975) and ``outer`` (1.0) as fractions of
    the domain radius, ``probes`` (ambient probes) and ``sphere_probes``.
    """
    tol = dict(tolerances)
    c, R = stack.domain
    c = np.asarray(c, float)
    inner, sph, outer = tol.get("inner", 0.95), tol.get("sphere", 0.975), tol.get("outer", 1.0)
    rng = np.random.default_rng(tol.get("seed", 0))
    N = len(c)
    S = stack.samples
    keep = np.linalg.norm(S - c, axis=1) <= sph * R
    S = S[keep]
    fS = stack.sample_images()[keep]
    nprob = int(tol.get("probes", 2000))
    A = rng.normal(size=(nprob, N))
    A = c + A / np.linalg.norm(A, axis=1)[:, None] * (R * rng.uniform(0, 1, size=(nprob, 1)) ** (1.0 / N))
    fA = stack.apply_ext(A)
    disp_all = np.concatenate([np.linalg.norm(fS - S, axis=1), np.linalg.norm(fA - A, axis=1)])
    disp = float(disp_all.max())
    Ein = E.points[np.linalg.norm(E.points - c, axis=1) < inner * R]
    d1, _ = cKDTree(fS).query(Ein)
    fin = fS[np.linalg.norm(fS - c, axis=1) < inner * R]
    d2, _ = cKDTree(E.points).query(fin)
    cov1 = float(d1.max()) if len(d1) else 0.0
    cov2 = float(d2.max()) if len(d2) else 0.0
    ns = int(tol.get("sphere_probes", 4000))
    U = rng.normal(size=(ns, N))
    U = c + sph * R * U / np.linalg.norm(U, axis=1)[:, None]
    rU = np.linalg.norm(stack.apply_ext(U) - c, axis=1)
    checks = {"displacement": disp <= tol["tol_disp"], "coverage": max(cov1, cov2) <= tol["tol_cov"],
              "inclusion": bool(rU.min() > inner * R and rU.max() < outer * R)}
    worst = {}
    if len(d1):
        worst["E_point_farthest_from_fZ"] = Ein[int(np.argmax(d1))].tolist()
    if len(d2):
        worst["fZ_point_farthest_from_E"] = fin[int(np.argmax(d2))].tolist()
    return TheoremReport(ok=all(checks.values()), displacement=disp, tol_disp=float(tol["tol_disp"]),
                         coverage_E_to_fZ=cov1, coverage_fZ_to_E=cov2, tol_cov=float(tol["tol_cov"]),
                         sphere_min=float(rU.min()), sphere_max=float(rU.max()), inner=inner * R, outer=outer * R,
                         checks=checks, worst=worst)


# ----------------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------------


def export_obj(stack, path, t=None):
    """``f(L^t(Z))`` samples as an OBJ point set (vertices only), one group per dimension."""
    S, lab = stack.samples, stack.sample_labels
    ts = range(stack.Z.m, stack.n + 1) if t is None else [t]
    with open(path, "w") as fh:
        for u in ts:
            sel = lab == u
            if not sel.any():
                continue
            fh.write(f"g L{u}\n")
            for p in stack.apply_ext(S[sel]):
                fh.write("v " + " ".join(f"{v:.9g}" for v in p) + "\n")
