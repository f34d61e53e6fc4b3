"""Synthetic data: stratified cone samples, certified smooth perturbations, audits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cone_model import ConeSet, load_cone
from .errors import DensityTooLow, FieldNotCertified
from .metric import PointCloud, d_xr, register_cone


# ----------------------------------------------------------------------------
# ground truth side channel
# ----------------------------------------------------------------------------


@dataclass
class GroundTruth:
    """Generator-side information; never consumed by the stratifier.

    ``labels[i]`` is the smallest ``t`` with the preimage on ``L^t(W)``;
    ``spine_dist[i, t - m]`` the preimage's distance to ``L^t(W)``.
    """

    cone: ConeSet
    preimage: np.ndarray
    labels: np.ndarray
    spine_dist: np.ndarray
    field: object = None

    def save(self, path):
        m = self.cone.m
        cols = ["label"] + [f"x{i}" for i in range(self.cone.N)] + [f"dist_L{t}" for t in range(m, self.cone.n + 1)]
        data = np.column_stack([self.labels, self.preimage, self.spine_dist])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")

    @classmethod
    def load(cls, path, cone):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        N = cone.N
        return cls(cone, data[:, 1:1 + N], data[:, 0].astype(int), data[:, 1 + N:])


def truth_labels(W, P, tol=1e-9):
    """Smallest spine dimension containing each point, and all spine distances."""
    P = np.atleast_2d(P)
    D = np.column_stack([W.dist_spine(P, t) for t in range(W.m, W.n + 1)])
    lab = np.full(len(P), W.n, dtype=np.int64)
    for j in range(D.shape[1] - 1, -1, -1):
        lab = np.where(D[:, j] <= tol, W.m + j, lab)
    return lab, D


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------


def covering_radius(W, P, center, radius, h_probe):
    """Certified covering radius of ``W & B(center, radius)`` by samples ``P``.

    The cone is probed on a grid of spacing ``h_probe``; every point of the
    set lies within ``h_probe * sqrt(n) / 2`` of a probe, so the measured
    maximum plus that term is an upper bound.
    """
    from scipy.spatial import cKDTree

    from .metric import max_nn_dist

    probes = W.densify(center, radius, h_probe)
    meas = max_nn_dist(cKDTree(P), probes)
    return meas + h_probe * math.sqrt(max(W.n, 1)) / 2.0


def sample_cone(W, center=None, radius=1.0, density=1000.0, seed=0, min_points=1000, certify=True):
    """Stratified grid sample of ``W & B(center, radius)``.

    Each branch of each spine ``L^t`` is gridded in its own ``t``-plane with
    spacing ``s = density ** (-1 / n)`` and a seeded random offset, so lower
    strata carry their intrinsic ``t``-dimensional measure.

    Parameters
    ----------
    W : ConeSet
    density : float
        Points per unit ``n``-dimensional measure on the top stratum.

    Returns
    -------
    PointCloud
        With ``truth`` (a :class:`GroundTruth`) attached as a side channel.

    Raises
    ------
    DensityTooLow
        If fewer than ``min_points`` points result.
    """
    center = W.vertex if center is None else np.asarray(center, float)
    rng = np.random.default_rng(seed)
    s = float(density) ** (-1.0 / max(W.n, 1))
    P = W.densify(center, radius, s, include_spines=True, rng=rng)
    if len(P) < min_points:
        raise DensityTooLow(f"{len(P)} points < {min_points}")
    h = covering_radius(W, P, center, radius, s / 8.0) if certify else s * math.sqrt(W.n) / 2.0
    cloud = PointCloud(P, h)
    lab, D = truth_labels(W, P)
    cloud.truth = GroundTruth(W, P.copy(), lab, D)
    cloud.grid_spacing = s
    cloud.region = (center, float(radius))
    return cloud


def branch_counts(W, cloud):
    """Number of samples in the relative interior of each top-dimensional piece."""
    P = cloud.truth.preimage
    lab = cloud.truth.labels
    _, _, w = W.project_spine(P[lab == W.n], W.n)
    return np.bincount(w, minlength=len(W.faces_of_spine(W.n)))


# ----------------------------------------------------------------------------
# perturbation fields
# ----------------------------------------------------------------------------


def _quintic(s):
    """Compactly supported C^2 profile: 1 at 0, 0 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _dquintic(s):
    s = np.clip(s, 0.0, 1.0)
    return -30.0 * s * s * (1.0 - s) ** 2


@dataclass
class CertReport:
    ok: bool
    sup_disp: float
    sup_jac: float
    eps: float
    probes: int

    def to_json(self):
        return asdict(self)


class PerturbationField:
    """Smooth displacement ``phi(x) = x + sum_k v_k beta(|x - c_k| / rho_k)``.

    Amplitudes are rescaled so the measured ``sup |phi - id|`` and
    ``sup |D phi - I|`` (operator norm) both equal ``0.9 eps`` on a dense
    probe set; :meth:`certify` re-checks both bounds on fresh probes by
    central finite differences.

    Parameters
    ----------
    N : int
    eps : float
    seed : int
    n_bumps : int
    center : array-like, optional
    support_radius : float
        Bump centers are drawn uniformly in ``B(center, support_radius)``.
    bump_radius : (float, float)
        Range of bump radii.
    """

    def __init__(self, N, eps, seed=0, n_bumps=12, center=None, support_radius=1.5,
                 bump_radius=(1.0, 2.0), fill=0.9, calib_probes=40000):
        self.N = int(N)
        self.eps = float(eps)
        self.seed = int(seed)
        self.center = np.zeros(self.N) if center is None else np.asarray(center, float)
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_bumps, self.N))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rad = support_radius * rng.uniform(0, 1, n_bumps) ** (1.0 / self.N)
        self.centers = self.center + dirs * rad[:, None]
        self.radii = rng.uniform(bump_radius[0], bump_radius[1], n_bumps)
        self.vectors = rng.normal(size=(n_bumps, self.N))
        self.extent = support_radius + bump_radius[1]
        self.certified = False
        self.report = None
        if self.eps > 0:
            X = self._probes(calib_probes, rng)
            su = np.linalg.norm(self.displacement(X), axis=1).max()
            sj = np.linalg.norm(self.jacobian(X), ord=2, axis=(1, 2)).max()
            self.vectors *= fill * self.eps / max(su, sj)
        else:
            self.vectors *= 0.0

    def _probes(self, n, rng):
        # half the probes near bump centers, half uniform over the support
        k = n // 2
        d = rng.normal(size=(k, self.N))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        U = self.center + d * (self.extent * rng.uniform(0, 1, k) ** (1.0 / self.N))[:, None]
        j = rng.integers(0, len(self.centers), n - k)
        d = rng.normal(size=(n - k, self.N))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        V = self.centers[j] + d * (self.radii[j] * rng.uniform(0, 1, n - k))[:, None]
        return np.vstack([U, V])

    def displacement(self, X):
        X = np.atleast_2d(X)
        out = np.zeros_like(X, dtype=float)
        for c, rho, v in zip(self.centers, self.radii, self.vectors):
            s = np.linalg.norm(X - c, axis=1) / rho
            out += _quintic(s)[:, None] * v
        return out

    def jacobian(self, X):
        """``D(phi - id)`` at each row of ``X``: shape ``(M, N, N)``."""
        X = np.atleast_2d(X)
        J = np.zeros((len(X), self.N, self.N))
        for c, rho, v in zip(self.centers, self.radii, self.vectors):
            diff = X - c
            nr = np.linalg.norm(diff, axis=1)
            s = nr / rho
            g = np.where(nr > 0, _dquintic(s) / (rho * np.maximum(nr, 1e-300)), 0.0)
            J += np.einsum("i,j,ik->ijk", g, v, diff)
        return J

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        return X + self.displacement(X)

    def certify(self, probes=10_000, step=1e-6, seed=None):
        """Check both bounds on fresh probes with central finite differences."""
        rng = np.random.default_rng(self.seed + 7919 if seed is None else seed)
        X = self._probes(probes, rng)
        su = float(np.linalg.norm(self.displacement(X), axis=1).max()) if len(X) else 0.0
        J = np.zeros((len(X), self.N, self.N))
        for k in range(self.N):
            e = np.zeros(self.N)
            e[k] = step
            J[:, :, k] = (self.displacement(X + e) - self.displacement(X - e)) / (2 * step)
        sj = float(np.linalg.norm(J, ord=2, axis=(1, 2)).max())
        tol = 1e-7 * max(self.eps, 1e-12)
        ok = su <= self.eps + tol and sj <= self.eps + tol
        self.report = CertReport(ok=bool(ok), sup_disp=su, sup_jac=sj, eps=self.eps, probes=probes)
        self.certified = bool(ok)
        return self.report

    def to_json(self):
        return {"N": self.N, "eps": self.eps, "seed": self.seed, "centers": self.centers.tolist(),
                "radii": self.radii.tolist(), "vectors": self.vectors.tolist(),
                "certified": self.certified}


@dataclass
class AuditReport:
    ok: bool
    eps: float
    max_ratio: float
    records: list = field(default_factory=list)

    def to_json(self):
        return {"ok": self.ok, "eps": self.eps, "max_ratio": self.max_ratio, "records": self.records}


def perturb(cloud, field, audit=0, audit_seed=0, r_range=None):
    """Push the cloud through a certified field.

    The covering radius grows at most by the factor ``1 + eps``.  With
    ``audit > 0`` the data hypothesis is checked at that many random balls:
    ``d_{x,r}(E, Z)`` with ``Z`` the generating cone moved by the local
    displacement and refined by registration, against ``eps`` plus the
    sampling slack ``2h/r``.

    Raises
    ------
    FieldNotCertified
    """
    if not field.certified:
        raise FieldNotCertified("certify() the field before use")
    P = field(cloud.points)
    out = PointCloud(P, cloud.h * (1.0 + field.eps))
    truth = getattr(cloud, "truth", None)
    if truth is not None:
        out.truth = GroundTruth(truth.cone, truth.preimage, truth.labels, truth.spine_dist, field)
    for attr in ("grid_spacing", "region"):
        if hasattr(cloud, attr):
            setattr(out, attr, getattr(cloud, attr))
    if audit:
        out.audit = hypothesis_audit(out, truth.cone, field, audit, audit_seed, r_range)
    return out


def hypothesis_audit(E, W, field, trials=100, seed=0, r_range=None, region=None):
    """Measure ``d_{x,r}(E, Z(x,r))`` at random balls centered on ``E``.

    Balls are kept inside the sampled region ``region = (center, radius)``
    (shrunk by ``eps``) so the cone is never compared with unsampled parts.
    """
    rng = np.random.default_rng(seed)
    lo, hi = r_range if r_range is not None else (max(10 * E.h, 0.05), 1.0)
    if region is None:
        region = getattr(E, "region", (W.vertex, 1.0))
    c0, R0 = np.asarray(region[0], float), float(region[1])
    room = R0 - field.eps - np.linalg.norm(E.points - c0, axis=1)
    ok_idx = np.nonzero(room >= lo)[0]
    recs = []
    worst = 0.0
    idx = rng.choice(ok_idx, size=min(trials, len(ok_idx)), replace=False)
    for i in idx:
        x = E.points[i]
        top = min(hi, room[i])
        r = float(math.exp(rng.uniform(math.log(lo), math.log(top))))
        pre = E.truth.preimage[i] if getattr(E, "truth", None) is not None else x
        shift = field.displacement(pre)[0]
        Z0 = W.transformed(np.eye(W.N), shift)
        d0 = d_xr(E, Z0, (x, r))
        reg = register_cone(W, E, (x, r), constrain_spine_through_center=False, budget=0,
                            init=[(Z0.rotation, Z0.translation)], maxfev=60, step=0.02)
        d = min(d0, reg.score)
        slack = 2.0 * E.h / r
        ratio = max(d - slack, 0.0) / field.eps if field.eps > 0 else (0.0 if d <= slack else math.inf)
        worst = max(worst, ratio)
        recs.append({"x": x.tolist(), "r": r, "d": d, "slack": slack})
    ok = all(rc["d"] <= field.eps + rc["slack"] for rc in recs)
    return AuditReport(ok=ok, eps=field.eps, max_ratio=worst, records=recs)


# ----------------------------------------------------------------------------
# run configuration and generation
# ----------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a run depends on; serialized verbatim into reports."""

    cone: str = "Y_times(1)"
    ambient_dim: int = 3
    radius: float = 1.0
    density: float = 4000.0
    eps: float = 0.0
    seed: int = 0
    field_seed: int = 1
    k_max: int = 6
    scales: list = None
    thresholds: dict = None
    schedule: str = "desk"
    tolerances: dict = None
    extra: dict = None

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def generate(config):
    """Sample and perturb according to a :class:`RunConfig`-like mapping.

    Returns ``(cloud, cone)``; the cloud carries ``truth``.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_json(config)
    W = load_cone(cfg.cone, cfg.ambient_dim)
    cloud = sample_cone(W, W.vertex, cfg.radius, cfg.density, cfg.seed)
    if cfg.eps > 0:
        fld = PerturbationField(W.N, cfg.eps, seed=cfg.field_seed, center=W.vertex)
        fld.certify()
        cloud = perturb(cloud, fld)
    return cloud, W
