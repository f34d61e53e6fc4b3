"""Stratum-ordered ball covers and smooth partitions of unity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import EmptyStratumLadder


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------


@dataclass
class RadiusSchedule:
    """``r(m, k) = c * gamma**m * 2**(-k)``."""

    c: float = 0.05
    gamma: float = 0.5

    def __call__(self, m, k):
        return self.c * self.gamma ** m * 2.0 ** (-k)

    def to_json(self):
        return {"c": self.c, "gamma": self.gamma}


def enlargement(t, m):
    """Factor ``2 - 2**(t - m - 1)`` applied to a type-``t`` ball when excluding type-``m`` centers."""
    return 2.0 - 2.0 ** (t - m - 1)


# ----------------------------------------------------------------------------
# cover
# ----------------------------------------------------------------------------


@dataclass
class Cover:
    """Balls ``B(x_i, r_i)`` with stratum ``m_i`` at step ``k``.

    ``exclusions`` maps a suppressed candidate point index to the id of the
    enlarged lower-stratum ball that suppressed it.
    """

    k: int
    centers: np.ndarray
    radii: np.ndarray
    strata: np.ndarray
    point_index: np.ndarray
    exclusions: dict = field(default_factory=dict)
    schedule: object = None

    def __len__(self):
        return len(self.radii)

    @property
    def N(self):
        return self.centers.shape[1]

    def of_stratum(self, m):
        return np.nonzero(self.strata == m)[0]

    def to_json(self):
        return {"k": self.k, "balls": [{"id": i, "center": self.centers[i].tolist(), "radius": float(self.radii[i]),
                                        "stratum": int(self.strata[i]), "point": int(self.point_index[i])}
                                       for i in range(len(self))],
                "schedule": None if self.schedule is None else self.schedule.to_json()}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, obj):
        b = obj["balls"]
        N = len(b[0]["center"]) if b else 0
        sch = obj.get("schedule")
        return cls(obj["k"], np.array([x["center"] for x in b], float).reshape(-1, N),
                   np.array([x["radius"] for x in b], float), np.array([x["stratum"] for x in b], np.int64),
                   np.array([x["point"] for x in b], np.int64), {}, None if sch is None else RadiusSchedule(**sch))

    def truncated(self, keep):
        """A sub-cover with only the balls in ``keep`` (used as a negative control)."""
        keep = np.asarray(keep)
        return Cover(self.k, self.centers[keep], self.radii[keep], self.strata[keep], self.point_index[keep],
                     {}, self.schedule)


def build_cover(labels, E, k, schedule=None):
    """Greedy maximal separated nets per stratum, in ascending stratum order.

    A labeled-``m`` point is skipped if it lies in an enlarged lower-stratum
    ball ``(2 - 2**(t-m-1)) B_j``; otherwise it becomes a center unless an
    already chosen type-``m`` center is closer than ``r(m, k)``.  Points are
    visited by increasing index.

    Raises
    ------
    EmptyStratumLadder
        If no point carries a label.
    """
    schedule = RadiusSchedule() if schedule is None else schedule
    lab = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    P = E.points if hasattr(E, "points") else np.asarray(E, float)
    ms = sorted(int(m) for m in np.unique(lab) if m >= 0)
    if not ms:
        raise EmptyStratumLadder("no labeled points")
    centers, radii, strata, pidx = [], [], [], []
    exclusions = {}
    for m in ms:
        r = schedule(m, k)
        cand = np.nonzero(lab == m)[0]
        C = P[cand]
        suppressed = np.full(len(cand), -1, dtype=np.int64)
        if centers:
            lowC = np.array(centers)
            lowR = np.array(radii)
            lowS = np.array(strata)
            fac = np.array([enlargement(t, m) for t in lowS])
            tree = cKDTree(lowC)
            near = tree.query_ball_point(C, (fac * lowR).max())
            for a, nb in enumerate(near):
                for j in sorted(nb):
                    if np.linalg.norm(C[a] - lowC[j]) < fac[j] * lowR[j]:
                        suppressed[a] = j
                        break
        for a in np.nonzero(suppressed >= 0)[0]:
            exclusions[int(cand[a])] = int(suppressed[a])
        keep = np.nonzero(suppressed < 0)[0]
        chosen = _greedy_net(C[keep], r)
        for a in chosen:
            centers.append(C[keep[a]])
            radii.append(r)
            strata.append(m)
            pidx.append(int(cand[keep[a]]))
    return Cover(k, np.array(centers, float), np.array(radii, float), np.array(strata, np.int64),
                 np.array(pidx, np.int64), exclusions, schedule)


def _greedy_net(C, r):
    """Indices of a maximal ``r``-separated subset, visiting rows in order."""
    if len(C) == 0:
        return []
    tree = cKDTree(C)
    taken = np.zeros(len(C), dtype=bool)
    blocked = np.zeros(len(C), dtype=bool)
    out = []
    for a in range(len(C)):
        if blocked[a]:
            continue
        out.append(a)
        taken[a] = True
        nb = tree.query_ball_point(C[a], r * (1 - 1e-12))
        blocked[nb] = True
    return out


@dataclass
class CoverReport:
    ok: bool
    separation_ok: bool
    coverage_ok: bool
    overlap_ok: bool
    max_overlap: int
    k_overlap: int
    uncovered: list
    min_lower_multiple: float

    def to_json(self):
        d = self.__dict__.copy()
        d["uncovered"] = self.uncovered[:50]
        return d


def check_cover(cover, labels, E, k_overlap=None, lower_multiple=0.0):
    """Separation, coverage by enlarged balls, bounded overlap and lower-stratum distance."""
    lab = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    P = E.points if hasattr(E, "points") else np.asarray(E, float)
    N = P.shape[1]
    k_overlap = 7 ** N if k_overlap is None else k_overlap
    sep_ok = True
    for m in np.unique(cover.strata):
        ids = cover.of_stratum(m)
        if len(ids) > 1:
            d, _ = cKDTree(cover.centers[ids]).query(cover.centers[ids], k=2)
            sep_ok &= bool(d[:, 1].min() >= cover.radii[ids].min() * (1 - 1e-12))
    uncovered = []
    tree = cKDTree(cover.centers) if len(cover) else None
    rmax = cover.radii.max() if len(cover) else 0.0
    for i in np.nonzero(lab >= 0)[0]:
        m = lab[i]
        ok = False
        for j in tree.query_ball_point(P[i], 2 * rmax):
            t = cover.strata[j]
            d = np.linalg.norm(P[i] - cover.centers[j])
            if (t < m and d < enlargement(t, m) * cover.radii[j]) or (t == m and d < 2 * cover.radii[j]):
                ok = True
                break
        if not ok:
            uncovered.append(int(i))
    cov_ok = not uncovered
    cnt = np.zeros(len(P), dtype=np.int64)
    ptree = cKDTree(P)
    for j in range(len(cover)):
        nb = ptree.query_ball_point(cover.centers[j], 3 * cover.radii[j])
        cnt[nb] += 1
    max_ov = int(cnt.max()) if len(cnt) else 0
    # lower-stratum distance: (dist(p, x_i) - r_i) / r_i over type-t points p, t < m_i
    mult = math.inf
    for m in np.unique(cover.strata):
        low = np.nonzero((lab >= 0) & (lab < m))[0]
        if len(low) == 0:
            continue
        ids = cover.of_stratum(m)
        d, _ = cKDTree(P[low]).query(cover.centers[ids])
        mult = min(mult, float(((d - cover.radii[ids]) / cover.radii[ids]).min()))
    low_ok = mult > lower_multiple
    return CoverReport(ok=bool(sep_ok and cov_ok and max_ov <= k_overlap and low_ok), separation_ok=bool(sep_ok),
                       coverage_ok=cov_ok, overlap_ok=max_ov <= k_overlap, max_overlap=max_ov,
                       k_overlap=int(k_overlap), uncovered=uncovered, min_lower_multiple=mult)


# ----------------------------------------------------------------------------
# partition of unity
# ----------------------------------------------------------------------------


def smoothstep5(s):
    """Quintic smoothstep: 0 for s <= 0, 1 for s >= 1, C^2."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def dsmoothstep5(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s * s * (1.0 - s) ** 2


def bump(s):
    """Radial profile ``1`` on ``[0, 2]``, ``0`` on ``[3, inf)``."""
    return 1.0 - smoothstep5(np.asarray(s, float) - 2.0)


def dbump(s):
    return -dsmoothstep5(np.asarray(s, float) - 2.0)


class PartitionOfUnity:
    """``theta_i = theta~_i / sum_j theta~_j`` with ``theta~_i(x) = bump(|x - x_i| / r_i)``."""

    def __init__(self, cover):
        self.cover = cover
        self.tree = cKDTree(cover.centers) if len(cover) else None
        self.rmax = float(cover.radii.max()) if len(cover) else 0.0

    def raw(self, X):
        """Sparse ``(M, nballs)`` matrix of ``theta~_i``."""
        X = np.atleast_2d(np.asarray(X, float))
        rows, cols, vals = [], [], []
        if self.tree is None:
            return sparse.csr_matrix((len(X), 0))
        nbs = self.tree.query_ball_point(X, 3.0 * self.rmax)
        C, R = self.cover.centers, self.cover.radii
        for a, nb in enumerate(nbs):
            if not nb:
                continue
            nb = np.asarray(nb)
            s = np.linalg.norm(X[a] - C[nb], axis=1) / R[nb]
            v = bump(s)
            sel = v > 0
            rows += [a] * int(sel.sum())
            cols += nb[sel].tolist()
            vals += v[sel].tolist()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(len(X), len(self.cover)))

    def matrix(self, X):
        """Sparse ``(M, nballs)`` matrix of normalized ``theta_i``; zero rows where uncovered."""
        T = self.raw(X)
        s = np.asarray(T.sum(axis=1)).ravel()
        inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
        return sparse.diags(inv) @ T

    def total(self, X):
        return np.asarray(self.raw(X).sum(axis=1)).ravel()

    def gradients(self, X, i, step=None):
        """Centered finite-difference gradient of ``theta_i`` at rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, float))
        step = 1e-4 * self.cover.radii[i] if step is None else step
        G = np.zeros_like(X)
        for d in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[d] = step
            G[:, d] = (self.matrix(X + e)[:, i].toarray().ravel() - self.matrix(X - e)[:, i].toarray().ravel()) / (2 * step)
        return G


def weights(pou, x):
    """Sparse list ``[(i, theta_i(x))]`` of nonzero weights."""
    row = pou.matrix(np.atleast_2d(x)).tocsr()
    return [(int(i), float(v)) for i, v in zip(row.indices, row.data)]
