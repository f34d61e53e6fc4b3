"""Word regions around the spines of a cone, graph fits and the alignment maps.

For a cone ``W`` of type ``t`` the neighbourhood of ``L^u(W)`` is split into
regions ``O(w)`` indexed by binary words ``w = d_t ... d_s``: a digit ``1``
at position ``j`` means "inside a thin conical neighbourhood of ``L^j``", a
digit ``0`` means "away from ``L^j`` but near the part of ``L^u`` that is far
from it".  Inside a terminal region ``O(w, s)`` only one branch ``L^{u,s}``
is visible, so a nearby surface can be flattened onto (``eta``) or projected
to (``h``) that branch alone.  Every map is blended with the identity by a
quintic ramp in the ratio coordinate of each defining inequality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cone_model import simplex_grid
from .cover import smoothstep5
from .errors import CoverageGap, GraphFitMissing, LipschitzExceeded


# ----------------------------------------------------------------------------
# words
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Word:
    """Binary word ``d_t ... d_s`` with ``d_t = 1``."""

    digits: tuple
    t: int = 0

    def __post_init__(self):
        if not self.digits or self.digits[0] != 1 or any(d not in (0, 1) for d in self.digits):
            raise ValueError(f"invalid word {self.digits!r}")

    @classmethod
    def parse(cls, text, t=0):
        return cls(tuple(int(c) for c in str(text)), t)

    @property
    def s(self):
        """Index of the last digit."""
        return self.t + len(self.digits) - 1

    @property
    def last_one(self):
        """Index of the last digit equal to one."""
        return self.t + max(j for j, d in enumerate(self.digits) if d == 1)

    @property
    def prefix(self):
        return Word(self.digits[:-1], self.t) if len(self.digits) > 1 else None

    def child(self, d):
        return Word(self.digits + (int(d),), self.t)

    def is_terminal(self, u):
        return self.s == u and self.digits[-1] == 1

    def __str__(self):
        return "".join(str(d) for d in self.digits)

    def __repr__(self):
        return f"Word({str(self)!r}, t={self.t})"


def word_lattice(t, u):
    """All admissible words for ``t <= s <= u``, parent before children.

    The traversal visits the ``1`` child before the ``0`` child, so words
    of equal length appear in descending binary order.  A word ending at
    ``u`` must end with ``1``.
    """
    if t > u:
        raise ValueError("need t <= u")
    out = []

    def visit(w):
        out.append(w)
        if w.s == u:
            return
        visit(w.child(1))
        if w.s + 1 < u:
            visit(w.child(0))

    visit(Word((1,), t))
    return out


def terminal_words(t, u):
    """Words of the lattice ending at ``u`` (all end with ``1``)."""
    return [w for w in word_lattice(t, u) if w.s == u]


# ----------------------------------------------------------------------------
# angle schedules
# ----------------------------------------------------------------------------


@dataclass
class AngleSchedule:
    """``theta_{1,1} = first * alpha``, ``beta_s = beta * theta_{s,1}``,
    ``theta_{s,2} = second * theta_{s,1}``, ``theta_{s+1,1} = nxt * alpha * theta_{s,2}``.
    """

    alpha: float
    depth: int
    first: float = 0.01
    beta: float = 0.1
    second: float = 1e-3
    nxt: float = 0.1
    name: str = "custom"
    theta1: np.ndarray = field(init=False, repr=False)
    theta2: np.ndarray = field(init=False, repr=False)
    betas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        depth = max(int(self.depth), 1)
        t1, t2, bb = [], [], []
        th = self.first * self.alpha
        for _ in range(depth):
            t1.append(th)
            bb.append(self.beta * th)
            t2.append(self.second * th)
            th = self.nxt * self.alpha * t2[-1]
        self.theta1 = np.array(t1)
        self.theta2 = np.array(t2)
        self.betas = np.array(bb)

    @classmethod
    def strict(cls, alpha, depth):
        return cls(alpha, depth, 0.01, 0.1, 1e-3, 0.1, "strict")

    @classmethod
    def desk(cls, alpha, depth):
        """Wide wedges usable at sampling resolution (same recursion, larger ratios)."""
        return cls(alpha, depth, 0.25, 0.4, 0.1, 0.25, "desk")

    @classmethod
    def named(cls, name, alpha, depth):
        if name == "strict":
            return cls.strict(alpha, depth)
        if name == "desk":
            return cls.desk(alpha, depth)
        raise ValueError(f"unknown angle schedule {name!r}")

    def th1(self, s):
        return float(self.theta1[s - 1])

    def th2(self, s):
        return float(self.theta2[s - 1])

    def beta_s(self, s):
        return float(self.betas[s - 1])

    def is_decreasing(self):
        """Strict chain ``theta_{s,1} > beta_s > theta_{s,2} > theta_{s+1,1}``."""
        chain = []
        for s in range(len(self.theta1)):
            chain += [self.theta1[s], self.betas[s], self.theta2[s]]
        chain = np.array(chain)
        return bool(np.all(np.diff(chain) < 0))

    def to_json(self):
        return {"name": self.name, "alpha": self.alpha, "depth": int(self.depth),
                "theta1": self.theta1.tolist(), "theta2": self.theta2.tolist(), "beta": self.betas.tolist()}


# ----------------------------------------------------------------------------
# distances to spines, branches and F-sets
# ----------------------------------------------------------------------------

_F_CACHE = {}


def _f_directions(W, u, k1, N1, beta):
    """Unit directions (canonical frame, orthogonal to the product factor) sampling
    ``F = {y in L^u : dist(y, L^{k1}) >= sin(beta) dist(y, L^{N1})}``."""
    key = (id(W.base), W.m, u, k1, N1, round(beta, 15))
    if key in _F_CACHE:
        return _F_CACHE[key]
    W0 = W.with_pose(np.eye(W.N), np.zeros(W.N))
    dirs = []
    for Y in W.faces_of_spine(u):
        G = W.base.face_generators(Y)
        k = len(G)
        if k == 0:
            continue
        res = {1: 1, 2: 720, 3: 80}.get(k, 30)
        V = simplex_grid(k, res) @ G
        V = V / np.linalg.norm(V, axis=1)[:, None]
        dirs.append(V)
    V = np.vstack(dirs) if dirs else np.zeros((0, W.N))
    if len(V):
        keep = W0.dist_spine(V, k1) >= math.sin(beta) * W0.dist_spine(V, N1) - 1e-12
        V = V[keep]
    _F_CACHE[key] = V
    return V


class SpineDistances:
    """Cached distances from a fixed point array to the spines of ``W``."""

    def __init__(self, W, P):
        self.W = W
        self.P = np.atleast_2d(np.asarray(P, float))
        self._spine = {}
        self._branch = {}
        self._F = {}

    def spine(self, j):
        if j not in self._spine:
            if not self.W.faces_of_spine(j):
                self._spine[j] = np.full(len(self.P), np.inf)
            else:
                self._spine[j] = np.atleast_1d(self.W.dist_spine(self.P, j))
        return self._spine[j]

    def branch(self, j, s):
        if (j, s) not in self._branch:
            self._branch[(j, s)] = np.atleast_1d(self.W.project_branch(self.P, j, s)[1])
        return self._branch[(j, s)]

    def F(self, u, k1, N1, beta):
        """Distance to ``F`` (see :func:`_f_directions`).

        Exact when the nearest point of some branch of ``L^u`` lies in ``F``;
        otherwise an upper bound from the angular sampling of ``F``.
        """
        key = (u, k1, N1, beta)
        if key in self._F:
            return self._F[key]
        W, P = self.W, self.P
        best = np.full(len(P), np.inf)
        for s in range(len(W.faces_of_spine(u))):
            q, d = W.project_branch(P, u, s)
            q = np.atleast_2d(q)
            d = np.atleast_1d(d)
            inF = W.dist_spine(q, k1) >= math.sin(beta) * W.dist_spine(q, N1) - 1e-12
            best = np.where(inF, np.minimum(best, d), best)
        V = _f_directions(W, u, k1, N1, beta)
        if len(V):
            pc = W.to_canonical(P)
            _, perp = W._split(pc)
            n2 = np.einsum("ij,ij->i", perp, perp)
            for a in range(0, len(P), 2048):
                dots = np.maximum(perp[a:a + 2048] @ V.T, 0.0).max(axis=1)
                ds = np.sqrt(np.maximum(n2[a:a + 2048] - dots * dots, 0.0))
                best[a:a + 2048] = np.minimum(best[a:a + 2048], ds)
        self._F[key] = best
        return best


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    return np.where(den > 0, r, np.inf)


# ----------------------------------------------------------------------------
# regions
# ----------------------------------------------------------------------------


@dataclass
class RegionSpec:
    """``O^{(lam)}(w)`` or ``O^{(lam)}(w, s)`` for the cone ``cone`` (of type ``t = cone.m``).

    ``u`` is the top spine dimension of the decomposition (defaults to the
    last index of ``word``); the ``F``-sets live on ``L^u``.
    """

    cone: object
    word: Word
    schedule: AngleSchedule
    branch: int = None
    lam: float = 1.0
    u: int = None

    def __post_init__(self):
        if isinstance(self.word, str):
            self.word = Word.parse(self.word, self.cone.m)
        if self.word.t != self.cone.m:
            raise ValueError("word must start at the cone's type")
        if self.u is None:
            self.u = self.word.s
        if self.word.s > self.u:
            raise ValueError("word is longer than the decomposition depth")

    def constraints(self):
        """List of ``(kind, args, theta)``; membership is ``ratio < sin(lam * theta)`` for each."""
        w, t, sch = self.word, self.word.t, self.schedule
        out = []
        for j in range(1, len(w.digits)):
            pre = Word(w.digits[:j], t)
            k1 = t + j
            N1 = pre.last_one
            if w.digits[j] == 1:
                out.append(("spine", (k1, N1), sch.th1(k1 - t)))
            else:
                out.append(("F", (self.u, k1, N1, sch.beta_s(k1 - t)), sch.th2(k1 - t)))
        if self.branch is not None and w.s > t:
            if w.digits[-1] != 1:
                raise ValueError("branch refinement needs a word ending with 1")
            N1 = w.prefix.last_one
            out.append(("branch", (w.s, int(self.branch), N1), sch.th1(w.s - t)))
        return out

    def ratios(self, P, dist=None):
        """``(M, C)`` array of constraint ratios and the ``(C,)`` angles."""
        dist = SpineDistances(self.cone, P) if dist is None else dist
        cons = self.constraints()
        R = np.zeros((len(dist.P), len(cons)))
        th = np.zeros(len(cons))
        for c, (kind, args, theta) in enumerate(cons):
            if kind == "spine":
                num, den = dist.spine(args[0]), dist.spine(args[1])
            elif kind == "F":
                u, k1, N1, beta = args
                num, den = dist.F(u, k1, N1, beta), dist.spine(N1)
            else:
                j, s, N1 = args
                num, den = dist.branch(j, s), dist.spine(N1)
            R[:, c] = _ratio(num, den)
            th[c] = theta
        return R, th

    def contains(self, P, dist=None, lam=None):
        lam = self.lam if lam is None else lam
        R, th = self.ratios(P, dist)
        if R.shape[1] == 0:
            return np.ones(len(R), dtype=bool)
        return np.all(R < np.sin(np.minimum(lam * th, math.pi / 2)), axis=1)

    def blend(self, P, dist=None):
        """Weight equal to 1 on ``O^{(lam/2)}`` and 0 off ``O^{(lam)}``."""
        R, th = self.ratios(P, dist)
        mu = np.ones(len(R))
        for c in range(R.shape[1]):
            a = math.sin(min(self.lam * th[c], math.pi / 2))
            a2 = math.sin(min(0.5 * self.lam * th[c], math.pi / 4))
            mu *= 1.0 - smoothstep5((R[:, c] - a2) / (a - a2))
        return mu

    def scaled(self, lam):
        return RegionSpec(self.cone, self.word, self.schedule, self.branch, lam, self.u)

    def __str__(self):
        b = "" if self.branch is None else f",{self.branch}"
        lam = "" if self.lam == 1.0 else f"^({self.lam:g})"
        return f"O{lam}({self.word}{b})"


def region_contains(spec, p):
    """Membership of one point (or of each row of an array) in the region."""
    P = np.asarray(p, float)
    out = spec.contains(np.atleast_2d(P))
    return bool(out[0]) if P.ndim == 1 else out


def terminal_regions(W, u, schedule, lam=1.0):
    """All ``O^{(lam)}(w, s)`` with ``w`` terminal at ``u``, in processing order."""
    t = W.m
    out = []
    for w in terminal_words(t, u):
        if w.s == t:
            out.append(RegionSpec(W, w, schedule, None, lam, u))
            continue
        for s in range(len(W.faces_of_spine(u))):
            out.append(RegionSpec(W, w, schedule, s, lam, u))
    return out


# ----------------------------------------------------------------------------
# graph fits
# ----------------------------------------------------------------------------


def _wendland(d2, R2):
    q = np.clip(1.0 - d2 / R2, 0.0, None)
    return q ** 4


@dataclass
class GraphFit:
    """Moving-least-squares graph ``phi: P -> P^perp`` over the affine plane ``b + span(B)``.

    ``coords`` are the samples' plane coordinates, ``values`` their normal
    offsets (ambient vectors orthogonal to ``B``).
    """

    origin: np.ndarray
    basis: np.ndarray
    coords: np.ndarray
    values: np.ndarray
    h: float
    kernel: float
    lipschitz_estimate: float
    residual: float = 0.0
    _tree: object = field(default=None, repr=False)
    _source: object = field(default=None, repr=False)
    _index: object = field(default=None, repr=False)

    @property
    def dim(self):
        return self.basis.shape[1]

    def detach(self, source, index):
        """Drop the stored samples and read them from ``source[index]`` on demand.

        Saves memory when many fits share one (immutable) sample array.
        """
        self._source = source
        self._index = np.asarray(index, dtype=np.int32)
        self.coords = None
        self.values = None
        self._tree = None
        return self

    def samples(self):
        """``(coords, values)`` of the defining samples."""
        if self.coords is not None:
            return self.coords, self.values
        S = self._source[self._index]
        Y = (S - self.origin) @ self.basis
        return Y, (S - self.origin) - Y @ self.basis.T

    def project(self, X):
        """Plane coordinates of ambient points."""
        return (np.atleast_2d(X) - self.origin) @ self.basis

    def __call__(self, Z):
        """``phi`` at plane coordinates ``Z`` (rows), as ambient normal vectors."""
        Z = np.atleast_2d(np.asarray(Z, float))
        coords, values = self.samples()
        N = len(self.origin)
        d = self.dim
        if len(Z) == 0:
            return np.zeros((0, N))
        if d == 0 or len(coords) <= d + 1:
            return np.tile(values.mean(0) if len(values) else np.zeros(N), (len(Z), 1))
        tree = self._tree
        if tree is None:
            tree = cKDTree(coords)
            if self.coords is not None:
                self._tree = tree
        kmin = min(len(coords), 2 * (d + 1))
        dk, _ = tree.query(Z, k=kmin)
        dk = dk.reshape(len(Z), -1)[:, -1]
        R = np.maximum(self.kernel, 1.0001 * dk)
        out = np.zeros((len(Z), N))
        order = np.argsort(R)
        # batches of queries with similar radius keep the neighbour lists small
        for a in range(0, len(Z), 256):
            qi = order[a:a + 256]
            rad = R[qi].max()
            nbs = tree.query_ball_point(Z[qi], rad)
            L = max(len(n) for n in nbs)
            idx = np.zeros((len(qi), L), dtype=np.int64)
            msk = np.zeros((len(qi), L), dtype=bool)
            for r_, n in enumerate(nbs):
                idx[r_, : len(n)] = n
                msk[r_, : len(n)] = True
            Y = coords[idx] - Z[qi][:, None, :]
            d2 = np.einsum("qsd,qsd->qs", Y, Y)
            w = np.where(msk, _wendland(d2, (R[qi] ** 2)[:, None]), 0.0)
            Bm = np.concatenate([np.ones(Y.shape[:2] + (1,)), Y / R[qi][:, None, None]], axis=2)
            A = np.einsum("qs,qsa,qsb->qab", w, Bm, Bm)
            A += 1e-10 * np.eye(d + 1)[None] * (w.sum(1)[:, None, None] + 1e-300)
            rhs = np.einsum("qs,qsa,qsn->qan", w, Bm, values[idx])
            sol = np.linalg.solve(A, rhs)
            out[qi] = sol[:, 0, :]
        return out

    def at_points(self, X):
        """``phi(pi(x))`` for ambient points."""
        return self(self.project(X))


def fit_graph(samples, plane, domain=None, tol=None, h=None, kernel=None):
    """Fit a graph over ``plane = (b, B)`` to ambient ``samples``.

    Parameters
    ----------
    samples : (M, N) array or PointCloud
    plane : (b, B) with ``B`` orthonormal columns
    domain : (K, N) array, optional
        Ambient points whose projections must be within ``3 h`` of a
        projected sample.
    tol : float, optional
        Maximal accepted Lipschitz estimate.
    h : float, optional
        Sampling radius; the median projected nearest-neighbour distance by default.
    kernel : float, optional
        MLS kernel radius, ``4 h`` by default.

    Raises
    ------
    CoverageGap, LipschitzExceeded
    """
    S = samples.points if hasattr(samples, "points") else np.atleast_2d(np.asarray(samples, float))
    b, B = plane
    b = np.asarray(b, float)
    B = np.asarray(B, float).reshape(len(b), -1)
    Y = (S - b) @ B
    V = (S - b) - Y @ B.T
    d = B.shape[1]
    if h is None:
        if d and len(Y) > 1:
            dn, _ = cKDTree(Y).query(Y, k=2)
            h = float(np.median(dn[:, 1]))
        else:
            h = 0.0
    kernel = 4.0 * h if kernel is None else kernel
    if domain is not None and d and len(Y):
        Dm = (np.atleast_2d(np.asarray(domain, float)) - b) @ B
        gap, _ = cKDTree(Y).query(Dm)
        if gap.max() > 3.0 * h:
            raise CoverageGap(f"domain point {gap.max():.3g} from the nearest sample (3h = {3 * h:.3g})")
    lip = 0.0
    if d and len(Y) > 1:
        pairs = cKDTree(Y).query_pairs(max(kernel, 1e-300), output_type="ndarray")
        if len(pairs) > 200_000:
            pairs = pairs[np.random.default_rng(0).choice(len(pairs), 200_000, replace=False)]
        if len(pairs):
            dy = np.linalg.norm(Y[pairs[:, 0]] - Y[pairs[:, 1]], axis=1)
            dv = np.linalg.norm(V[pairs[:, 0]] - V[pairs[:, 1]], axis=1)
            ok = dy > 1e-12
            if np.any(~ok & (dv > 1e-12)):
                lip = math.inf
            elif ok.any():
                lip = float((dv[ok] / dy[ok]).max())
    fit = GraphFit(b, B, Y, V, float(h), float(kernel), lip)
    if len(Y):
        sub = np.arange(len(Y)) if len(Y) <= 400 else np.linspace(0, len(Y) - 1, 400).astype(int)
        fit.residual = float(np.linalg.norm(fit(Y[sub]) - V[sub], axis=1).max())
    if tol is not None and lip > tol:
        raise LipschitzExceeded(f"Lipschitz estimate {lip:.3g} exceeds {tol:.3g}")
    return fit


# ----------------------------------------------------------------------------
# maps
# ----------------------------------------------------------------------------


class Map:
    """Vectorised map of ``R^N`` (rows in, rows out)."""

    def __call__(self, X):
        raise NotImplementedError

    def describe(self):
        return type(self).__name__


class IdentityMap(Map):
    def __call__(self, X):
        return np.array(np.atleast_2d(X), float)


class ComposedMap(Map):
    """``maps[-1] o ... o maps[0]``."""

    def __init__(self, maps):
        self.maps = list(maps)

    def __call__(self, X):
        Y = np.array(np.atleast_2d(X), float)
        for mp in self.maps:
            Y = mp(Y)
        return Y

    def describe(self):
        return " o ".join(m.describe() for m in reversed(self.maps)) or "id"


class PlaneProjection(Map):
    """``x - mu(x) (x - pi(x))`` with ``pi`` the orthogonal projection to ``b + span(B)``."""

    def __init__(self, b, B, region=None):
        self.b = np.asarray(b, float)
        self.B = np.asarray(B, float)
        self.region = region

    def __call__(self, X):
        X = np.array(np.atleast_2d(X), float)
        Y = X - self.b
        off = Y - (Y @ self.B) @ self.B.T
        if self.region is None:
            return X - off
        mu = self.region.blend(X)
        return X - mu[:, None] * off

    def describe(self):
        return "pi" if self.region is None else f"pi[{self.region}]"


class GraphFlattening(Map):
    """``x - mu(x) phi(pi(x))`` for a fitted graph ``phi``."""

    def __init__(self, fit, region=None):
        self.fit = fit
        self.region = region

    def __call__(self, X):
        X = np.array(np.atleast_2d(X), float)
        if self.region is None:
            return X - self.fit.at_points(X)
        mu = self.region.blend(X)
        act = mu > 0
        if act.any():
            X[act] -= mu[act, None] * self.fit.at_points(X[act])
        return X

    def describe(self):
        return "tau" if self.region is None else f"tau[{self.region}]"


@dataclass
class ContractReport:
    """Measured constants of an alignment map (never fatal)."""

    displacement: float = 0.0
    displacement_ratio: float = 0.0
    jacobian_dev: float = 0.0
    landing: dict = field(default_factory=dict)
    branch_counts: dict = field(default_factory=dict)
    lipschitz: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_json(self):
        return {k: v for k, v in self.__dict__.items()}


# ----------------------------------------------------------------------------
# eta, h, psi
# ----------------------------------------------------------------------------


def _near_index(G, x, R):
    if G is None or len(G) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.nonzero(np.einsum("ij,ij->i", G - x, G - x) < R * R)[0]


def _near(G, x, R):
    if G is None or len(G) == 0:
        return np.zeros((0, len(x)))
    return G[_near_index(G, x, R)]


def branch_assignment(W, P, u):
    """Index of the nearest branch of ``L^u(W)`` for each row (the branch correspondence)."""
    if len(P) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.atleast_1d(W.project_spine(P, u)[2])


def build_eta(W, gammas, u, schedule, h, center, radius, lipschitz_tol=None, min_samples=None,
              check=False, probes=200, seed=0):
    """``eta^u`` for a ball ``B(center, radius)`` whose model ``W`` has type ``t = W.m``.

    Parameters
    ----------
    W : ConeSet
        The ball's model cone; ``L^t(W)`` passes near ``center``.
    gammas : dict
        ``gammas[j]`` are current samples of the surface ``Gamma^j`` (rows).
    u : int
        Target spine dimension (``t <= u``).
    schedule : AngleSchedule
    h : float
        Sampling radius of the ``gammas``.

    Returns
    -------
    (Map, ContractReport)

    Raises
    ------
    GraphFitMissing
        If ``Gamma^t`` has no samples near the ball.
    """
    t = W.m
    x = np.asarray(center, float)
    R5 = 5.0 * radius
    rep = ContractReport()
    if u < t:
        return IdentityMap(), rep
    min_samples = 3 if min_samples is None else min_samples
    # The type-t model describes the data only away from Gamma^{t-1}; samples
    # beyond 2h short of it belong to branches the model does not have.
    low = gammas.get(t - 1) if t > 0 else None
    if low is not None and len(low):
        dl = float(np.sqrt(np.einsum("ij,ij->i", low - x, low - x).min()))
        R5 = max(min(R5, dl - 2.0 * h), radius)
    maps = []
    if t > 0:
        src = gammas.get(t)
        idx = _near_index(src, x, R5)
        if len(idx) < 2:
            raise GraphFitMissing(f"no Gamma^{t} samples near the ball")
        b, B = W.branches(t)[0].plane
        fit = fit_graph(src[idx], (b, B), h=h, tol=lipschitz_tol).detach(src, idx)
        maps.append(GraphFlattening(fit, None))
        rep.lipschitz[f"{t}"] = fit.lipschitz_estimate
        rep.branch_counts[t] = 1
    for v in range(t + 1, u + 1):
        G = _near(gammas.get(v), x, R5)
        cur = ComposedMap(maps)(G) if maps else G.copy()
        br = W.branches(v)
        seen = set()
        for spec in terminal_regions(W, v, schedule):
            if spec.branch is None:
                continue
            s = spec.branch
            sel = branch_assignment(W, cur, v) == s
            if sel.sum() < min_samples:
                continue
            seen.add(s)
            fit = fit_graph(cur[sel], br[s].plane, h=h, tol=lipschitz_tol)
            mp = GraphFlattening(fit, spec)
            cur = mp(cur)
            maps.append(mp)
            rep.lipschitz[f"{v}:{spec.word}:{s}"] = fit.lipschitz_estimate
        rep.branch_counts[v] = len(seen)
    eta = ComposedMap(maps) if maps else IdentityMap()
    if check:
        _check_contracts(eta, W, gammas, u, h, x, radius, rep, probes, seed)
    return eta, rep


def build_h(W, m, schedule):
    """Branchwise projection onto ``L^m(W)`` in the terminal regions, identity elsewhere."""
    t = W.m
    if m == t:
        b, B = W.branches(t)[0].plane
        return PlaneProjection(b, B, None)
    br = W.branches(m)
    maps = [PlaneProjection(*br[spec.branch].plane, region=spec) for spec in terminal_regions(W, m, schedule)
            if spec.branch is not None]
    return ComposedMap(maps)


def build_psi(W, gammas, m, schedule, h, center, radius, lipschitz_tol=None, check=False, probes=200, seed=0):
    """``psi^m = h o eta^{m-1}`` for a ball whose model has type ``t = W.m``.

    Identity when ``t > m``; the orthogonal projection onto ``L^m(W)`` when
    ``t = m``.
    """
    t = W.m
    rep = ContractReport()
    if t > m:
        return IdentityMap(), rep
    if t == m:
        return build_h(W, m, schedule), rep
    eta, rep = build_eta(W, gammas, m - 1, schedule, h, center, radius, lipschitz_tol, check=False)
    psi = ComposedMap([eta, build_h(W, m, schedule)])
    if check:
        _check_contracts(psi, W, gammas, m, h, np.asarray(center, float), radius, rep, probes, seed)
    return psi, rep


def _check_contracts(mp, W, gammas, u, h, x, radius, rep, probes, seed):
    """Displacement, Jacobian deviation off ``L^{u-1}`` and landing of each ``Gamma^s``."""
    rng = np.random.default_rng(seed)
    N = len(x)
    t = W.m
    R49 = 4.9 * radius
    pts = []
    for s in range(t, u + 1):
        G = _near(gammas.get(s), x, R49)
        if len(G):
            pts.append(G[rng.choice(len(G), min(len(G), probes), replace=False)])
    P = np.vstack(pts) if pts else np.zeros((0, N))
    if len(P):
        disp = np.linalg.norm(mp(P) - P, axis=1)
        rep.displacement = float(disp.max())
        rep.displacement_ratio = rep.displacement / radius
        low = W.dist_spine(P, u - 1) if u - 1 >= t else np.full(len(P), np.inf)
        off = np.atleast_1d(low) > 4.0 * h
        Q = P[off][: min(int(off.sum()), 60)]
        step = 1e-6 * radius
        dev = 0.0
        for q in Q:
            J = np.zeros((N, N))
            for d in range(N):
                e = np.zeros(N)
                e[d] = step
                J[:, d] = (mp(q + e)[0] - mp(q - e)[0]) / (2 * step)
            dev = max(dev, float(np.linalg.norm(J - np.eye(N), 2)))
        rep.jacobian_dev = dev
    for s in range(t, u + 1):
        G = _near(gammas.get(s), x, R49)
        if len(G) == 0:
            continue
        img = mp(G)
        d = np.atleast_1d(W.dist_spine(img, s))
        rep.landing[s] = float(d.max())
        if d.max() > 3.0 * h:
            rep.violations.append({"contract": f"landing L^{s}", "value": float(d.max()), "cap": 3.0 * h})
