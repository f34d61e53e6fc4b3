"""Pure numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np


def project_union(pts, A, G, sub_off, cone_of_sub, tol):
    """Project each row of ``pts`` onto the union of the packed cones.

    See :mod:`reifenberg._kernels` for the packing convention.
    """
    pts = np.ascontiguousarray(pts, dtype=float)
    M, N = pts.shape
    best = np.full(M, np.inf)
    q = np.zeros((M, N))
    which = np.zeros(M, dtype=np.int64)
    for s in range(len(sub_off) - 1):
        a, b = sub_off[s], sub_off[s + 1]
        if b == a:
            cand = np.zeros((M, N))
            feas = np.ones(M, dtype=bool)
        else:
            coef = pts @ A[a:b].T
            feas = np.all(coef >= -tol, axis=1)
            cand = np.clip(coef, 0.0, None) @ G[a:b]
        d2 = np.einsum("ij,ij->i", pts - cand, pts - cand)
        upd = feas & (d2 < best)
        best[upd] = d2[upd]
        q[upd] = cand[upd]
        which[upd] = cone_of_sub[s]
    return q, best, which
