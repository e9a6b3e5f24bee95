"""Small linear-algebra kernels: subspaces, angles, batched Newton.

Subspaces are stored as row bases, shape ``(d, n)``.
"""

import numpy as np
from scipy.linalg import subspace_angles

from .errors import DimensionMismatch


def orthonormal_rows(rows, rank_tol=1e-8):
    """Orthonormal row basis of the span of ``rows`` (relative rank cut)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0 or rows.shape[0] == 0:
        return np.zeros((0, rows.shape[-1]))
    _, s, vh = np.linalg.svd(rows, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((0, rows.shape[1]))
    r = int(np.sum(s > rank_tol * s[0]))
    return vh[:r]


def complement(rows, n):
    """Orthonormal basis of the orthogonal complement of ``span(rows)`` in R^n."""
    rows = np.asarray(rows, dtype=float).reshape(-1, n)
    if rows.shape[0] == 0:
        return np.eye(n)
    _, s, vh = np.linalg.svd(rows, full_matrices=True)
    r = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    return vh[r:]


def _basis_rows(t, n):
    t = np.asarray(t, dtype=float)
    if not t.size:
        return np.zeros((0, n))
    if t.shape[-1] != n:
        raise DimensionMismatch(f"bases must live in R^{n}")
    return t.reshape(-1, n)


def coplanar(t1, t2, n, rank_tol=1e-8):
    """True iff ``span(t1) + span(t2)`` lies in a hyperplane of R^n."""
    t1, t2 = (_basis_rows(t, n) for t in (t1, t2))
    stacked = np.vstack([t1, t2])
    if stacked.shape[0] < n:
        return True
    s = np.linalg.svd(stacked, compute_uv=False)
    return bool(s[n - 1] <= rank_tol * s[0])


def transversality_angle(t1, t2, n):
    """Smallest principal angle between the normal spaces of two tangent spaces.

    Zero when the tangents are coplanar, pi/2 when a normal space is trivial.
    """
    n1 = complement(t1, n)
    n2 = complement(t2, n)
    if n1.shape[0] == 0 or n2.shape[0] == 0:
        return np.pi / 2
    if n1.shape[0] + n2.shape[0] > n:
        return 0.0
    return float(np.min(subspace_angles(n1.T, n2.T)))


def wrap(diff, period):
    """Wrap coordinate differences into ``(-p/2, p/2]`` on periodic axes."""
    if period is None:
        return diff
    diff = np.array(diff, dtype=float, copy=True)
    for i, p in enumerate(period):
        if p:
            diff[..., i] = diff[..., i] - p * np.round(diff[..., i] / p)
    return diff


def batched_newton(fun, seeds, tol, max_iter=60, lower=None, upper=None):
    """Minimum-norm Newton iterations run on many seeds at once.

    ``fun(w)`` maps unknowns ``(m, p)`` to ``(residual (m, q), jacobian (m, q, p))``.
    Returns final unknowns, residual norms and a converged mask.
    """
    w = np.array(seeds, dtype=float, copy=True)
    m = w.shape[0]
    active = np.ones(m, dtype=bool)
    res_norm = np.full(m, np.inf)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        r, jac = fun(w[idx])
        rn = np.linalg.norm(r, axis=1)
        res_norm[idx] = rn
        step = -np.einsum("mpq,mq->mp", np.linalg.pinv(jac, rcond=1e-13), r)
        # damp huge steps so seeds do not leave the domain in one jump
        sn = np.linalg.norm(step, axis=1)
        scale = np.where(sn > 1.0, 1.0 / np.maximum(sn, 1e-300), 1.0)
        step = step * scale[:, None]
        w[idx] = w[idx] + step
        if lower is not None:
            w[idx] = np.clip(w[idx], lower - 1.0, upper + 1.0)
        done = (rn <= tol * 1e-3) | (np.linalg.norm(step, axis=1) <= 1e-15 * (1 + np.linalg.norm(w[idx], axis=1)))
        active[idx[done]] = False
    r, _ = fun(w)
    res_norm = np.linalg.norm(r, axis=1)
    return w, res_norm, res_norm <= tol
