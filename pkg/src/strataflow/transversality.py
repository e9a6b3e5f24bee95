"""Transversality decisions.

Pairs of strata are intersected (exactly for affine pieces, by batched
Newton otherwise) and each intersection point is judged by the coplanarity
criterion on the two tangent spaces. A pair is transverse when no
intersection point has coplanar tangents. Angles are the smallest principal
angle between the two normal spaces; an empty intersection counts as pi/2.

Root-finding that stalls close to a root is reported as inconclusive and
never folded into "empty".
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, EmptyStratum, ExhaustedTries, FlowEvaluationFailure, NotAGroup, RankDeficient
from .flows import TranslationFlow
from .linalg import batched_newton, complement, coplanar, orthonormal_rows, transversality_angle, wrap
from .strata import Stratum, StratifiedSet, finite_box, tangent_basis
from .tolerances import DEFAULT

# strict-interior margin for parameter boxes (faces belong to other strata)
BOX_MARGIN = 1e-12
SEED_BASE = 32


def coplanarity_test(t1, t2, n, tols=DEFAULT):
    """True iff ``T1 + T2`` lies in a hyperplane of R^n."""
    return coplanar(t1, t2, n, tols.rank_tol)


def _rows(rep):
    if rep.dim == 0:
        return np.zeros((0, rep.ambient_dim))
    return orthonormal_rows(rep.basis)


@dataclass
class PairResult:
    ids: tuple
    status: str
    min_angle: float
    witnesses: list = field(default_factory=list)
    coplanar_found: bool = False

    @property
    def transverse(self):
        return self.status == "pass"

    @property
    def empty(self):
        return not self.witnesses

    def to_json(self):
        return {"ids": list(self.ids), "status": self.status, "min_angle": self.min_angle,
                "witnesses": [np.asarray(w).tolist() for w in self.witnesses]}


@dataclass
class TransversalityReport:
    status: str
    pairs: list
    params: dict

    @property
    def passed(self):
        return self.status == "pass"

    @property
    def min_angle(self):
        return min((p.min_angle for p in self.pairs), default=np.pi / 2)

    @property
    def witness_count(self):
        return sum(len(p.witnesses) for p in self.pairs)

    @property
    def nonempty(self):
        return any(p.witnesses for p in self.pairs)

    def to_json(self):
        return {"status": self.status, "params": self.params, "pairs": [p.to_json() for p in self.pairs]}


# -- affine pairs -----------------------------------------------------------

class LinearPairKernel:
    """Precomputed solver for ``o1 + shift + a B1 = o2 + b B2`` over many shifts."""

    def __init__(self, rep1, rep2, period=None):
        self.rep1, self.rep2 = rep1, rep2
        self.period = period
        n = rep1.ambient_dim
        self.n = n
        self.mat = np.hstack([rep1.basis.T, -rep2.basis.T]) if (rep1.dim + rep2.dim) else np.zeros((n, 0))
        p = self.mat.shape[1]
        if p:
            u, s, vh = np.linalg.svd(self.mat, full_matrices=True)
            r = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
            self.pinv = (vh[:r].T / s[:r]) @ u[:, :r].T
            self.null = vh[r:]
        else:
            self.pinv = np.zeros((0, n))
            self.null = np.zeros((0, 0))
        self.lower = np.concatenate([rep1.lower, rep2.lower])
        self.upper = np.concatenate([rep1.upper, rep2.upper])
        self.t1 = _rows(rep1)
        self.t2 = _rows(rep2)
        self.angle = transversality_angle(self.t1, self.t2, n)

    def coplanar(self, rank_tol):
        return coplanar(self.t1, self.t2, self.n, rank_tol)

    def solve(self, shifts, res_tol):
        """Return hit mask and witness points for each shift row."""
        shifts = np.atleast_2d(shifts)
        rhs = wrap(self.rep2.offset - self.rep1.offset - shifts, self.period)
        sol = rhs @ self.pinv.T
        res = np.linalg.norm(rhs - sol @ self.mat.T, axis=1)
        res_tol = np.broadcast_to(np.asarray(res_tol, dtype=float), res.shape)
        hit = res <= res_tol
        z = sol.copy()
        k = self.null.shape[0]
        lo, hi = self.lower + BOX_MARGIN, self.upper - BOX_MARGIN
        if k == 0:
            hit &= np.all((z > lo) & (z < hi), axis=1)
        elif k == 1:
            nv = self.null[0]
            cmin = np.full(z.shape[0], -np.inf)
            cmax = np.full(z.shape[0], np.inf)
            for i in range(z.shape[1]):
                if abs(nv[i]) <= 1e-14:
                    hit &= (z[:, i] > lo[i]) & (z[:, i] < hi[i])
                    continue
                a = (lo[i] - z[:, i]) / nv[i]
                b = (hi[i] - z[:, i]) / nv[i]
                cmin = np.maximum(cmin, np.minimum(a, b))
                cmax = np.minimum(cmax, np.maximum(a, b))
            hit &= cmax > cmin
            with np.errstate(invalid="ignore"):
                c = np.where(np.isfinite(cmin) & np.isfinite(cmax), 0.5 * (cmin + cmax),
                             np.where(np.isfinite(cmin), cmin + 1.0, np.where(np.isfinite(cmax), cmax - 1.0, 0.0)))
            c = np.where(hit, c, 0.0)
            z = z + c[:, None] * nv
        else:
            for j in np.flatnonzero(hit):
                ok, zj = _box_feasible(z[j], self.null, lo, hi)
                hit[j] = ok
                if ok:
                    z[j] = zj
        d1 = self.rep1.dim
        pts = self.rep1.offset + shifts + z[:, :d1] @ self.rep1.basis
        return hit, pts


def pair_kernel(rep1, rep2, period=None):
    """Cached ``LinearPairKernel``; affine representations are never mutated."""
    cache = rep1.__dict__.setdefault("_kernels", {})
    key = (id(rep2), period)
    hit = cache.get(key)
    if hit is not None and hit[0] is rep2:
        return hit[1]
    kern = LinearPairKernel(rep1, rep2, period)
    cache[key] = (rep2, kern)
    return kern


def _box_feasible(z0, null, lo, hi):
    """Maximize the slack of ``lo < z0 + c N < hi`` by linear programming."""
    k = null.shape[0]
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    rows, rhs = [], []
    for i in range(z0.size):
        if fin_hi[i]:
            rows.append(np.concatenate([null[:, i], [1.0]]))
            rhs.append(hi[i] - z0[i])
        if fin_lo[i]:
            rows.append(np.concatenate([-null[:, i], [1.0]]))
            rhs.append(z0[i] - lo[i])
    if not rows:
        return True, z0
    cost = np.zeros(k + 1)
    cost[-1] = -1.0
    bounds = [(None, None)] * k + [(None, 1.0)]
    out = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if out.status != 0 or out.x[-1] <= 0.0:
        return False, z0
    return True, z0 + out.x[:k] @ null


def linear_intersection_point(rep1, rep2, offset=None, tols=DEFAULT, period=None):
    kern = LinearPairKernel(rep1, rep2, period)
    shift = np.zeros(rep1.ambient_dim) if offset is None else np.asarray(offset, dtype=float)
    hit, pts = kern.solve(shift[None, :], tols.point_tol)
    return pts[0] if hit[0] else None


# -- general pairs ----------------------------------------------------------

def _seed_grid(lower, upper, total_dim, rng_seed=0):
    lo, hi = finite_box(lower, upper)
    d = lo.size
    if d == 0:
        return np.zeros((1, 0))
    count = SEED_BASE ** min(total_dim, 2)
    per = max(2, int(round(count ** (1.0 / d))))
    if per ** d > 4 * count:
        rng = np.random.default_rng(rng_seed)
        return rng.uniform(lo, hi, size=(count, d))
    axes = [lo[i] + (hi[i] - lo[i]) * (np.arange(per) + 0.5) / per for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


class _EquationSide:
    """A stratum used through its equations (affine or implicit)."""

    def __init__(self, s, period):
        self.s = s
        self.period = period
        rep = s.rep
        if rep.kind == "linear":
            self.normal = complement(rep.basis, s.ambient_dim) if s.dim else np.eye(s.ambient_dim)
            self.tangent = _rows(rep)
            self.coef = np.linalg.pinv(rep.basis) if s.dim else None

    def eq(self, x):
        rep = self.s.rep
        if rep.kind == "linear":
            return wrap(x - rep.offset, self.period) @ self.normal.T
        return rep.eq(x)

    def jac(self, x):
        rep = self.s.rep
        if rep.kind == "linear":
            return np.broadcast_to(self.normal, (x.shape[0],) + self.normal.shape)
        return rep.eq_jac(x)

    def inside(self, x):
        rep = self.s.rep
        if rep.kind == "linear":
            if self.s.dim == 0:
                return np.ones(x.shape[0], dtype=bool)
            c = wrap(x - rep.offset, self.period) @ self.coef
            return np.all((c > rep.lower + BOX_MARGIN) & (c < rep.upper - BOX_MARGIN), axis=1)
        return np.all((x > rep.lower + BOX_MARGIN) & (x < rep.upper - BOX_MARGIN), axis=1)

    def tangent_at(self, x, rank_tol):
        if self.s.rep.kind == "linear":
            return self.tangent
        return self.s.tangent_at_point(x, rank_tol)


def _param_domain(p, eqside):
    """Finite parameter window for the unknown side."""
    rep = p.rep
    lo, hi = rep.lower.copy(), rep.upper.copy()
    if rep.kind == "linear" and eqside.s.rep.kind == "implicit" and not np.all(np.isfinite([lo, hi])):
        elo, ehi = finite_box(eqside.s.rep.lower, eqside.s.rep.upper)
        rad = np.linalg.norm(ehi - elo) + np.linalg.norm(rep.offset - 0.5 * (elo + ehi))
        lo = np.where(np.isfinite(lo), lo, -rad)
        hi = np.where(np.isfinite(hi), hi, rad)
    return lo, hi


def _inside_params(a, lower, upper):
    return np.all((a > lower + BOX_MARGIN) & (a < upper - BOX_MARGIN), axis=1)


def _dedup(points, tol, period):
    kept = []
    for i, x in enumerate(points):
        if all(np.linalg.norm(wrap(x - points[j], period)) > tol for j in kept):
            kept.append(i)
    return kept


def find_intersections(s1, s2, tols=DEFAULT, period=None, root_tol=None):
    """Intersection points of two strata with tangent bases at each.

    Returns ``(list of (x, T1, T2), status)`` with status ``ok`` or
    ``inconclusive``.
    """
    if s1.ambient_dim != s2.ambient_dim:
        raise DimensionMismatch("strata live in different ambient spaces")
    root_tol = tols.point_tol if root_tol is None else root_tol
    k1, k2 = s1.kind, s2.kind
    if k1 == "linear" and k2 == "linear":
        kern = LinearPairKernel(s1.rep, s2.rep, period)
        hit, pts = kern.solve(np.zeros((1, s1.ambient_dim)), root_tol)
        return ([(pts[0], kern.t1, kern.t2)] if hit[0] else []), "ok"
    if k2 in ("linear", "implicit") and k1 != "implicit":
        return _solve_eq_param(s2, s1, tols, period, root_tol, swap=True)
    if k1 in ("linear", "implicit") and k2 != "implicit":
        return _solve_eq_param(s1, s2, tols, period, root_tol, swap=False)
    if k1 == "implicit" and k2 == "implicit":
        return _solve_implicit_pair(s1, s2, tols, period, root_tol)
    return _solve_param_pair(s1, s2, tols, period, root_tol)


def _finish(found, status, tols, period):
    keep = _dedup([f[0] for f in found], tols.point_tol, period)
    return [found[i] for i in keep], status


def _solve_eq_param(es, ps, tols, period, root_tol, swap):
    side = _EquationSide(es, period)
    rep = ps.rep
    lo, hi = _param_domain(ps, side)
    if ps.dim == 0:
        x = rep.map(np.zeros((1, 0)))
        r = float(np.linalg.norm(side.eq(x)[0]))
        if r <= root_tol and side.inside(x)[0]:
            found = [(x[0], ps, np.zeros(0))]
        else:
            found = []
        status = "ok"
    else:
        seeds = _seed_grid(lo, hi, ps.dim + 0)

        def fun(a):
            x = rep.map(a)
            return side.eq(x), np.einsum("mqn,mnd->mqd", side.jac(x), rep.jac(a))

        a, rn, _ = batched_newton(fun, seeds, tol=root_tol, lower=lo, upper=hi)
        x = rep.map(a)
        inside = _inside_params(a, rep.lower, rep.upper) & side.inside(x)
        ok = (rn <= root_tol) & inside
        near = (rn > root_tol) & (rn <= 10 * root_tol) & inside
        found = [(x[i], ps, a[i]) for i in np.flatnonzero(ok)]
        status = "inconclusive" if near.any() else "ok"
    out = []
    for x, p, a in found:
        tp = _safe_tangent(p, a, x, tols)
        te = side.tangent_at(x, tols.rank_tol)
        out.append((x, tp, te) if swap else (x, te, tp))
    return _finish(out, status, tols, period)


def _safe_tangent(s, a, x, tols):
    try:
        return tangent_basis(s, a, x, tols.rank_tol)
    except RankDeficient:
        return np.zeros((0, s.ambient_dim))


def _solve_param_pair(s1, s2, tols, period, root_tol):
    r1, r2 = s1.rep, s2.rep
    d1, d2 = s1.dim, s2.dim
    lo = np.concatenate([r1.lower, r2.lower])
    hi = np.concatenate([r1.upper, r2.upper])
    flo, fhi = finite_box(lo, hi)
    seeds = _seed_grid(flo, fhi, d1 + d2)

    def fun(w):
        a, b = w[:, :d1], w[:, d1:]
        res = wrap(r1.map(a) - r2.map(b), period)
        jac = np.concatenate([r1.jac(a), -r2.jac(b)], axis=2)
        return res, jac

    w, rn, _ = batched_newton(fun, seeds, tol=root_tol, lower=flo, upper=fhi)
    inside = _inside_params(w, lo, hi)
    ok = (rn <= root_tol) & inside
    near = (rn > root_tol) & (rn <= 10 * root_tol) & inside
    out = []
    for i in np.flatnonzero(ok):
        a, b = w[i, :d1], w[i, d1:]
        x = r1.map(a[None])[0]
        out.append((x, _safe_tangent(s1, a, x, tols), _safe_tangent(s2, b, x, tols)))
    return _finish(out, "inconclusive" if near.any() else "ok", tols, period)


def _solve_implicit_pair(s1, s2, tols, period, root_tol):
    r1, r2 = s1.rep, s2.rep
    lo = np.maximum(r1.lower, r2.lower)
    hi = np.minimum(r1.upper, r2.upper)
    if np.any(lo >= hi):
        return [], "ok"
    flo, fhi = finite_box(lo, hi)
    seeds = _seed_grid(flo, fhi, min(s1.ambient_dim, 2))

    def fun(x):
        return np.hstack([r1.eq(x), r2.eq(x)]), np.concatenate([r1.eq_jac(x), r2.eq_jac(x)], axis=1)

    x, rn, _ = batched_newton(fun, seeds, tol=root_tol, lower=flo, upper=fhi)
    inside = np.all((x > lo + BOX_MARGIN) & (x < hi - BOX_MARGIN), axis=1)
    ok = (rn <= root_tol) & inside
    near = (rn > root_tol) & (rn <= 10 * root_tol) & inside
    out = []
    for i in np.flatnonzero(ok):
        try:
            out.append((x[i], s1.tangent_at_point(x[i], tols.rank_tol), s2.tangent_at_point(x[i], tols.rank_tol)))
        except RankDeficient:
            out.append((x[i], np.zeros((0, s1.ambient_dim)), np.zeros((0, s1.ambient_dim))))
    return _finish(out, "inconclusive" if near.any() else "ok", tols, period)


def _judge(ids, found, status, n, tols):
    angles, witnesses, copl = [], [], False
    for x, t1, t2 in found:
        witnesses.append(np.asarray(x))
        is_cop = coplanar(t1, t2, n, tols.rank_tol)
        ang = 0.0 if is_cop else transversality_angle(t1, t2, n)
        copl |= is_cop or ang <= tols.angle_tol
        angles.append(ang)
    min_angle = min(angles) if angles else np.pi / 2
    if copl:
        verdict = "fail"
    elif status == "inconclusive":
        verdict = "inconclusive"
    else:
        verdict = "pass"
    return PairResult(ids, verdict, float(min_angle), witnesses, copl)


def pair_transverse(s1, s2, offset=None, tols=DEFAULT, period=None, root_tol=None):
    """Judge ``(S1 + offset)`` against ``S2``; returns a :class:`PairResult`."""
    if offset is not None and np.any(offset):
        s1 = s1.translated(offset)
    found, status = find_intersections(s1, s2, tols, period, root_tol)
    return _judge((s1.id, s2.id), found, status, s1.ambient_dim, tols)


def pair_intersections(s1, s2, offset=None, tols=DEFAULT, period=None):
    if offset is not None and np.any(offset):
        s1 = s1.translated(offset)
    found, status = find_intersections(s1, s2, tols, period)
    return [f[0] for f in found], status


def _overall(pairs):
    if any(p.status == "fail" for p in pairs):
        return "fail"
    if any(p.status == "inconclusive" for p in pairs):
        return "inconclusive"
    return "pass"


def stratified_transverse(a, b, tols=DEFAULT, root_tol=None):
    """Pairwise transversality over all stratum pairs of ``a`` and ``b``."""
    if a.ambient_dim != b.ambient_dim:
        raise DimensionMismatch("sets live in different ambient spaces")
    period = a.period if a.period is not None else b.period
    pairs = [pair_transverse(s1, s2, None, tols, period, root_tol) for s1 in a.strata for s2 in b.strata]
    params = {"rank_tol": tols.rank_tol, "point_tol": tols.point_tol, "angle_tol": tols.angle_tol}
    if root_tol is not None:
        params["root_tol"] = root_tol
    return TransversalityReport(_overall(pairs), pairs, params)


# -- secants and critical values -------------------------------------------

@dataclass
class SecantSample:
    x: np.ndarray
    u: np.ndarray
    residuals: tuple


def secant_space_sample(s1, s2, count, rng_seed=0, period=None):
    """Samples ``(x, u)`` with ``x`` on S1 and ``x + u`` on S2."""
    if count < 1:
        raise EmptyStratum("secant sampling needs count >= 1")
    rng = np.random.default_rng(rng_seed)
    xs, _ = s1.sample(count, rng)
    ys, _ = s2.sample(count, rng)
    out = []
    for x, y in zip(xs, ys):
        u = y - x
        out.append(SecantSample(x, u, (s1.distance(x, period), s2.distance(x + u, period))))
    return out


def _as_strata(c):
    if isinstance(c, Stratum):
        return [c]
    return list(c.strata)


def critical_value_test(s1, s2, u, tols=DEFAULT, period=None):
    """True iff some ``x`` on S1 has ``x + u`` on S2 with coplanar tangents.

    ``s1``/``s2`` may be strata or stratified sets; ``u`` may be a batch of
    rows, in which case a boolean array is returned. The root tolerance is
    ``point_tol * |u|`` so the answer is invariant under rescaling ``u``.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    us = np.atleast_2d(u)
    tol = tols.point_tol * np.linalg.norm(us, axis=1)
    crit = np.zeros(us.shape[0], dtype=bool)
    for a in _as_strata(s1):
        for b in _as_strata(s2):
            if a.kind == "linear" and b.kind == "linear":
                kern = pair_kernel(a.rep, b.rep, period)
                if not kern.coplanar(tols.rank_tol):
                    continue
                hit, _ = kern.solve(us, tol)
                crit |= hit
                continue
            for j in np.flatnonzero(~crit):
                res = pair_transverse(a, b, us[j], tols, period, max(tol[j], 1e-14))
                crit[j] |= res.coplanar_found
    return bool(crit[0]) if single else crit


def critical_cone_homogeneity(s1, s2, u, scales, tols=DEFAULT):
    base = critical_value_test(s1, s2, u, tols)
    scaled = critical_value_test(s1, s2, np.outer(scales, u), tols)
    return bool(np.all(scaled == base))


def generic_translation_sample(c, rng_seed=0, max_tries=100, tols=DEFAULT):
    """Rejection-sample a unit ``u`` that is a regular value for ``c`` versus itself.

    Returns ``(u, tries)``.
    """
    rng = np.random.default_rng(rng_seed)
    n = c.ambient_dim
    for tries in range(1, max_tries + 1):
        u = rng.standard_normal(n)
        u /= np.linalg.norm(u)
        if not critical_value_test(c, c, u, tols, c.period):
            return u, tries
    raise ExhaustedTries(f"no regular translation in {max_tries} tries", max_tries)


# -- certificates ------------------------------------------------------------

def default_t_grid(eps, count=16):
    return eps * 2.0 ** -np.arange(count)


@dataclass
class CertificateRow:
    t: float
    min_angle: float
    witnesses: int
    pairs_checked: int
    status: str
    nonempty: bool


@dataclass
class Certificate:
    epsilon: float
    rows: list
    kappa_hat: float
    slope: float
    margin: float
    passed: bool
    reason: str = ""

    def to_json(self):
        return {"pass": self.passed, "epsilon": self.epsilon, "kappa_hat": self.kappa_hat,
                "slope": self.slope, "margin": self.margin, "reason": self.reason,
                "rows": [{"t": r.t, "min_angle": r.min_angle, "witnesses": r.witnesses,
                          "pairs_checked": r.pairs_checked, "status": r.status} for r in self.rows]}

    def csv_rows(self):
        return [(r.t, r.min_angle, r.pairs_checked, r.status) for r in self.rows]


# slopes steeper than this mean angles decay faster than linearly in t
SLOPE_CAP = 1.25


def fit_kappa(ts, angles, nonempty, eps):
    """Least-squares fit of log(angle) against log(t) over nonempty rows.

    Returns ``(kappa_hat, slope)``: kappa_hat is the minimum over the grid of
    fitted_angle(t) / t, and zero once the slope exceeds ``SLOPE_CAP``.
    """
    ts = np.asarray(ts, dtype=float)
    angles = np.asarray(angles, dtype=float)
    mask = np.asarray(nonempty, dtype=bool) & (angles > 0)
    if np.any(np.asarray(nonempty) & (angles <= 0)):
        return 0.0, np.nan
    if mask.sum() == 0:
        return np.pi / (2 * eps), 0.0
    if mask.sum() == 1:
        return float(angles[mask][0] / ts[mask][0]), 0.0
    slope, icpt = np.polyfit(np.log(ts[mask]), np.log(angles[mask]), 1)
    if slope > SLOPE_CAP:
        return 0.0, float(slope)
    fitted = np.exp(icpt) * ts ** slope
    return float(np.min(fitted / ts)), float(slope)


def _certify(eps, ts, reports):
    rows = []
    for t, rep in zip(ts, reports):
        rows.append(CertificateRow(float(t), float(rep[0]), int(rep[1]), int(rep[2]), rep[3], bool(rep[4])))
    angles = [r.min_angle for r in rows]
    nonempty = [r.nonempty for r in rows]
    all_pass = all(r.status == "pass" for r in rows)
    kappa, slope = fit_kappa(ts, angles, nonempty, eps)
    margin = float(min(a / t for a, t in zip(angles, ts)))
    bound = all(a >= 0.5 * kappa * t for a, t in zip(angles, ts))
    passed = bool(all_pass and kappa > 0 and bound)
    if not all_pass:
        bad = [r.t for r in rows if r.status != "pass"]
        reason = f"not transverse at t={bad[0]:.3g}" + (f" (+{len(bad) - 1} more)" if len(bad) > 1 else "")
    elif kappa <= 0:
        reason = f"angle decays too fast (slope {slope:.3g})"
    elif not bound:
        reason = "angle drops below half the fitted kappa*t"
    else:
        reason = ""
    return Certificate(float(eps), rows, kappa, slope, margin, passed, reason)


def _all_linear(sset):
    return all(s.kind == "linear" for s in sset.strata)


def _root_tol(disp, tols):
    # relative resolution finer than the sampler's critical test (point_tol |u|)
    return min(tols.point_tol, max(1e-14, 1e-2 * tols.point_tol * disp))


def _displacement(sset, flow, t, rng=0):
    pts = []
    for s in sset.strata:
        if s.kind == "implicit":
            continue
        pts.append(s.sample(8 if s.dim else 1, rng)[0])
    if not pts:
        return abs(t)
    x = np.vstack(pts)
    return float(np.median(np.linalg.norm(wrap(flow.apply(x, t) - x, sset.period), axis=1)))


def _translation_rows(sset, u, ts, tols, base_shift=None):
    """Batched rows for a translation flow acting on an all-affine set."""
    n = sset.ambient_dim
    shifts = np.outer(ts, u)
    if base_shift is not None:
        shifts = shifts + base_shift
    res_tol = np.array([_root_tol(np.linalg.norm(s), tols) for s in shifts])
    m = len(ts)
    min_ang = np.full(m, np.pi / 2)
    wit = np.zeros(m, dtype=int)
    bad = np.zeros(m, dtype=bool)
    pairs = 0
    for a in sset.strata:
        for b in sset.strata:
            pairs += 1
            kern = pair_kernel(a.rep, b.rep, sset.period)
            hit, _ = kern.solve(shifts, res_tol)
            if not hit.any():
                continue
            wit += hit
            is_cop = kern.coplanar(tols.rank_tol)
            ang = 0.0 if is_cop else kern.angle
            min_ang = np.where(hit, np.minimum(min_ang, ang), min_ang)
            if is_cop or ang <= tols.angle_tol:
                bad |= hit
    return [(min_ang[i], wit[i], pairs, "fail" if bad[i] else "pass", wit[i] > 0) for i in range(m)]


def immediate_transversality_verify(sigma, flow, eps, t_grid=None, tols=DEFAULT):
    """Certificate that ``flow^t(sigma)`` is transverse to ``sigma`` on a t-grid."""
    ts = default_t_grid(eps) if t_grid is None else np.asarray(t_grid, dtype=float)
    if isinstance(flow, TranslationFlow) and _all_linear(sigma):
        return _certify(eps, ts, _translation_rows(sigma, flow.u, ts, tols))
    rows = []
    for t in ts:
        try:
            pushed = flow.pushforward_set(sigma, t)
            rt = _root_tol(_displacement(sigma, flow, t), tols)
            rep = stratified_transverse(pushed, sigma, tols, rt)
        except FlowEvaluationFailure:
            raise
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise FlowEvaluationFailure(f"flow evaluation failed at t={t}: {exc}") from exc
        rows.append((rep.min_angle, rep.witness_count, len(rep.pairs), rep.status, rep.nonempty))
    return _certify(eps, ts, rows)


def check_group(sigma, flow, times, tols=DEFAULT, rng=0):
    """Max group-law residual over sample points and time pairs."""
    pts = [s.sample(8 if s.dim else 1, rng)[0] for s in sigma.strata if s.kind != "implicit"]
    x = np.vstack(pts)
    worst = 0.0
    for s in times:
        for t in times:
            worst = max(worst, flow.group_residual(x, s, t))
    return worst


def flow_family_transversality(sigma, flow, t1, t2, grid=8, tols=DEFAULT):
    """``flow^{t2}(sigma)`` transverse to ``flow^t(sigma)`` for t across ``[0, t1]``."""
    if not 0 < t1 < t2:
        raise ValueError("need 0 < t1 < t2")
    resid = check_group(sigma, flow, (t1, t2), tols)
    if resid > tols.point_tol:
        raise NotAGroup(f"group residual {resid:.3g} exceeds point_tol")
    ts = np.linspace(0.0, t1, grid)
    if isinstance(flow, TranslationFlow) and _all_linear(sigma):
        # C + t2 u against C + t u is C + (t2 - t) u against C, shifted rigidly
        rows = _translation_rows(sigma, flow.u, t2 - ts, tols)
        return all(r[3] == "pass" for r in rows)
    top = flow.pushforward_set(sigma, t2)
    for t in ts:
        low = flow.pushforward_set(sigma, t)
        rt = _root_tol(_displacement(sigma, flow, t2 - t), tols)
        if not stratified_transverse(top, low, tols, rt).passed:
            return False
    return True
