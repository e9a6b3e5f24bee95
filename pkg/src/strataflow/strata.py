"""Strata, stratified sets, links, radial cones and cone bundles.

All geometric objects are finitely sampled but carry exact evaluators, so
tangent spaces and intersections can be computed to machine precision.
Points are rows: a batch of points in R^n has shape ``(m, n)``.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from . import catalog
from .errors import (
    CocycleViolation,
    DimensionMismatch,
    EmptyStratum,
    InvalidScale,
    NoTransverseSubtube,
    NotDisjoint,
    NotTransverse,
    PointOffStratum,
    RankDeficient,
    StrataflowError,
)
from .linalg import batched_newton, complement, orthonormal_rows, wrap
from .tolerances import DEFAULT

# default half-width used to sample unbounded parameter directions
_UNBOUNDED_SPAN = 1.0


def _box(lower, upper, d):
    lo = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=float).reshape(d)
    hi = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float).reshape(d)
    return lo, hi


def finite_box(lower, upper):
    """Replace infinite bounds by a finite sampling window."""
    lo = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper - 2 * _UNBOUNDED_SPAN, -_UNBOUNDED_SPAN))
    hi = np.where(np.isfinite(upper), upper, np.where(np.isfinite(lower), lower + 2 * _UNBOUNDED_SPAN, _UNBOUNDED_SPAN))
    return lo, hi


def strictly_inside(a, lower, upper, tol):
    """Open-box membership (finite faces are frontier, not part of the stratum)."""
    a = np.atleast_2d(a)
    return np.all((a > lower + tol) & (a < upper - tol), axis=1)


def _as_params(a, d):
    a = np.asarray(a, dtype=float)
    if d == 0:
        return np.zeros((a.shape[0] if a.ndim == 2 else 1, 0))
    return a.reshape(-1, d)


class Linear:
    """Affine piece ``offset + a @ basis`` with ``a`` in an open box."""

    kind = "linear"

    def __init__(self, basis, offset, lower=None, upper=None, closure_faces=None):
        offset = np.asarray(offset, dtype=float).ravel()
        n = offset.size
        basis = np.asarray(basis, dtype=float).reshape(-1, n) if np.size(basis) else np.zeros((0, n))
        self.basis = basis
        self.offset = offset
        self.lower, self.upper = _box(lower, upper, basis.shape[0])
        self.closure_faces = closure_faces

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def ambient_dim(self):
        return self.offset.size

    def map(self, a):
        a = _as_params(a, self.dim)
        return self.offset + a @ self.basis

    def jac(self, a):
        m = _as_params(a, self.dim).shape[0]
        return np.broadcast_to(self.basis.T, (m, self.ambient_dim, self.dim))

    def translated(self, offset):
        return Linear(self.basis, self.offset + np.asarray(offset, dtype=float),
                      self.lower, self.upper, self.closure_faces)


class Param:
    """Parametrized piece ``a -> fn(a)`` for ``a`` in an open box."""

    kind = "param"

    def __init__(self, fn, dim, ambient_dim, lower=None, upper=None, jac=None,
                 evaluator=None, params=None, closure_faces=None):
        self._fn = fn
        self._jac = jac
        self._dim = int(dim)
        self._ambient_dim = int(ambient_dim)
        self.lower, self.upper = _box(lower, upper, self._dim)
        self.evaluator = evaluator
        self.params = params or {}
        self.closure_faces = closure_faces

    @classmethod
    def from_catalog(cls, name, params, dim, ambient_dim, lower=None, upper=None, closure_faces=None):
        fn, jac = catalog.build("param", name, params)
        return cls(fn, dim, ambient_dim, lower, upper, jac=jac, evaluator=name, params=params,
                   closure_faces=closure_faces)

    @property
    def dim(self):
        return self._dim

    @property
    def ambient_dim(self):
        return self._ambient_dim

    def map(self, a):
        return self._fn(np.asarray(a, dtype=float).reshape(-1, self._dim))

    def jac(self, a):
        a = np.asarray(a, dtype=float).reshape(-1, self._dim)
        if self._jac is not None:
            return self._jac(a)
        return catalog.fd_jacobian(self._fn, a)

    def translated(self, offset):
        offset = np.asarray(offset, dtype=float)
        fn, jac = self._fn, self._jac
        return Param(lambda a: fn(a) + offset, self._dim, self._ambient_dim, self.lower, self.upper,
                     jac=jac, closure_faces=self.closure_faces)


class Implicit:
    """Piece ``{x in open domain box : fn(x) = 0}`` with a submersive ``fn``."""

    kind = "implicit"

    def __init__(self, fn, codim, ambient_dim, lower=None, upper=None, jac=None,
                 evaluator=None, params=None):
        self._fn = fn
        self._jac = jac
        self.codim = int(codim)
        self._ambient_dim = int(ambient_dim)
        self.lower, self.upper = _box(lower, upper, self._ambient_dim)
        self.evaluator = evaluator
        self.params = params or {}

    @classmethod
    def from_catalog(cls, name, params, codim, ambient_dim, lower=None, upper=None):
        fn, jac = catalog.build("implicit", name, params)
        return cls(fn, codim, ambient_dim, lower, upper, jac=jac, evaluator=name, params=params)

    @property
    def dim(self):
        return self._ambient_dim - self.codim

    @property
    def ambient_dim(self):
        return self._ambient_dim

    def eq(self, x):
        return self._fn(np.atleast_2d(np.asarray(x, dtype=float)))

    def eq_jac(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._jac is not None:
            return self._jac(x)
        return catalog.fd_jacobian(self._fn, x)

    def translated(self, offset):
        offset = np.asarray(offset, dtype=float)
        fn, jac = self._fn, self._jac
        return Implicit(lambda x: fn(x - offset), self.codim, self._ambient_dim,
                        self.lower + offset, self.upper + offset,
                        jac=None if jac is None else (lambda x: jac(x - offset)))


@dataclass
class Stratum:
    id: str
    dim: int
    ambient_dim: int
    rep: object

    def __post_init__(self):
        if self.rep.dim != self.dim or self.rep.ambient_dim != self.ambient_dim:
            raise DimensionMismatch(
                f"stratum {self.id}: rep has dim {self.rep.dim} in R^{self.rep.ambient_dim}, "
                f"declared {self.dim} in R^{self.ambient_dim}")
        if not 0 <= self.dim <= self.ambient_dim:
            raise DimensionMismatch(f"stratum {self.id}: need 0 <= dim <= ambient_dim")

    @property
    def kind(self):
        return self.rep.kind

    def translated(self, offset, new_id=None):
        return Stratum(new_id or self.id, self.dim, self.ambient_dim, self.rep.translated(offset))

    # -- sampling ---------------------------------------------------------

    def sample(self, count, rng, period=None):
        """Return ``(points, params)``; params is None for implicit pieces."""
        if count < 1:
            raise EmptyStratum("sample count must be positive")
        rng = np.random.default_rng(rng)
        if self.kind == "implicit":
            return self._sample_implicit(count, rng), None
        lo, hi = finite_box(self.rep.lower, self.rep.upper)
        a = rng.uniform(lo, hi, size=(count, self.dim)) if self.dim else np.zeros((count, 0))
        return self.rep.map(a), a

    def grid(self, per_dim):
        """Regular parameter grid strictly inside the box (pieces with params)."""
        lo, hi = finite_box(self.rep.lower, self.rep.upper)
        if self.dim == 0:
            return np.zeros((1, 0))
        axes = [lo[i] + (hi[i] - lo[i]) * (np.arange(per_dim) + 0.5) / per_dim for i in range(self.dim)]
        return np.array(list(product(*axes)), dtype=float)

    def _sample_implicit(self, count, rng):
        rep = self.rep
        lo, hi = finite_box(rep.lower, rep.upper)
        out = []
        for _ in range(50):
            x0 = rng.uniform(lo, hi, size=(4 * count, self.ambient_dim))

            def fun(w):
                return rep.eq(w), rep.eq_jac(w)

            x, _, ok = batched_newton(fun, x0, tol=1e-12)
            ok &= np.all((x > rep.lower) & (x < rep.upper), axis=1)
            out.extend(x[ok])
            if len(out) >= count:
                return np.array(out[:count])
        if not out:
            raise EmptyStratum(f"could not sample implicit stratum {self.id}")
        return np.array(out)

    # -- projection -------------------------------------------------------

    def locate(self, x, period=None, tol=DEFAULT.point_tol):
        """Nearest parameter (or point, for implicit pieces) and distance."""
        x = np.asarray(x, dtype=float).ravel()
        rep = self.rep
        if self.kind == "implicit":
            r = float(np.linalg.norm(rep.eq(x[None, :])[0]))
            inside = bool(np.all((x > rep.lower - tol) & (x < rep.upper + tol)))
            return x, r if inside else np.inf
        if self.kind == "linear":
            d = wrap(x - rep.offset, period)
            if self.dim == 0:
                return np.zeros(0), float(np.linalg.norm(d))
            a = np.linalg.lstsq(rep.basis.T, d, rcond=None)[0]
            a_c = np.clip(a, rep.lower, rep.upper)
            return a_c, float(np.linalg.norm(wrap(rep.map(a_c)[0] - x, period)))
        seeds = self.grid(24 if self.dim == 1 else 12)
        dist = np.linalg.norm(wrap(rep.map(seeds) - x, period), axis=1)
        best = seeds[np.argsort(dist)[:4]]

        def fun(w):
            return wrap(rep.map(w) - x, period), rep.jac(w)

        w, _, _ = batched_newton(fun, best, tol=1e-14, max_iter=40)
        w = np.clip(w, rep.lower, rep.upper)
        d = np.linalg.norm(wrap(rep.map(w) - x, period), axis=1)
        i = int(np.argmin(d))
        return w[i], float(d[i])

    def distance(self, x, period=None):
        return self.locate(x, period)[1]

    def tangent_at_param(self, a):
        """Orthonormal tangent rows at a parameter (non-implicit pieces)."""
        jac = self.rep.jac(np.asarray(a, dtype=float).reshape(1, self.dim))[0]
        return jac.T

    def tangent_at_point(self, x, rank_tol=DEFAULT.rank_tol):
        jac = self.rep.eq_jac(np.asarray(x, dtype=float)[None, :])[0]
        return _kernel_rows(jac, self.dim, rank_tol, self.id)


def _kernel_rows(jac, dim, rank_tol, sid):
    n = jac.shape[1]
    _, s, vh = np.linalg.svd(jac, full_matrices=True)
    if s.size and (s[-1] <= rank_tol * s[0]):
        raise RankDeficient(f"stratum {sid}: equations not regular")
    return vh[n - dim:] if dim else np.zeros((0, n))


def _image_rows(jac_cols, dim, rank_tol, sid):
    if dim == 0:
        return np.zeros((0, jac_cols.shape[0]))
    u, s, _ = np.linalg.svd(jac_cols, full_matrices=False)
    if s[-1] <= rank_tol * s[0]:
        raise RankDeficient(f"stratum {sid}: parametrization not immersive")
    return u.T[:dim]


def tangent_space(s, x, period=None, tols=DEFAULT):
    """Orthonormal basis (rows) of the tangent space of ``s`` at ``x``."""
    a, dist = s.locate(x, period, tols.point_tol)
    if dist > tols.point_tol:
        raise PointOffStratum(f"point is {dist:.3g} away from stratum {s.id}")
    return tangent_basis(s, a, x, tols.rank_tol)


def tangent_basis(s, a, x, rank_tol=DEFAULT.rank_tol):
    if s.kind == "implicit":
        return s.tangent_at_point(x, rank_tol)
    if s.kind == "linear":
        return orthonormal_rows(s.rep.basis, rank_tol) if s.dim else np.zeros((0, s.ambient_dim))
    jac = s.rep.jac(np.asarray(a, dtype=float).reshape(1, s.dim))[0]
    return _image_rows(jac, s.dim, rank_tol, s.id)


# -- stratified sets ------------------------------------------------------

@dataclass
class StratifiedSet:
    """Finite family of strata with a frontier order ``lo`` adheres to ``hi``."""

    ambient_dim: int
    strata: list
    frontier: list = field(default_factory=list)
    period: tuple = None

    def __post_init__(self):
        ids = [s.id for s in self.strata]
        if len(set(ids)) != len(ids):
            raise StrataflowError("duplicate stratum ids")
        for s in self.strata:
            if s.ambient_dim != self.ambient_dim:
                raise DimensionMismatch(f"stratum {s.id} lives in R^{s.ambient_dim}")
        self.frontier = [tuple(p) for p in self.frontier]
        lookup = self.by_id
        for lo, hi in self.frontier:
            if lo not in lookup or hi not in lookup:
                raise StrataflowError(f"frontier pair ({lo}, {hi}) names unknown strata")
            if lo == hi:
                raise StrataflowError("frontier order must be irreflexive")
            if lookup[lo].dim >= lookup[hi].dim:
                raise StrataflowError(f"frontier {lo} < {hi} needs increasing dimension")
        _check_acyclic(ids, self.frontier)
        if self.period is not None:
            self.period = tuple(self.period)

    @property
    def by_id(self):
        return {s.id: s for s in self.strata}

    def skeleton(self, k):
        """Union of strata of dimension at most ``k``."""
        return StratifiedSet(self.ambient_dim, [s for s in self.strata if s.dim <= k],
                             [p for p in self.frontier if self.by_id[p[1]].dim <= k], self.period)

    def predecessors(self, sid):
        return [lo for lo, hi in self.frontier if hi == sid]

    def translated(self, offset):
        return StratifiedSet(self.ambient_dim, [s.translated(offset) for s in self.strata],
                             list(self.frontier), self.period)

    def check_closure(self, samples=32, rng=0, point_tol=DEFAULT.point_tol):
        """Sampled frontier check: box faces map into frontier predecessors."""
        rng = np.random.default_rng(rng)
        lookup = self.by_id
        worst = 0.0
        for s in self.strata:
            if s.kind == "implicit" or s.dim == 0:
                continue
            preds = [lookup[p] for p in self.predecessors(s.id)]
            for pts in _face_points(s, samples, rng):
                for x in pts:
                    d = min((p.distance(x, self.period) for p in preds), default=np.inf)
                    worst = max(worst, d)
        return worst <= point_tol, worst


def _face_points(s, samples, rng):
    rep = s.rep
    faces = rep.closure_faces
    if faces is None:
        faces = [(i, side) for i in range(s.dim) for side in ("lower", "upper")
                 if np.isfinite(getattr(rep, side)[i])]
    lo, hi = finite_box(rep.lower, rep.upper)
    for i, side in faces:
        a = rng.uniform(lo, hi, size=(samples, s.dim))
        a[:, i] = rep.lower[i] if side == "lower" else rep.upper[i]
        yield rep.map(a)


def _check_acyclic(ids, edges):
    children = {i: [] for i in ids}
    for lo, hi in edges:
        children[lo].append(hi)
    state = {}

    def visit(v):
        state[v] = 1
        for w in children[v]:
            if state.get(w) == 1:
                raise StrataflowError("frontier order has a cycle")
            if w not in state:
                visit(w)
        state[v] = 2

    for v in ids:
        if v not in state:
            visit(v)


@dataclass
class Link:
    """Stratified subset of the unit sphere ``S^{m-1}``."""

    ambient_sphere_dim: int
    set: StratifiedSet

    def __post_init__(self):
        if self.set.ambient_dim != self.ambient_sphere_dim + 1:
            raise DimensionMismatch("link must live in R^(sphere_dim + 1)")

    @property
    def strata(self):
        return self.set.strata

    def check_unit(self, samples=64, rng=0, point_tol=DEFAULT.point_tol):
        worst = 0.0
        for s in self.set.strata:
            pts, _ = s.sample(samples, rng)
            worst = max(worst, float(np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0))))
        return worst <= point_tol, worst

    def sample(self, per_stratum=64, rng=0):
        pts = [s.sample(per_stratum if s.dim else 1, rng)[0] for s in self.set.strata]
        return np.vstack(pts) if pts else np.zeros((0, self.set.ambient_dim))


def point_link(points):
    """Link made of finitely many unit vectors."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = points.shape[1]
    strata = [Stratum(f"p{i}", 0, m, Linear(np.zeros((0, m)), p / np.linalg.norm(p)))
              for i, p in enumerate(points)]
    return Link(m - 1, StratifiedSet(m, strata))


def empty_link(m):
    return Link(m - 1, StratifiedSet(m, []))


@dataclass
class RadialCone:
    """Radial cone over a link, truncated at ``truncation_radius``."""

    link: Link
    vertex: np.ndarray = None
    truncation_radius: float = 1.0

    def __post_init__(self):
        m = self.link.set.ambient_dim
        self.vertex = np.zeros(m) if self.vertex is None else np.asarray(self.vertex, dtype=float)

    @property
    def ambient_dim(self):
        return self.link.set.ambient_dim

    def stratified(self, prefix=""):
        m = self.ambient_dim
        v = self.vertex
        radius = self.truncation_radius
        strata = [Stratum(f"{prefix}v", 0, m, Linear(np.zeros((0, m)), v))]
        frontier = []
        cone_id = {}
        for s in self.link.set.strata:
            cid = f"{prefix}c:{s.id}"
            cone_id[s.id] = cid
            if s.kind == "linear" and s.dim == 0:
                rep = Linear(s.rep.offset[None, :], v, [0.0], [radius], closure_faces=[(0, "lower")])
            elif s.kind in ("linear", "param"):
                rep = _cone_param(s, v, radius)
            else:
                raise StrataflowError("radial cones need parametrized link strata")
            strata.append(Stratum(cid, s.dim + 1, m, rep))
            frontier.append((f"{prefix}v", cid))
        for lo, hi in self.link.set.frontier:
            frontier.append((cone_id[lo], cone_id[hi]))
        return StratifiedSet(m, strata, frontier)

    def contains(self, p, completed=False, tol=DEFAULT.point_tol):
        p = np.asarray(p, dtype=float) - self.vertex
        r = float(np.linalg.norm(p))
        if r <= tol:
            return True
        if not completed and r > self.truncation_radius * (1 + tol):
            return False
        u = p / r
        return any(s.distance(u) <= tol for s in self.link.set.strata)

    def sample(self, radial=64, per_stratum=64, rng=0):
        dirs = self.link.sample(per_stratum, rng)
        s = np.linspace(0.0, self.truncation_radius, radial)
        pts = (s[:, None, None] * dirs[None, :, :]).reshape(-1, self.ambient_dim)
        return np.vstack([self.vertex[None, :], pts + self.vertex])


def _cone_param(s, vertex, radius):
    d = s.dim

    def fn(w):
        return vertex + w[:, :1] * s.rep.map(w[:, 1:])

    def jac(w):
        base = s.rep.map(w[:, 1:])
        dl = s.rep.jac(w[:, 1:])
        return np.concatenate([base[:, :, None], w[:, :1, None] * dl], axis=2)

    lower = np.concatenate([[0.0], s.rep.lower])
    upper = np.concatenate([[radius], s.rep.upper])
    return Param(fn, d + 1, vertex.size, lower, upper, jac=jac, closure_faces=[(0, "lower")])


@dataclass
class ConicSet:
    """C^1 cone: image of a radial cone under ``z -> L z + scale |z|^2 w``.

    ``scale`` tracks Alexander rescalings; ``scale = 0`` is the tangent cone.
    """

    cone: RadialCone
    linear: np.ndarray = None
    push: np.ndarray = None
    scale: float = 1.0

    def __post_init__(self):
        m = self.cone.ambient_dim
        self.linear = np.eye(m) if self.linear is None else np.asarray(self.linear, dtype=float)
        self.push = np.zeros(m) if self.push is None else np.asarray(self.push, dtype=float)

    @property
    def is_linear(self):
        return self.scale == 0.0 or not np.any(self.push)

    def chart(self, z):
        z = np.atleast_2d(z)
        return z @ self.linear.T + self.scale * np.sum(z * z, axis=1)[:, None] * self.push

    def chart_unscaled(self, z):
        z = np.atleast_2d(z)
        return z @ self.linear.T + np.sum(z * z, axis=1)[:, None] * self.push

    def sample(self, radial=2048, per_stratum=64, rng=0):
        """Samples of the cone truncated to the unit-radius disc."""
        dirs = self.cone.link.sample(per_stratum, rng)
        radius = self.cone.truncation_radius
        pts = [np.zeros((1, self.cone.ambient_dim))]
        s = np.linspace(0.0, 2.0 * radius, 2 * radial)[1:]
        for d in dirs:
            img = self.chart(s[:, None] * d[None, :])
            pts.append(img[np.linalg.norm(img, axis=1) <= radius])
        return np.vstack(pts) + self.cone.vertex

    def tangent(self):
        return ConicSet(self.cone, self.linear, self.push, 0.0)


def alexander_rescale(c, t):
    """``(1/t) (C' cap t E')`` for a conic set, radial cone or cone bundle."""
    if not (0.0 < t <= 1.0):
        raise InvalidScale(f"scale {t} not in (0, 1]")
    if isinstance(c, RadialCone):
        return c
    if isinstance(c, ConicSet):
        return ConicSet(c.cone, c.linear, c.push, c.scale * t)
    if isinstance(c, ConeBundle):
        return c.rescaled(t)
    raise TypeError(f"cannot rescale {type(c).__name__}")


def hausdorff(p, q):
    return max(directed_hausdorff(p, q)[0], directed_hausdorff(q, p)[0])


def taylor_modulus(c, t, samples=256, nodes=16):
    """Integral-remainder bound on ``|C_t - TC|`` at scale ``t``.

    Evaluates ``sup_z |int_0^1 [D phi(s t z) - D phi(0)] z ds|`` with
    Gauss-Legendre nodes and finite-difference derivatives of the unscaled
    chart (independent of the rescaled map).
    """
    xs, ws = np.polynomial.legendre.leggauss(nodes)
    s_nodes, s_w = 0.5 * (xs + 1.0), 0.5 * ws
    dirs = c.cone.link.sample(max(1, samples // 8), 0)
    radius = c.cone.truncation_radius
    radii = np.linspace(0.0, radius, 8)[1:]
    zs = (radii[:, None, None] * dirs[None]).reshape(-1, c.cone.ambient_dim)
    h = 1e-6
    d0 = catalog.fd_jacobian(c.chart_unscaled, np.zeros((1, zs.shape[1])), h)[0]
    worst = 0.0
    for z in zs:
        pts = (s_nodes * c.scale * t)[:, None] * z[None, :]
        dj = catalog.fd_jacobian(c.chart_unscaled, pts, h)
        integrand = np.einsum("kqp,p->kq", dj - d0, z)
        worst = max(worst, float(np.linalg.norm(s_w @ integrand)))
    return worst


# -- cone bundles ---------------------------------------------------------

def _chart_matrix(spec, m):
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return lambda x: np.broadcast_to(np.eye(m), (x.shape[0], m, m)).copy()
    if kind == "constant":
        mat = np.asarray(spec["matrix"], dtype=float)
        return lambda x: np.broadcast_to(mat, (x.shape[0], m, m)).copy()
    if kind == "rotation":
        rate = float(spec.get("rate", 1.0))
        phase = float(spec.get("phase", 0.0))

        def rot(x):
            ang = rate * x[:, 0] + phase
            c, s = np.cos(ang), np.sin(ang)
            return np.stack([np.stack([c, -s], 1), np.stack([s, c], 1)], 1)

        return rot
    raise StrataflowError(f"unknown chart kind {kind!r}")


@dataclass
class Chart:
    """Trivialization ``phi(x, z) = A(x) z + |z|^2 w`` over a base box."""

    lower: np.ndarray
    upper: np.ndarray
    matrix: dict = field(default_factory=lambda: {"kind": "identity"})
    push: np.ndarray = None

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))


@dataclass
class ConeBundle:
    """Conic subbundle of a trivial disc bundle over ``base``.

    Total-space coordinates are ``(base parameter, fiber vector)``.
    ``transition_offsets[(a, b)]`` injects a constant error into the
    transition from chart ``a`` to chart ``b`` (fault-injection hook).
    """

    base: Stratum
    fiber_cone: RadialCone
    charts: list
    base_period: tuple = None
    transition_offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fiber_dim = self.fiber_cone.ambient_dim
        self._mats = [_chart_matrix(c.matrix, self.fiber_dim) for c in self.charts]

    @property
    def base_dim(self):
        return self.base.dim

    @property
    def total_dim(self):
        return self.base_dim + self.fiber_dim

    @property
    def total_period(self):
        if self.base_period is None:
            return None
        return tuple(self.base_period) + (None,) * self.fiber_dim

    @property
    def is_linear(self):
        return all(c.push is None or not np.any(c.push) for c in self.charts)

    def chart_contains(self, alpha, x):
        c = self.charts[alpha]
        x = np.atleast_2d(x)
        ok = np.all((x > c.lower) & (x < c.upper), axis=1)
        if self.base_period is not None:
            for i, p in enumerate(self.base_period):
                if p:
                    for sh in (-p, p):
                        xs = x.copy()
                        xs[:, i] += sh
                        ok |= np.all((xs > c.lower) & (xs < c.upper), axis=1)
        return ok

    def vertical_derivative(self, alpha, x):
        return self._mats[alpha](np.atleast_2d(x))

    def trivialize(self, alpha, x, z):
        x = np.atleast_2d(x)
        z = np.atleast_2d(z)
        out = np.einsum("mij,mj->mi", self._mats[alpha](x), z)
        w = self.charts[alpha].push
        if w is not None:
            out = out + np.sum(z * z, axis=1)[:, None] * np.asarray(w, dtype=float)
        return out

    def inverse(self, alpha, x, p):
        x = np.atleast_2d(x)
        p = np.atleast_2d(p)
        mats = self._mats[alpha](x)
        z = np.linalg.solve(mats, p[..., None])[..., 0]
        w = self.charts[alpha].push
        if w is None or not np.any(w):
            return z
        w = np.asarray(w, dtype=float)
        for _ in range(50):
            f = np.einsum("mij,mj->mi", mats, z) + np.sum(z * z, axis=1)[:, None] * w - p
            jac = mats + 2 * w[None, :, None] * z[:, None, :]
            dz = np.linalg.solve(jac, f[..., None])[..., 0]
            z = z - dz
            if np.max(np.abs(dz)) < 1e-15:
                break
        return z

    def transition(self, alpha, beta, x, z):
        """``phi_{beta alpha} = phi_beta^{-1} o phi_alpha`` (plus injected offset)."""
        out = self.inverse(beta, x, self.trivialize(alpha, x, z))
        off = self.transition_offsets.get((alpha, beta))
        if off is not None:
            out = out + np.asarray(off, dtype=float)
        return out

    def rescaled(self, t):
        charts = [Chart(c.lower, c.upper, c.matrix, None if c.push is None else np.asarray(c.push) * t)
                  for c in self.charts]
        return ConeBundle(self.base, self.fiber_cone, charts, self.base_period, dict(self.transition_offsets))

    def linear_part(self, radius=None):
        charts = [Chart(c.lower, c.upper, c.matrix, None) for c in self.charts]
        cone = self.fiber_cone
        if radius is not None:
            cone = RadialCone(cone.link, cone.vertex, radius)
        return ConeBundle(self.base, cone, charts, self.base_period, dict(self.transition_offsets))

    def base_samples(self, count, rng):
        lo, hi = finite_box(self.base.rep.lower, self.base.rep.upper)
        return np.random.default_rng(rng).uniform(lo, hi, size=(count, self.base_dim))

    def cone_set(self, chart_ids=None):
        """The cone subbundle as a stratified set in the total space."""
        k, m = self.base_dim, self.fiber_dim
        fiber_set = self.fiber_cone.stratified()
        strata, frontier = [], []
        ids = range(len(self.charts)) if chart_ids is None else chart_ids
        for alpha in ids:
            c = self.charts[alpha]
            lo = np.maximum(c.lower, self.base.rep.lower)
            hi = np.minimum(c.upper, self.base.rep.upper)
            for s in fiber_set.strata:
                strata.append(Stratum(f"{alpha}:{s.id}", k + s.dim, k + m,
                                      _bundle_piece(self, alpha, s, lo, hi)))
            frontier += [(f"{alpha}:{a}", f"{alpha}:{b}") for a, b in fiber_set.frontier]
        return StratifiedSet(k + m, strata, frontier, self.total_period)

    def sphere_transverse(self, radius, samples=64, rng=0):
        """Sampled check that ``r dE'`` is transverse to C for all r <= radius."""
        xs = self.base_samples(samples, rng)
        dirs = self.fiber_cone.link.sample(16, rng)
        if dirs.shape[0] == 0:
            return True
        s = np.linspace(radius / 64, radius, 64)
        for alpha in range(len(self.charts)):
            inside = self.chart_contains(alpha, xs)
            for x in xs[inside]:
                for d in dirs:
                    z = s[:, None] * d[None, :]
                    xx = np.broadcast_to(x, (s.size, self.base_dim))
                    p = self.trivialize(alpha, xx, z)
                    h = 1e-7 * radius
                    dp = (self.trivialize(alpha, xx, z + h * d) - self.trivialize(alpha, xx, z - h * d)) / (2 * h)
                    if np.any(np.sum(p * dp, axis=1) <= 0.0):
                        return False
        return True


def _bundle_piece(cb, alpha, s, lo, hi):
    k = cb.base_dim
    d = s.dim
    srep = s.rep

    def fn(w):
        x, a = w[:, :k], w[:, k:]
        z = srep.map(a) if d else np.broadcast_to(srep.offset, (w.shape[0], cb.fiber_dim))
        return np.hstack([x, cb.trivialize(alpha, x, z)])

    lower = np.concatenate([lo, srep.lower]) if d else lo
    upper = np.concatenate([hi, srep.upper]) if d else hi
    faces = None
    if getattr(srep, "closure_faces", None) is not None:
        faces = [(k + i, side) for i, side in srep.closure_faces]
    return Param(fn, k + d, k + cb.fiber_dim, lower, upper, closure_faces=faces or [])


@dataclass
class CocycleReport:
    residual_cocycle: float
    residual_linear: float
    passed: bool
    triples_checked: int
    failures: list = field(default_factory=list)


def check_cocycle(cb, samples=32, rng_seed=0, cocycle_tol=DEFAULT.cocycle_tol):
    """Max residual of the chart cocycle and its vertical-derivative cocycle."""
    if samples < 1:
        raise StrataflowError("samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    xs = cb.base_samples(samples, rng)
    m = cb.fiber_dim
    radius = cb.fiber_cone.truncation_radius
    worst, worst_lin, count = 0.0, 0.0, 0
    failures = []
    h = 1e-6
    eye = np.eye(m)
    for x in xs:
        charts = [a for a in range(len(cb.charts)) if cb.chart_contains(a, x[None, :])[0]]
        for a, b, g in product(charts, repeat=3):
            count += 1
            z = rng.uniform(-1, 1, size=(4, m))
            z *= 0.5 * radius / np.maximum(np.linalg.norm(z, axis=1), 1e-12)[:, None]
            xx = np.broadcast_to(x, (z.shape[0], x.size))
            out = cb.transition(g, a, xx, cb.transition(b, g, xx, cb.transition(a, b, xx, z)))
            r = float(np.max(np.linalg.norm(out - z, axis=1)))

            def comp(zz):
                x2 = np.broadcast_to(x, (zz.shape[0], x.size))
                return cb.transition(g, a, x2, cb.transition(b, g, x2, cb.transition(a, b, x2, zz)))

            # vertical derivative of the composite at the zero section
            cols = [(comp(h * eye[j][None]) - comp(-h * eye[j][None]))[0] / (2 * h) for j in range(m)]
            rl = float(np.max(np.abs(np.stack(cols, 1) - eye)))
            if r > cocycle_tol or rl > cocycle_tol:
                failures.append({"x": x.tolist(), "charts": [a, b, g], "residual": r, "linear_residual": rl})
            worst, worst_lin = max(worst, r), max(worst_lin, rl)
    passed = worst <= cocycle_tol and worst_lin <= cocycle_tol
    return CocycleReport(worst, worst_lin, passed, count, failures)


def tangent_cone(cb, samples=16, rng_seed=0, cocycle_tol=DEFAULT.cocycle_tol):
    """Tangent cone bundle: every chart replaced by its vertical derivative at 0."""
    report = check_cocycle(cb, samples, rng_seed, cocycle_tol)
    if report.residual_cocycle > cocycle_tol:
        raise CocycleViolation(f"cocycle residual {report.residual_cocycle:.3g}")
    return cb.linear_part()


@dataclass
class IsotopyRecord:
    radius: float
    scales: list
    deviations: list

    @property
    def is_identity(self):
        return all(d == 0.0 for d in self.deviations)


def _rescale_deviation(cb, t, radius, xs, dirs):
    worst = 0.0
    s = np.linspace(0.0, radius, 33)[1:]
    for alpha in range(len(cb.charts)):
        push = cb.charts[alpha].push
        if push is None or not np.any(push):
            continue
        inside = cb.chart_contains(alpha, xs)
        for x in xs[inside]:
            for d in dirs:
                z = s[:, None] * d[None, :]
                xx = np.broadcast_to(x, (s.size, x.size))
                p_t = cb.trivialize(alpha, xx, t * z) / t
                lin = np.einsum("mij,mj->mi", cb.vertical_derivative(alpha, xx), z)
                worst = max(worst, float(np.max(np.linalg.norm(p_t - lin, axis=1))))
    return worst


def linearize_germ(cb, samples=16, rng_seed=0, tols=DEFAULT, r_min=1e-6):
    """Shrink to a transverse subtube, then rescale toward the tangent cone.

    Returns the tangent cone bundle over the subtube and the isotopy record
    ``(scale, deviation)`` down to the first scale within ``point_tol``.
    """
    r_max = cb.fiber_cone.truncation_radius
    if cb.sphere_transverse(r_max, samples, rng_seed):
        radius = r_max
    else:
        if not cb.sphere_transverse(r_min, samples, rng_seed):
            raise NoTransverseSubtube("no transverse subtube down to r_min")
        lo, hi = r_min, r_max
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if cb.sphere_transverse(mid, samples, rng_seed):
                lo = mid
            else:
                hi = mid
        radius = lo
    xs = cb.base_samples(samples, rng_seed)
    dirs = cb.fiber_cone.link.sample(8, rng_seed)
    scales, devs = [], []
    t = 1.0
    while True:
        dev = _rescale_deviation(cb, t, radius, xs, dirs) if dirs.size else 0.0
        scales.append(t)
        devs.append(dev)
        if dev <= tols.point_tol or t < 1e-300:
            break
        t *= 0.5
    return cb.linear_part(radius), IsotopyRecord(radius, scales, devs)


# -- joins and unions -----------------------------------------------------

def _slerp(a, b, s):
    dot = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    theta = np.arccos(dot)[:, None]
    st = np.sin(theta)
    small = st[:, 0] < 1e-12
    st = np.where(st < 1e-12, 1.0, st)
    out = (np.sin((1 - s) * theta) * a + np.sin(s * theta) * b) / st
    out[small] = a[small]
    return out


def _join_piece(sa, sb, m):
    da, db = sa.dim, sb.dim

    def fn(w):
        a = sa.rep.map(w[:, :da])
        b = sb.rep.map(w[:, da:da + db])
        return _slerp(a, b, w[:, -1:])

    lower = np.concatenate([sa.rep.lower, sb.rep.lower, [0.0]])
    upper = np.concatenate([sa.rep.upper, sb.rep.upper, [1.0]])
    return Param(fn, da + db + 1, m, lower, upper, closure_faces=[(da + db, "lower"), (da + db, "upper")])


def _antipodal_family(a, m):
    """Open half great circles from ``a`` to ``-a``."""
    perp = complement(a[None, :], m)
    if m == 2:
        return [Param(lambda w, e=e: np.cos(np.pi * w[:, :1]) * a + np.sin(np.pi * w[:, :1]) * e,
                      1, m, [0.0], [1.0]) for e in (perp[0], -perp[0])]
    if m == 3:
        e, f = perp

        def fn(w):
            s, phi = w[:, :1], w[:, 1:2]
            return np.cos(np.pi * s) * a + np.sin(np.pi * s) * (np.cos(phi) * e + np.sin(phi) * f)

        return [Param(fn, 2, m, [0.0, -np.pi], [1.0, np.pi])]
    raise StrataflowError("antipodal joins implemented for spheres of dimension <= 2")


def join_links(a, b, sphere_dim, tols=DEFAULT, rng=0):
    """Spherical join: A, B and the open minimizing arcs between them."""
    m = sphere_dim + 1
    if a.set.ambient_dim != m or b.set.ambient_dim != m:
        raise DimensionMismatch("links must live in the same sphere")
    if not a.strata:
        return b
    if not b.strata:
        return a
    pa, pb = a.sample(64, rng), b.sample(64, rng)
    dmin = np.min(np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2))
    if dmin < tols.point_tol:
        raise NotDisjoint(f"links meet (distance {dmin:.3g})")
    strata = [Stratum(f"A:{s.id}", s.dim, m, s.rep) for s in a.strata]
    strata += [Stratum(f"B:{s.id}", s.dim, m, s.rep) for s in b.strata]
    frontier = [(f"A:{x}", f"A:{y}") for x, y in a.set.frontier]
    frontier += [(f"B:{x}", f"B:{y}") for x, y in b.set.frontier]
    for sa in a.strata:
        for sb in b.strata:
            jid = f"J:{sa.id}*{sb.id}"
            if sa.dim == 0 and sb.dim == 0 and np.allclose(sa.rep.offset, -sb.rep.offset, atol=tols.point_tol):
                pieces = _antipodal_family(sa.rep.offset, m)
            else:
                qa, qb = sa.sample(32, rng)[0], sb.sample(32, rng)[0]
                if np.min(np.linalg.norm(qa[:, None] + qb[None], axis=2)) < 1e-3:
                    raise StrataflowError("antipodal points between positive-dimensional strata")
                pieces = [_join_piece(sa, sb, m)]
            for i, rep in enumerate(pieces):
                sid = jid if len(pieces) == 1 else f"{jid}#{i}"
                strata.append(Stratum(sid, rep.dim, m, rep))
                frontier += [(f"A:{sa.id}", sid), (f"B:{sb.id}", sid)]
    return Link(sphere_dim, StratifiedSet(m, strata, frontier))


def unit_sphere_strata(rows, prefix):
    """Unit sphere of ``span(rows)`` as strata (points or a great circle)."""
    rows = np.atleast_2d(rows)
    r, m = rows.shape
    if r == 0:
        return []
    if r == 1:
        return [Stratum(f"{prefix}+", 0, m, Linear(np.zeros((0, m)), rows[0])),
                Stratum(f"{prefix}-", 0, m, Linear(np.zeros((0, m)), -rows[0]))]
    if r == 2:
        rep = Param.from_catalog("great_circle", {"axes": rows.tolist()}, 1, m, [-np.pi - 0.5], [np.pi + 0.5])
        return [Stratum(prefix, 1, m, rep)]
    raise StrataflowError("normal spheres of dimension > 1 are not supported")


@dataclass
class IntersectionStructure:
    """Transverse conic structure recorded over an intersection stratum."""

    point: np.ndarray
    normal_basis: np.ndarray
    link: Link
    join: Link


def _linear_intersection(s1, s2, tols):
    from .transversality import linear_intersection_point

    if np.all(np.isinf(s1.rep.lower)) and np.all(np.isinf(s1.rep.upper)) \
            and np.all(np.isinf(s2.rep.lower)) and np.all(np.isinf(s2.rep.upper)):
        unbounded = True
    else:
        unbounded = False
    x = linear_intersection_point(s1.rep, s2.rep, None, tols)
    if x is None:
        return None
    t1 = orthonormal_rows(s1.rep.basis) if s1.dim else np.zeros((0, s1.ambient_dim))
    n2 = complement(s2.rep.basis, s2.ambient_dim) if s2.dim else np.eye(s2.ambient_dim)
    # directions of t1 lying in t2
    if t1.shape[0]:
        _, sv, vh = np.linalg.svd(t1 @ n2.T @ n2 @ t1.T) if n2.size else (None, np.zeros(t1.shape[0]), np.eye(t1.shape[0]))
        keep = vh[np.asarray(sv) <= tols.rank_tol] if n2.size else np.eye(t1.shape[0])
        basis = keep @ t1
    else:
        basis = np.zeros((0, s1.ambient_dim))
    if basis.shape[0] and not unbounded:
        raise StrataflowError("positive-dimensional intersections need unbounded linear strata")
    return [Linear(basis, x)]


def union_transverse(a, b, tols=DEFAULT):
    """Union of two mutually transverse stratified sets.

    New strata are the intersections ``S_A cap S_B`` (linear pieces, or
    isolated points of nonlinear pieces); over each, the transverse link is
    the disjoint union of the unit spheres of ``T S_A / T L`` and
    ``T S_B / T L`` and ``join`` records the join of the normal spheres.
    """
    from .transversality import pair_intersections, stratified_transverse

    report = stratified_transverse(a, b, tols=tols)
    if report.status != "pass":
        raise NotTransverse("sets are not transverse")
    n = a.ambient_dim
    strata = [Stratum(f"A:{s.id}", s.dim, n, s.rep) for s in a.strata]
    strata += [Stratum(f"B:{s.id}", s.dim, n, s.rep) for s in b.strata]
    frontier = [(f"A:{x}", f"A:{y}") for x, y in a.frontier]
    frontier += [(f"B:{x}", f"B:{y}") for x, y in b.frontier]
    structures = {}
    for sa in a.strata:
        for sb in b.strata:
            if sa.kind == "linear" and sb.kind == "linear":
                pieces = _linear_intersection(sa, sb, tols) or []
            else:
                pts = pair_intersections(sa, sb, None, tols)[0]
                if pts and sa.dim + sb.dim - n > 0:
                    raise StrataflowError("positive-dimensional nonlinear intersections are unsupported")
                pieces = [Linear(np.zeros((0, n)), p) for p in pts]
            for i, rep in enumerate(pieces):
                lid = f"L:{sa.id}^{sb.id}" + (f"#{i}" if len(pieces) > 1 else "")
                strata.append(Stratum(lid, rep.dim, n, rep))
                if rep.dim < sa.dim:
                    frontier.append((lid, f"A:{sa.id}"))
                if rep.dim < sb.dim:
                    frontier.append((lid, f"B:{sb.id}"))
                structures[lid] = _transverse_structure(rep, sa, sb, n, tols)
    out = StratifiedSet(n, strata, frontier, a.period)
    out.structures = structures
    return out


def _transverse_structure(rep, sa, sb, n, tols):
    x = rep.offset
    tl = orthonormal_rows(rep.basis) if rep.dim else np.zeros((0, n))
    nl = complement(tl, n) if tl.shape[0] else np.eye(n)
    ta = tangent_space(sa, x, None, tols)
    tb = tangent_space(sb, x, None, tols)

    def quotient(t):
        # directions of t orthogonal to the intersection, in normal coordinates
        proj = t @ nl.T
        return orthonormal_rows(proj, tols.rank_tol) if proj.size else np.zeros((0, nl.shape[0]))

    def normal(t):
        nn = complement(t, n) if t.shape[0] else np.eye(n)
        return orthonormal_rows(nn @ nl.T, tols.rank_tol)

    m = nl.shape[0]
    link_strata = unit_sphere_strata(quotient(ta), "A") + unit_sphere_strata(quotient(tb), "B")
    link = Link(m - 1, StratifiedSet(m, link_strata))
    nu_a = Link(m - 1, StratifiedSet(m, unit_sphere_strata(normal(ta), "a")))
    nu_b = Link(m - 1, StratifiedSet(m, unit_sphere_strata(normal(tb), "b")))
    return IntersectionStructure(x, nl, link, join_links(nu_a, nu_b, m - 1, tols))
