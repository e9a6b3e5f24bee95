"""Vector fields of immediate transversality.

The pipeline follows the strata upward. A generic translation acts in the
ball around each point stratum. Sections of the normal bundle, built from
bump-weighted chart translations, act over the truncated 1-strata. The
pieces are glued across collars through balanced reductions. Every stage
is checked by the transversality engine, and the assembled field gets a
certificate over the whole set.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import subspace_angles
from scipy.optimize import brentq, minimize_scalar

from .errors import (ExhaustedTries, NonTransverseZero, NotLinearized, PerturbationTooLarge,
                     SplitIllConditioned, StageError, StrataflowError)
from .flows import Flow, TranslationFlow, VectorFieldFlow
from .linalg import wrap
from .morse import build_tube_system
from .scenarios import TWO_PI, SphereHeight, TorusHeight, get_scenario, morse_coord, smoothstep
from .strata import Implicit, Linear, Param, RadialCone, Stratum, StratifiedSet, empty_link
from .tolerances import DEFAULT
from .transversality import (_certify, _displacement, _root_tol, generic_translation_sample,
                             immediate_transversality_verify, stratified_transverse)


# -- partitions and translation fields ------------------------------------------

def _ramp(s, width):
    if width <= 0:
        return (s > 0).astype(float)
    return smoothstep(s / width)


def _ramp_safe(s, width):
    return np.where(width > 0, smoothstep(s / np.where(width > 0, width, 1.0)), (s > 0).astype(float))


class ChartedPartition:
    """Bump functions on base boxes: 1 on the plateau, 0 outside the chart.

    ``ramps[alpha]`` is the ramp width per coordinate; infinite chart bounds
    carry no ramp on that side.
    """

    def __init__(self, lowers, uppers, ramps, period=None):
        self.lowers = [np.atleast_1d(np.asarray(lo, dtype=float)) for lo in lowers]
        self.uppers = [np.atleast_1d(np.asarray(hi, dtype=float)) for hi in uppers]
        self.ramps = [np.broadcast_to(np.asarray(r, dtype=float), lo.shape) for r, lo in zip(ramps, self.lowers)]
        self.period = period
        self._lo = np.stack(self.lowers)[None]
        self._hi = np.stack(self.uppers)[None]
        self._r = np.stack(self.ramps)[None]
        self._lo_fin = np.isfinite(self._lo)
        self._hi_fin = np.isfinite(self._hi)
        self._simple = not period and self._lo_fin.all() and self._hi_fin.all() and bool(np.all(self._r > 0))

    def __len__(self):
        return len(self.lowers)

    @classmethod
    def uniform(cls, lo, hi, count, overlap=0.5, period=None):
        """``count`` equal charts on ``[lo, hi]`` whose plateaus cover it."""
        width = (hi - lo) / count
        ramp = overlap * width
        lows = [lo + i * width - ramp for i in range(count)]
        ups = [lo + (i + 1) * width + ramp for i in range(count)]
        return cls(lows, ups, [ramp] * count, period)

    @classmethod
    def from_charts(cls, charts, ramp_fraction=0.1, period=None):
        lows, ups, ramps = [], [], []
        for c in charts:
            span = np.where(np.isfinite(c.upper - c.lower), c.upper - c.lower, 0.0)
            lows.append(c.lower)
            ups.append(c.upper)
            ramps.append(ramp_fraction * span)
        return cls(lows, ups, ramps, period)

    def _shifts(self, x):
        if not self.period:
            return [x]
        out = [x]
        for i, p in enumerate(self.period):
            if p:
                new = []
                for y in out:
                    for sh in (-p, p):
                        ys = y.copy()
                        ys[:, i] += sh
                        new.append(ys)
                out = out + new
        return out

    def rho(self, alpha, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi, r = self.lowers[alpha], self.uppers[alpha], self.ramps[alpha]
        best = np.zeros(x.shape[0])
        for y in self._shifts(x):
            val = np.ones(x.shape[0])
            for i in range(x.shape[1]):
                if np.isfinite(lo[i]):
                    val *= _ramp(y[:, i] - lo[i], r[i])
                if np.isfinite(hi[i]):
                    val *= _ramp(hi[i] - y[:, i], r[i])
            best = np.maximum(best, val)
        return best

    def rho_all(self, x):
        """All bump values at once, shape ``(m, len(self))``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi, r = self._lo, self._hi, self._r
        if self._simple:
            y = x[:, None, :]
            return np.prod(smoothstep((y - lo) / r) * smoothstep((hi - y) / r), axis=2)
        best = np.zeros((x.shape[0], len(self)))
        for y in self._shifts(x):
            y = y[:, None, :]
            with np.errstate(invalid="ignore"):
                left = np.where(self._lo_fin, _ramp_safe(y - lo, r), 1.0)
                right = np.where(self._hi_fin, _ramp_safe(hi - y, r), 1.0)
            best = np.maximum(best, np.prod(left * right, axis=2))
        return best

    def plateau(self, alpha, x):
        return self.rho(alpha, x) >= 1.0

    def covers(self, xs):
        xs = np.atleast_2d(xs)
        hit = np.zeros(xs.shape[0], dtype=bool)
        for a in range(len(self)):
            hit |= self.plateau(a, xs)
        return bool(hit.all())


class Section:
    """Fiber-valued map on base points, with a finite-difference derivative."""

    fiber_dim = 1

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x, h=1e-6):
        """``d sigma / dx`` as an array ``(m, fiber, base)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            cols.append((self(xp) - self(xm)) / (2 * h))
        return np.stack(cols, axis=2)

    def scaled(self, t):
        return FunctionSection(lambda x, s=self: t * s(x), self.fiber_dim)


class FunctionSection(Section):
    def __init__(self, fn, fiber_dim=1):
        self.fn = fn
        self.fiber_dim = fiber_dim

    def __call__(self, x):
        return np.asarray(self.fn(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)


class ConstantSection(Section):
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.fiber_dim = self.value.size

    def __call__(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.value, (x.shape[0], self.fiber_dim)).copy()


class SumSection(Section):
    def __init__(self, *parts):
        self.parts = parts
        self.fiber_dim = parts[0].fiber_dim

    def __call__(self, x):
        return sum(p(x) for p in self.parts)


class TranslationField(Section):
    """``sigma_v(x) = sum_alpha A_alpha(x) (rho_alpha(x) v_alpha)`` on a linear bundle."""

    def __init__(self, v, cb, partition):
        if not cb.is_linear:
            raise NotLinearized("translation fields need a linear cone bundle")
        self.v = np.atleast_2d(np.asarray(v, dtype=float))
        self.cb = cb
        self.partition = partition
        self.fiber_dim = cb.fiber_dim
        if self.v.shape != (len(partition), cb.fiber_dim):
            raise StrataflowError(f"v must have shape {(len(partition), cb.fiber_dim)}")

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if all(c.matrix.get("kind", "identity") == "identity" for c in self.cb.charts):
            return self.partition.rho_all(x) @ self.v
        out = np.zeros((x.shape[0], self.fiber_dim))
        for a in range(len(self.partition)):
            w = self.partition.rho(a, x)
            if not np.any(w):
                continue
            chart = min(a, len(self.cb.charts) - 1)
            mats = self.cb.vertical_derivative(chart, x)
            out += w[:, None] * np.einsum("mij,j->mi", mats, self.v[a])
        return out

    def gauge(self, z):
        """``Theta(x, y) = (x, y + sigma_v(x))`` on total-space points."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        k = self.cb.base_dim
        out = z.copy()
        out[:, k:] += self(z[:, :k])
        return out

    def to_json(self):
        return {"v": self.v.tolist(),
                "charts": [{"lower": lo.tolist(), "upper": hi.tolist(), "ramp": r.tolist()}
                           for lo, hi, r in zip(self.partition.lowers, self.partition.uppers, self.partition.ramps)]}


def default_partition(cb, ramp_fraction=0.1):
    return ChartedPartition.from_charts(cb.charts, ramp_fraction, cb.base_period)


def translation_action(v, cb, z, partition=None):
    """``v . z = z + sigma_v(x)`` for a total-space point ``z = (x, y)``."""
    if not cb.is_linear:
        raise NotLinearized("run linearize_germ before acting by translation")
    part = default_partition(cb) if partition is None else partition
    return TranslationField(v, cb, part).gauge(z)


# -- transversality of sections -----------------------------------------------------

def _point_fibers(cb):
    return len(cb.fiber_cone.link.strata) == 0


def gauge_image(cb, section, t=1.0):
    """The cone subbundle moved fiberwise by ``t * section``."""
    base_set = cb.cone_set()
    k = cb.base_dim
    strata = []
    for s in base_set.strata:
        fn = s.rep.map

        def moved(w, fn=fn):
            p = fn(w)
            out = p.copy()
            out[:, k:] += t * section(p[:, :k])
            return out

        strata.append(Stratum(s.id, s.dim, s.ambient_dim,
                              Param(moved, s.dim, s.ambient_dim, s.rep.lower, s.rep.upper)))
    return StratifiedSet(base_set.ambient_dim, strata, list(base_set.frontier), base_set.period), base_set


def section_transverse(cb, section, t=1.0, tols=DEFAULT):
    """Engine check of ``(C + t sigma)`` against ``C`` in the total space."""
    moved, base = gauge_image(cb, section, t)
    probe = cb.base_samples(16, 0)
    disp = float(np.median(np.linalg.norm(t * section(probe), axis=1))) if probe.size else abs(t)
    return stratified_transverse(moved, base, tols, _root_tol(max(disp, 1e-300), tols))


def _fiber_check(cb, section, x, tols):
    """Fiberwise transversality of ``C_x + sigma(x)`` against ``C_x``."""
    x = np.atleast_2d(x)
    sig = section(x)
    if _point_fibers(cb):
        return np.linalg.norm(sig, axis=1) > tols.point_tol
    out = np.zeros(x.shape[0], dtype=bool)
    fiber = cb.fiber_cone.stratified()
    for i in range(x.shape[0]):
        alpha = next((a for a in range(len(cb.charts)) if cb.chart_contains(a, x[i:i + 1])[0]), 0)
        mat = cb.vertical_derivative(alpha, x[i:i + 1])[0]
        from .flows import transform_set

        fx = transform_set(fiber, mat)
        out[i] = stratified_transverse(fx.translated(sig[i]), fx, tols).passed
    return out


def _base_grid(cb, count):
    lo, hi = cb.base.rep.lower, cb.base.rep.upper
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    k = cb.base_dim
    per = max(2, int(round(count ** (1.0 / max(k, 1)))))
    axes = [np.linspace(lo[i], hi[i], per + 2)[1:-1] for i in range(k)]
    base_params = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, k)
    return cb.base.rep.map(base_params)


def sample_generic_section(cb, rng_seed=0, max_tries=100, partition=None, magnitude=1.0,
                           base_section=None, samples=64, margin_floor=0.0, tols=DEFAULT):
    """Rejection-sample ``v`` in ``G`` so that ``C + sigma`` is transverse to ``C``.

    Fiberwise transversality is required at a majority of base samples;
    the total-space check then covers the bifurcation locus, where the
    base derivative of the gauge has to supply the missing direction.
    ``margin_floor`` rejects sections whose crossing angles at ``t = 1``
    fall below it.
    With ``base_section`` the tested section is ``base_section + sigma_v``.
    Returns the accepted field with ``tries`` set.
    """
    if not cb.is_linear:
        raise NotLinearized("sample_generic_section needs a linear bundle")
    part = default_partition(cb) if partition is None else partition
    rng = np.random.default_rng(rng_seed)
    shape = (len(part), cb.fiber_dim)
    xs = _base_grid(cb, samples)
    for tries in range(1, max_tries + 1):
        v = rng.standard_normal(shape)
        v *= magnitude / np.linalg.norm(v)
        fld = TranslationField(v, cb, part)
        sec = fld if base_section is None else SumSection(base_section, fld)
        if not section_is_generic(cb, sec, xs, margin_floor, tols):
            continue
        fld.tries = tries
        fld.section = sec
        return fld
    raise ExhaustedTries(f"no generic section in {max_tries} tries", max_tries)


def _point_fiber_margin(section, cb, samples=2048):
    xs = _base_grid(cb, samples)
    val = np.linalg.norm(section(xs), axis=1)
    der = np.linalg.norm(section.derivative(xs).reshape(xs.shape[0], -1), axis=1)
    worst = float(np.min(np.arctan(np.maximum(val, der))))
    if cb.base_dim != 1 or section.fiber_dim != 1 or cb.base.rep.dim != 1:
        return worst
    # a touching zero has no sign change in sigma but one in sigma'; refine both
    q = cb.base.rep.map
    a = np.linspace(*(np.where(np.isfinite(b), b, s) for b, s in
                      ((cb.base.rep.lower[0], -1.0), (cb.base.rep.upper[0], 1.0))), samples + 2)[1:-1]

    def sig(t):
        return section(q(np.array([[t]])))[0, 0]

    def dsig(t):
        return section.derivative(q(np.array([[t]]))).reshape(-1)[0]

    pts = q(a[:, None])
    for fn, vals in ((sig, section(pts)[:, 0]), (dsig, section.derivative(pts).reshape(-1))):
        for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
            r = brentq(fn, a[i], a[i + 1], xtol=1e-14)
            worst = min(worst, float(np.arctan(max(abs(sig(r)), abs(dsig(r))))))
    return worst


def section_is_generic(cb, sec, xs=None, margin_floor=0.0, tols=DEFAULT):
    xs = _base_grid(cb, 64) if xs is None else xs
    if np.mean(_fiber_check(cb, sec, xs, tols)) < 0.5:
        return False
    if _point_fibers(cb) and _point_fiber_margin(sec, cb) <= tols.angle_tol:
        return False
    rep = section_transverse(cb, sec, 1.0, tols)
    # the floor bounds crossing angles at t = 1; they shrink linearly with t
    return rep.passed and rep.min_angle >= margin_floor


def homogeneity_check(section, cb, t_list, tols=DEFAULT):
    """Transversality of ``C + t sigma`` against ``C`` for every ``t`` listed."""
    t_list = list(t_list)
    if not t_list:
        warnings.warn("empty t list: homogeneity holds vacuously")
        return True
    return all(section_transverse(cb, section, t, tols).passed for t in t_list)


def openness_margin(section, cb, samples=2048, tols=DEFAULT):
    """Perturbation budget of a passing section.

    With point fibers it is ``min_x atan(max(|sigma(x)|, |D sigma(x)|))``:
    away from zeros the value keeps the graph off the zero section, at
    zeros the slope is the crossing angle. Otherwise it is the smallest
    crossing angle found by the engine in the total space.
    """
    if _point_fibers(cb):
        return _point_fiber_margin(section, cb, samples)
    rep = section_transverse(cb, section, 1.0, tols)
    return float(rep.min_angle)


def adversarial_perturbation(section, cb, budget, samples=2048):
    """Perturbation of sampled C1 size ``budget`` that leaves a tangential zero.

    Point fibers over a 1-dimensional base only. At the margin minimizer
    ``x*`` the perturbation cancels the value and the slope of the section;
    the ``c (1 - cos)`` term is tuned by root finding to reach ``budget``.
    Returns ``None`` when even the cancelling part alone exceeds it.
    """
    if not _point_fibers(cb) or cb.base_dim != 1 or section.fiber_dim != 1:
        raise StrataflowError("adversarial perturbations need point fibers over a curve")
    xs = _base_grid(cb, samples)
    val = section(xs)[:, 0]
    der = section.derivative(xs).reshape(len(xs))
    i = int(np.argmin(np.maximum(np.abs(val), np.abs(der))))
    x0, v0, d0 = float(xs[i, 0]), float(val[i]), float(der[i])

    def delta(c):
        return FunctionSection(lambda x: -v0 - d0 * np.sin(x - x0) + c * (1.0 - np.cos(x - x0)))

    zero = FunctionSection(lambda x: 0.0 * x)

    def excess(c):
        return c1_distance(delta(c), zero, xs) - budget

    if excess(0.0) > 0:
        return None
    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
    return delta(brentq(excess, 0.0, hi, xtol=1e-12 * max(budget, 1e-300)))


def c1_distance(a, b, xs, h=1e-6):
    """Sampled C1 distance: max of value and derivative deviations."""
    d = FunctionSection(lambda x: a(x) - b(x), a.fiber_dim)
    val = np.max(np.linalg.norm(d(xs), axis=1)) if len(xs) else 0.0
    der = np.max(np.linalg.norm(d.derivative(xs, h).reshape(len(xs), -1), axis=1)) if len(xs) else 0.0
    return float(max(val, der))


class GluedSection(Section):
    """``sigma0 + lambda (sigma - sigma0)``, exact at ``lambda`` in {0, 1}."""

    def __init__(self, sigma0, sigma, lam):
        self.sigma0, self.sigma, self.lam = sigma0, sigma, lam
        self.fiber_dim = sigma0.fiber_dim

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lam = np.asarray(self.lam(x), dtype=float)[:, None]
        s0, s1 = self.sigma0(x), self.sigma(x)
        return np.where(lam <= 0.0, s0, np.where(lam >= 1.0, s1, s0 + lam * (s1 - s0)))


def glue_relative(sigma0, sigma, lam, collar_samples, margin=None, cb=None, tols=DEFAULT):
    """Blend ``sigma0`` into ``sigma`` across a collar.

    Raises :class:`PerturbationTooLarge` when the sampled C1 distance on
    the collar exceeds a quarter of ``sigma0``'s openness margin.
    """
    xs = np.atleast_2d(collar_samples)
    dist = c1_distance(sigma, sigma0, xs)
    if margin is None:
        if cb is None:
            val = np.linalg.norm(sigma0(xs), axis=1)
            der = np.linalg.norm(sigma0.derivative(xs).reshape(len(xs), -1), axis=1)
            margin = float(np.min(np.arctan(np.maximum(val, der))))
        else:
            margin = openness_margin(sigma0, cb, tols=tols)
    if dist > margin / 4:
        raise PerturbationTooLarge(f"C1 distance {dist:.3g} exceeds margin/4 = {margin / 4:.3g}", dist)
    out = GluedSection(sigma0, sigma, lam)
    out.distance = dist
    out.margin = margin
    return out


# -- reductions -------------------------------------------------------------------------

def reduce_field(u, horizontal, vertical, tols=DEFAULT):
    """Split ``u = u_h + u_v`` along ``horizontal`` and ``vertical`` spans."""
    u = np.asarray(u, dtype=float)
    h = np.atleast_2d(np.asarray(horizontal, dtype=float))
    v = np.atleast_2d(np.asarray(vertical, dtype=float))
    if h.size and v.size:
        ang = float(np.min(subspace_angles(h.T, v.T)))
        if ang < tols.angle_tol:
            raise SplitIllConditioned(f"subspace angle {ang:.3g} below angle_tol")
    basis = np.vstack([b for b in (h, v) if b.size])
    coef = np.linalg.lstsq(basis.T, u.T, rcond=None)[0]
    nh = h.shape[0] if h.size else 0
    u_h = (coef[:nh].T @ h) if nh else np.zeros_like(u)
    u_v = (coef[nh:].T @ v) if v.size else np.zeros_like(u)
    return u_h, u_v


def balanced_reduce(u, mu, horizontal, vertical, tols=DEFAULT):
    """``mu u_h + u_v``: the field itself at ``mu = 1``, its reduction at 0."""
    u_h, u_v = reduce_field(u, horizontal, vertical, tols)
    mu = np.asarray(mu, dtype=float)
    if mu.ndim:
        mu = mu[:, None]
    if np.all(mu == 1.0):
        return np.asarray(u, dtype=float).copy()
    if np.all(mu == 0.0):
        return u_v
    return mu * u_h + u_v


# -- torus pieces -------------------------------------------------------------------

_AXES = {"s1": (0, 1), "s2": (1, 0)}


def _segment(sid, lo, hi, center=(0.0, 0.0)):
    along, _ = _AXES[sid]
    basis = np.zeros((1, 2))
    basis[0, along] = 1.0
    return Stratum(sid, 1, 2, Linear(basis, center, [lo], [hi]))


def _angle_of(morse_radius):
    return 2 * np.arcsin(np.clip(morse_radius / 2, 0, 1))


def local_ball_set(ts):
    """The 1-skeleton inside the minimum's ball, in the angle chart at ``m``."""
    th0 = _angle_of(ts.t0_radius)
    strata = [Stratum("m", 0, 2, Linear(np.zeros((0, 2)), [0.0, 0.0]))]
    frontier = []
    for sid in ("s1", "s2"):
        for sign, name in ((1, "+"), (-1, "-")):
            lo, hi = (0.0, th0) if sign > 0 else (-th0, 0.0)
            s = _segment(sid, lo, hi)
            strata.append(Stratum(sid + name, 1, 2, s.rep))
            frontier.append(("m", sid + name))
    return StratifiedSet(2, strata, frontier)


def _tube_pieces(ts, sid, inner, outer):
    """The stratum's two segments at Morse base radius in ``(inner, outer)``."""
    a, b = _angle_of(inner), _angle_of(outer)
    strata = [Stratum(sid + "+", 1, 2, _segment(sid, a, b).rep),
              Stratum(sid + "-", 1, 2, _segment(sid, -b, -a).rep)]
    return StratifiedSet(2, strata, [])


def verify_gluing(u, ts, sid, eps, t_grid=None, tols=DEFAULT):
    """Certificates for the parent translation, its reduction and its balanced reduction.

    The parent is ``u`` acting on the skeleton in the minimum's ball. The
    reduced field is the vertical part acting on the stratum's segments
    inside the tube; the balanced field ``mu u_h + u_v`` acts on the
    collar segments. Returns ``{"parent", "reduced", "balanced"}``.
    """
    along, across = _AXES[sid]
    h = np.eye(2)[[along]]
    v = np.eye(2)[[across]]
    u = np.asarray(u, dtype=float)
    _, u_v = reduce_field(u, h, v, tols)
    parent = immediate_transversality_verify(local_ball_set(ts), TranslationFlow(u), eps, t_grid, tols)
    inside = _tube_pieces(ts, sid, ts.trunc_radius, ts.t0_radius)
    reduced = immediate_transversality_verify(inside, TranslationFlow(u_v), eps, t_grid, tols)
    collar = _tube_pieces(ts, sid, ts.trunc_radius, ts.trunc_radius + ts.collar_width)

    def balanced(x):
        x = np.atleast_2d(x)
        lam = ts.lam(sid, x)
        return balanced_reduce(np.broadcast_to(u, x.shape), 1.0 - lam, h, v, tols)

    bal = immediate_transversality_verify(collar, VectorFieldFlow(balanced, max_step=max(eps, 1e-3)),
                                          eps, t_grid, tols)
    return {"parent": parent, "reduced": reduced, "balanced": bal}


def _fiber_cutoff(width):
    def kappa(y):
        return 1.0 - smoothstep((np.abs(y) - 0.5 * width) / (0.5 * width))
    return kappa


class TorusField:
    """Assembled field on the flat torus, evaluated in angle coordinates.

    ``F = kA (mu_A a, beta_A) + kB (beta_B, mu_B b) - kA kB (a, b)``, with
    ``kA`` and ``kB`` fiber cutoffs, ``mu = 1 - lambda`` across each collar
    and ``beta`` the glued vertical section of each 1-stratum.
    """

    def __init__(self, ts, u0, betas, fiber_width):
        self.ts = ts
        self.u0 = np.asarray(u0, dtype=float)
        self.betas = betas
        self.kappa = _fiber_cutoff(fiber_width)
        self.fiber_width = fiber_width
        self._fast = {sid: _glued_parts(b) for sid, b in betas.items()}

    def _collar(self, m):
        ts = self.ts
        return smoothstep(np.clip((np.abs(m) - ts.trunc_radius) / ts.collar_width, 0.0, 1.0))

    def _beta(self, sid, angle, lam):
        parts = self._fast[sid]
        if parts is None:
            return self.betas[sid](angle[:, None])[:, 0]
        s0, fld = parts
        # same operations as GluedSection over SumSection, fused
        s1 = 0 + s0 + (fld.partition.rho_all(angle[:, None]) @ fld.v)[:, 0]
        return np.where(lam <= 0.0, s0, np.where(lam >= 1.0, s1, s0 + lam * (s1 - s0)))

    def __call__(self, x):
        x = np.atleast_2d(x)
        X = morse_coord(x[:, 0], 0.0)
        Y = morse_coord(x[:, 1], 0.0)
        ka, kb = self.kappa(Y), self.kappa(X)
        a, b = self.u0
        lam_a, lam_b = self._collar(X), self._collar(Y)
        beta_a = self._beta("s1", x[:, 0], lam_a)
        beta_b = self._beta("s2", x[:, 1], lam_b)
        fx = ka * (1.0 - lam_a) * a + kb * beta_b - ka * kb * a
        fy = ka * beta_a + kb * (1.0 - lam_b) * b - ka * kb * b
        return np.stack([fx, fy], axis=1)


def _glued_parts(beta):
    """``(sigma0 value, translation field)`` when ``beta`` glues a constant to constant + field."""
    if not isinstance(beta, GluedSection) or not isinstance(beta.sigma0, ConstantSection):
        return None
    sig = beta.sigma
    if not (isinstance(sig, SumSection) and len(sig.parts) == 2 and isinstance(sig.parts[0], ConstantSection)
            and isinstance(sig.parts[1], TranslationField) and sig.parts[0].fiber_dim == 1):
        return None
    if float(sig.parts[0].value[0]) != float(beta.sigma0.value[0]):
        return None
    return float(beta.sigma0.value[0]), sig.parts[1]


def _circle_bundle(lo, hi):
    """Point-fiber bundle over the base arc ``(lo, hi)`` of the circle."""
    from .strata import Chart, ConeBundle

    base = Stratum("base", 1, 1, Linear([[1.0]], [0.0], [lo], [hi]))
    return ConeBundle(base, RadialCone(empty_link(1)), [Chart([-np.inf], [np.inf])], (TWO_PI,))


@dataclass
class SynthesisResult:
    field: object
    flow: Flow
    certificate: object
    epsilon: float
    stages: dict = field(default_factory=dict)
    descriptors: list = field(default_factory=list)

    def to_json(self):
        return {"epsilon": self.epsilon, "certificate": self.certificate.to_json(),
                "stages": {k: (v.to_json() if hasattr(v, "to_json") else v) for k, v in self.stages.items()},
                "field": self.descriptors}


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except StrataflowError as exc:
        raise StageError(name, exc) from exc


def _torus_pipeline(scn, eps, rng_seed, tols, max_tries, magnitude_factor, t_grid):
    ts = _stage("tubes", build_tube_system, scn)
    rho = ts.tube_radius
    mag = magnitude_factor * rho
    eps = 0.1 * rho if eps is None else eps
    rng = np.random.default_rng(rng_seed)
    seeds = rng.integers(0, 2**63 - 1, size=3)
    stages, desc = {}, []

    ball = local_ball_set(ts)
    u, tries = _stage("step1", generic_translation_sample, ball, int(seeds[0]), max_tries, tols)
    u0 = mag * u
    stages["step1"] = _stage("step1", immediate_transversality_verify, ball, TranslationFlow(u0), eps, t_grid, tols)
    desc.append({"region": "m", "kind": "translation", "payload": u0.tolist(), "tries": tries})

    betas = {}
    theta_w = _angle_of(ts.trunc_radius + ts.collar_width)
    theta_c = _angle_of(ts.trunc_radius)
    for i, sid in enumerate(("s1", "s2")):
        _, across = _AXES[sid]
        sigma0 = ConstantSection([u0[across]])
        cb = _circle_bundle(theta_w, TWO_PI - theta_w)
        ramp = 0.15 * (TWO_PI - 2 * theta_w)
        part = _far_partition(theta_w, ramp)
        fld = _stage("step2", sample_generic_section, cb, int(seeds[1]) + i, max_tries, part, mag, sigma0,
                     64, np.arctan(mag), tols)
        collar = np.concatenate([np.linspace(theta_c, theta_w, 64), np.linspace(TWO_PI - theta_w, TWO_PI - theta_c, 64)])
        beta = _stage("step3", glue_relative, sigma0, fld.section,
                      lambda x, sid=sid: _collar_lambda(ts, sid, x), collar[:, None])
        betas[sid] = beta
        stages[f"step2:{sid}"] = {"tries": fld.tries, "margin": openness_margin(fld.section, cb, tols=tols)}
        gl = _stage("step3", verify_gluing, u0, ts, sid, eps, t_grid, tols)
        stages[f"step3:{sid}"] = {k: c.to_json() for k, c in gl.items()}
        stages[f"step3:{sid}"]["kappa_ratio"] = {k: gl[k].kappa_hat / gl["parent"].kappa_hat
                                                  for k in ("reduced", "balanced")}
        desc.append({"region": sid, "kind": "section", "payload": fld.v.tolist(), "bump": fld.to_json()["charts"]})
        desc.append({"region": sid, "kind": "balanced", "payload": u0.tolist(),
                     "bump": {"trunc_radius": ts.trunc_radius, "collar_width": ts.collar_width}})

    F = TorusField(ts, u0, betas, min(rho, 0.3))
    flow = VectorFieldFlow(F, scn.period, max_step=max(eps / 4, 1e-3))
    cert = _stage("certify", immediate_transversality_verify, scn.sigma(1), flow, eps, t_grid, tols)
    return SynthesisResult(F, flow, cert, eps, stages, desc)


def _far_partition(theta_w, ramp, count=4):
    """Charts over the stratum beyond its collar; bumps vanish on the collar."""
    lo, hi = theta_w + ramp, TWO_PI - theta_w - ramp
    grid = ChartedPartition.uniform(lo, hi, count, 0.5)
    lows = [np.array([theta_w])] + grid.lowers[1:]
    ups = grid.uppers[:-1] + [np.array([TWO_PI - theta_w])]
    return ChartedPartition(lows, ups, [ramp] * count)


def _collar_lambda(ts, sid, theta):
    """Collar function of a 1-stratum as a function of its base angle."""
    x = np.abs(morse_coord(np.atleast_2d(theta)[:, 0], 0.0))
    return smoothstep(np.clip((x - ts.trunc_radius) / ts.collar_width, 0.0, 1.0))


class SphereField:
    """Generic translation in the minimum's Lambert chart, cut off radially."""

    def __init__(self, scn, u0, radius):
        self.scn = scn
        self.u0 = np.asarray(u0, dtype=float)
        self.radius = radius

    def __call__(self, x):
        x = np.atleast_2d(x)
        y = self.scn.to_morse("m", x)
        r = np.linalg.norm(y, axis=1)
        cut = 1.0 - smoothstep((r - 0.5 * self.radius) / (0.5 * self.radius))
        w = np.concatenate([self.u0, [0.0]])
        tang = w - np.sum(x * w, axis=1)[:, None] * x
        return cut[:, None] * tang


def _sphere_pipeline(scn, eps, rng_seed, tols, max_tries, magnitude_factor, t_grid):
    ts = _stage("tubes", build_tube_system, scn)
    rho = ts.t0_radius
    eps = 0.1 * rho if eps is None else eps
    chart_set = StratifiedSet(2, [Stratum("m", 0, 2, Linear(np.zeros((0, 2)), [0.0, 0.0]))])
    u, tries = _stage("step1", generic_translation_sample, chart_set, int(rng_seed), max_tries, tols)
    u0 = magnitude_factor * rho * u
    F = SphereField(scn, u0, rho)
    flow = VectorFieldFlow(F, None, max_step=max(eps / 4, 1e-3))
    cert = _stage("certify", immediate_transversality_verify, scn.sigma(1), flow, eps, t_grid, tols)
    desc = [{"region": "m", "kind": "translation", "payload": u0.tolist(), "tries": tries}]
    return SynthesisResult(F, flow, cert, eps, {"step1": {"tries": tries}}, desc)


def synthesize_immediate_flow(scenario, eps=None, rng_seed=0, tols=DEFAULT, max_tries=100,
                              magnitude_factor=0.1, t_grid=None):
    """Field whose flow makes the scenario's skeleton immediately transverse to itself."""
    scn = get_scenario(scenario) if isinstance(scenario, str) else scenario
    if isinstance(scn, TorusHeight):
        return _torus_pipeline(scn, eps, rng_seed, tols, max_tries, magnitude_factor, t_grid)
    if isinstance(scn, SphereHeight):
        return _sphere_pipeline(scn, eps, rng_seed, tols, max_tries, magnitude_factor, t_grid)
    raise StrataflowError(f"no pipeline for {type(scn).__name__}")


# -- sections of a closed curve ----------------------------------------------------

def _curve_normal(s, a):
    # tangent rotated clockwise: outward for counter-clockwise curves
    tan = s.rep.jac(a)[:, :, 0]
    tan = tan / np.linalg.norm(tan, axis=1)[:, None]
    return np.stack([tan[:, 1], -tan[:, 0]], axis=1)


def section_zeros(s, coef, count=4096):
    """Zeros of a scalar section along a closed curve, with derivatives there."""
    lo, hi = float(s.rep.lower[0]), float(s.rep.upper[0])
    a = np.linspace(lo, hi, count)
    c = coef(a[:, None])
    if np.max(np.abs(c)) < 1e-12:
        raise NonTransverseZero("section vanishes identically")
    zeros = []
    for i in np.flatnonzero(np.sign(c[:-1]) * np.sign(c[1:]) < 0):
        zeros.append(brentq(lambda q: coef(np.array([[q]]))[0], a[i], a[i + 1], xtol=1e-14))
    zeros += [a[i] for i in np.flatnonzero(c == 0.0)]
    h = 1e-6
    derivs = [(coef(np.array([[z + h]]))[0] - coef(np.array([[z - h]]))[0]) / (2 * h) for z in zeros]
    scale = np.max(np.abs(c))
    for z, d in zip(zeros, derivs):
        if abs(d) < 1e-6 * max(scale, 1.0):
            raise NonTransverseZero(f"zero at {z:.6g} has derivative {d:.3g}")
    # touching zeros without a sign change
    mag = np.abs(c)
    for i in range(1, count - 1):
        if mag[i] <= mag[i - 1] and mag[i] <= mag[i + 1] and mag[i] < 1e-2 * scale \
                and np.sign(c[i - 1]) == np.sign(c[i]) == np.sign(c[i + 1]):
            # grid minima only bound a double zero by the spacing squared; refine
            res = minimize_scalar(lambda q: abs(coef(np.array([[q]]))[0]), bounds=(a[i - 1], a[i + 1]),
                                  method="bounded", options={"xatol": 1e-12})
            if res.fun < 1e-9 * max(scale, 1.0):
                raise NonTransverseZero(f"section touches zero near {res.x:.6g}")
    return np.array(zeros), np.array(derivs)


class SectionFlow(VectorFieldFlow):
    """Flow of a normal section extended by fiber parallelism and cut off off the tube."""

    def __init__(self, s, u, tube_radius=0.25, max_step=1e-2):
        self.s = s
        self.u = u
        self.tube_radius = tube_radius
        self._circle = s.rep.evaluator == "circle" if hasattr(s.rep, "evaluator") else False
        super().__init__(self._field, None, max_step)

    def _foot(self, x):
        if self._circle:
            c = np.asarray(self.s.rep.params.get("center", [0.0, 0.0]), dtype=float)
            r0 = float(self.s.rep.params.get("radius", 1.0))
            d = x - c
            lo = float(self.s.rep.lower[0])
            a = np.mod(np.arctan2(d[:, 1], d[:, 0]) - lo, TWO_PI) + lo
            return a[:, None], np.linalg.norm(d, axis=1) - r0
        out_a, out_d = [], []
        for p in x:
            a, dist = self.s.locate(p)
            out_a.append(a)
            out_d.append(dist)
        return np.array(out_a), np.array(out_d)

    def _field(self, x):
        x = np.atleast_2d(x)
        a, dist = self._foot(x)
        w = self.tube_radius
        cut = 1.0 - smoothstep((np.abs(dist) - 0.5 * w) / (0.5 * w))
        return cut[:, None] * self.u(a)


def tubular_section_flow(s, u, eps=0.1, t_grid=None, tube_radius=0.25, tols=DEFAULT):
    """Flow ``x + t u(x)`` near a closed curve in the plane, with its certificate.

    ``u`` maps curve parameters to normal vectors. Zeros must be transverse;
    crossings of the moved curve with the original are then transverse, at
    angles growing linearly in ``t``.
    """
    if s.ambient_dim != 2 or s.dim != 1:
        raise StrataflowError("sections of closed curves in the plane only")

    def coef(a):
        return np.sum(u(a) * _curve_normal(s, a), axis=1)

    section_zeros(s, coef)
    flow = SectionFlow(s, u, tube_radius, max_step=max(eps / 4, 1e-4))
    sigma = StratifiedSet(2, [s])
    target = sigma
    if getattr(s.rep, "evaluator", None) == "circle":
        c = np.asarray(s.rep.params.get("center", [0.0, 0.0]), dtype=float)
        r0 = float(s.rep.params.get("radius", 1.0))
        imp = Implicit(lambda x: (np.sum((x - c) ** 2, axis=1) - r0 ** 2)[:, None], 1, 2,
                       c - 2 * r0, c + 2 * r0,
                       jac=lambda x: (2 * (x - c))[:, None, :])
        target = StratifiedSet(2, [Stratum(s.id, 1, 2, imp)])
    from .transversality import default_t_grid

    ts = default_t_grid(eps) if t_grid is None else np.asarray(t_grid, dtype=float)
    rows = []
    for t in ts:
        pushed = flow.pushforward_set(sigma, t)
        rt = _root_tol(_displacement(sigma, flow, t), tols)
        rep = stratified_transverse(pushed, target, tols, rt)
        rows.append((rep.min_angle, rep.witness_count, len(rep.pairs), rep.status, rep.nonempty))
    return flow, _certify(eps, ts, rows)


def circle_stratum(radius=1.0, center=(0.0, 0.0), start=-np.pi / 4):
    """Unit circle parametrized on ``(start, start + 2 pi)``."""
    return Stratum("S", 1, 2, Param.from_catalog("circle", {"center": list(center), "radius": radius},
                                                   1, 2, [start], [start + TWO_PI]))


def normal_section(s, coefficient):
    """``u(a) = coefficient(a) * outward normal`` on a plane curve."""
    def u(a):
        a = np.atleast_2d(a)
        return coefficient(a[:, 0])[:, None] * _curve_normal(s, a)
    return u
