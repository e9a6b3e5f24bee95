"""Simple Morse models, flowed sets and tube systems.

Coordinates in ``M(n, k)`` are ``(x_u, x_s)`` with ``x_u`` the first ``k``
entries. The descending gradient is ``(x_u, -x_s)`` and its flow is the
closed form ``(x_u e^t, x_s e^-t)``. The top boundary sits over the
co-sphere ``|x_s| = r_plus``; the bottom boundary over the attaching sphere
``|x_u| = r_minus``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CannotSatisfyChoices, IntegrationEscape, NonTransverseSeed, StrataflowError
from .linalg import batched_newton, wrap
from .scenarios import TWO_PI, SphereHeight, smoothstep
from .strata import Linear, Param, Stratum, StratifiedSet, finite_box
from .tolerances import DEFAULT


@dataclass(frozen=True)
class MorseModel:
    n: int
    k: int
    f_a: float = 0.0
    r_plus: float = 0.5
    r_minus: float = 0.5

    def __post_init__(self):
        if not 0 < self.k < self.n:
            raise StrataflowError("Morse index must satisfy 0 < k < n")
        if self.r_plus <= 0 or self.r_minus <= 0:
            raise StrataflowError("boundary radii must be positive")

    def f(self, x):
        x = np.atleast_2d(x)
        xu, xs = x[:, :self.k], x[:, self.k:]
        return self.f_a + 0.5 * (-np.sum(xu * xu, axis=1) + np.sum(xs * xs, axis=1))

    def field(self, x):
        x = np.atleast_2d(x)
        return np.hstack([x[:, :self.k], -x[:, self.k:]])

    def split(self, x):
        x = np.atleast_2d(x)
        return x[:, :self.k], x[:, self.k:]


def model_flow(model, x, t):
    """Closed-form flow of the simple descending gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = x.copy()
    out[:, :model.k] *= np.exp(t)
    out[:, model.k:] *= np.exp(-t)
    return out


class ModelFlow:
    """``model_flow`` packaged as a flow object."""

    exact = True
    period = None

    def __init__(self, model):
        self.model = model

    def apply(self, x, t):
        return model_flow(self.model, x, t)

    def group_residual(self, x, s, t):
        a = self.apply(self.apply(x, t), s)
        return float(np.max(np.abs(a - self.apply(x, s + t))))


def invariant_manifolds(model, radius=1.0):
    """Local unstable and stable discs as linear strata."""
    n, k = model.n, model.k
    eye = np.eye(n)
    wu = Stratum("Wu", k, n, Linear(eye[:k], np.zeros(n), [-radius] * k, [radius] * k))
    ws = Stratum("Ws", n - k, n, Linear(eye[k:], np.zeros(n), [-radius] * (n - k), [radius] * (n - k)))
    return wu, ws


# -- seed sets on the top boundary --------------------------------------------

def _sphere_point(model, angles):
    """Point of the co-sphere (only n - k = 2 uses an angle; otherwise a vector)."""
    m = model.n - model.k
    if m == 1:
        return np.array([model.r_plus])
    if m == 2:
        return model.r_plus * np.array([np.cos(angles), np.sin(angles)])
    v = np.asarray(angles, dtype=float)
    return model.r_plus * v / np.linalg.norm(v)


def tilted_seed(model, tilt, angle0=0.0, half_length=None):
    """Curve in the top boundary of ``M(3, 1)`` crossing the co-sphere once.

    ``tau -> (tau, r_plus e(angle0 + tau tan(tilt) / r_plus))``; ``tilt = 0``
    is the fiber over one point.
    """
    if (model.n, model.k) != (3, 1):
        raise StrataflowError("tilted_seed is defined on M(3, 1)")
    half = model.r_minus if half_length is None else half_length
    rate = np.tan(tilt) / model.r_plus
    rp = model.r_plus

    def fn(a):
        tau = a[:, 0]
        ang = angle0 + tau * rate
        return np.stack([tau, rp * np.cos(ang), rp * np.sin(ang)], axis=1)

    def jac(a):
        tau = a[:, 0]
        ang = angle0 + tau * rate
        return np.stack([np.ones_like(tau), -rp * rate * np.sin(ang), rp * rate * np.cos(ang)], axis=1)[:, :, None]

    rep = Param(fn, 1, 3, [-half], [half], jac=jac)
    return StratifiedSet(3, [Stratum("seed", 1, 3, rep)])


def fiber_seed(model, angles, half_length=None):
    """Full fiber of the top boundary over one co-sphere point."""
    half = model.r_minus if half_length is None else half_length
    p = np.concatenate([np.zeros(model.k), _sphere_point(model, angles)])
    basis = np.eye(model.n)[:model.k]
    return StratifiedSet(model.n, [Stratum("fiber", model.k, model.n, Linear(basis, p, [-half] * model.k,
                                                                              [half] * model.k))])


def point_seed(model, xu, angles):
    p = np.concatenate([np.atleast_1d(np.asarray(xu, dtype=float)), _sphere_point(model, angles)])
    return StratifiedSet(model.n, [Stratum("pt", 0, model.n, Linear(np.zeros((0, model.n)), p))])


@dataclass
class FlowedSet:
    model: MorseModel
    seed: StratifiedSet
    includes_core: bool = True


def _grid_params(s, count):
    if s.dim == 0:
        return np.zeros((1, 0))
    lo, hi = finite_box(s.rep.lower, s.rep.upper)
    if s.dim == 1:
        return np.linspace(lo[0], hi[0], count)[:, None]
    per = max(2, int(round(count ** (1.0 / s.dim))))
    axes = [np.linspace(lo[i], hi[i], per) for i in range(s.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def co_sphere_points(fs, tols=DEFAULT):
    """``K``: parameters and points where the seed meets the co-sphere."""
    k = fs.model.k
    out = []
    for s in fs.seed.strata:
        if s.dim < k:
            x = s.rep.map(np.zeros((1, 0))) if s.dim == 0 else None
            if x is not None and np.linalg.norm(x[0, :k]) <= tols.point_tol:
                out.append((s, np.zeros(0), x[0]))
            continue
        seeds = _grid_params(s, 257)
        rep = s.rep

        def fun(a):
            return rep.map(a)[:, :k], rep.jac(a)[:, :k, :]

        a, rn, ok = batched_newton(fun, seeds, tol=1e-13)
        inside = np.all((a >= rep.lower) & (a <= rep.upper), axis=1)
        keep = []
        for i in np.flatnonzero(ok & inside):
            if all(np.linalg.norm(a[i] - a[j]) > 1e-8 for j in keep):
                keep.append(i)
        out.extend((s, a[i], rep.map(a[i][None])[0]) for i in keep)
    return out


def check_seed(fs, tols=DEFAULT):
    """Seed lies on the top boundary and is transverse to the co-sphere along K."""
    model = fs.model
    k = model.k
    for s in fs.seed.strata:
        pts, _ = s.sample(32, 0)
        rad = np.linalg.norm(pts[:, k:], axis=1)
        if np.max(np.abs(rad - model.r_plus)) > tols.point_tol:
            raise NonTransverseSeed(f"seed stratum {s.id} leaves the top boundary")
    for s, a, _ in co_sphere_points(fs, tols):
        if s.dim < k:
            raise NonTransverseSeed(f"seed stratum {s.id} too small to be transverse to the co-sphere")
        jac = s.rep.jac(a[None])[0][:k]
        sv = np.linalg.svd(jac, compute_uv=False)
        if sv[-1] <= tols.rank_tol * max(sv[0], 1.0):
            raise NonTransverseSeed(f"seed stratum {s.id} is tangent to the co-sphere")


@dataclass
class ForwardSection:
    """Slice of the flowed set in the bottom fiber ``D_x`` (fiber coordinates)."""

    center: np.ndarray
    points: np.ndarray
    cone_directions: np.ndarray
    params: list = field(default_factory=list)

    def stratified(self):
        m = self.points.shape[1] if self.points.size else self.cone_directions.shape[1]
        strata = [Stratum("x", 0, m, Linear(np.zeros((0, m)), np.zeros(m)))]
        strata += [Stratum(f"q{i}", 0, m, Linear(np.zeros((0, m)), p)) for i, p in enumerate(self.points)]
        return StratifiedSet(m, strata)


def _hit_bottom(model, pts, xhat):
    """Flow points to the bottom boundary; keep those landing in ``D_x``."""
    k = model.k
    xu, xs = pts[:, :k], pts[:, k:]
    nu = np.linalg.norm(xu, axis=1)
    ok = nu > 0
    dirs = np.zeros_like(xu)
    dirs[ok] = xu[ok] / nu[ok, None]
    if k == 1:
        ok &= np.sign(xu[:, 0]) == np.sign(xhat[0])
    else:
        ok &= np.linalg.norm(dirs - xhat, axis=1) <= 1e-9
    # hitting time t = log(r_minus / |x_u|) shrinks x_s by |x_u| / r_minus
    return xs[ok] * (nu[ok] / model.r_minus)[:, None], ok


def _refined_params(s, base_count, k_params):
    """Uniform grid plus geometric refinement around the co-sphere parameters."""
    grid = _grid_params(s, base_count)
    if s.dim != 1:
        return grid
    lo, hi = finite_box(s.rep.lower, s.rep.upper)
    extra = []
    steps = (hi[0] - lo[0]) * 2.0 ** -np.arange(1, 48, 0.25)
    for a0 in k_params:
        for sgn in (-1.0, 1.0):
            extra.append(np.clip(a0[0] + sgn * steps, lo[0], hi[0]))
    if extra:
        grid = np.vstack([grid, np.concatenate(extra)[:, None]])
    return grid


def forward_set_section(fs, x, samples=4097, tols=DEFAULT):
    """``F Sigma+`` sliced by the bottom fiber over ``x`` in the attaching sphere."""
    model = fs.model
    check_seed(fs, tols)
    x = np.asarray(x, dtype=float).ravel()
    if abs(np.linalg.norm(x) - model.r_minus) > tols.point_tol:
        raise StrataflowError("x must lie on the attaching sphere")
    xhat = x / model.r_minus
    k_pts = co_sphere_points(fs, tols)
    cone = np.array([p[model.k:] / np.linalg.norm(p[model.k:]) for _, _, p in k_pts]) if k_pts else \
        np.zeros((0, model.n - model.k))
    out_pts, out_params = [], []
    for s in fs.seed.strata:
        if model.k > 1 and s.dim >= model.k:
            pts, prm = _section_by_newton(model, s, xhat, samples)
        else:
            prm = _refined_params(s, samples, [a for st, a, _ in k_pts if st is s])
            pts = s.rep.map(prm)
        slice_pts, ok = _hit_bottom(model, pts, xhat)
        out_pts.append(slice_pts)
        out_params.append(prm[ok])
    pts = np.vstack(out_pts) if out_pts else np.zeros((0, model.n - model.k))
    return ForwardSection(x, pts, cone, out_params)


def _section_by_newton(model, s, xhat, samples):
    """Parameters whose unstable part points along ``xhat`` (k >= 2)."""
    k = model.k
    proj = np.eye(k) - np.outer(xhat, xhat)
    rep = s.rep
    seeds = _grid_params(s, samples)

    def fun(a):
        p = rep.map(a)
        return p[:, :k] @ proj.T, np.einsum("ij,mjd->mid", proj, rep.jac(a)[:, :k, :])

    a, _, ok = batched_newton(fun, seeds, tol=1e-12)
    inside = np.all((a >= rep.lower) & (a <= rep.upper), axis=1)
    a = a[ok & inside]
    pts = rep.map(a) if a.size else np.zeros((0, model.n))
    good = (pts[:, :k] @ xhat) > 0 if pts.size else np.zeros(0, dtype=bool)
    return pts[good], a[good]


def _unit_angle(u, v):
    """Angle between unit vectors, accurate for tiny angles."""
    return 2 * np.arcsin(np.clip(np.linalg.norm(u - v, axis=-1) / 2, 0, 1))


def magic_fact_deviation(fs, x, radii, samples=4097, tols=DEFAULT):
    """``(r, deviation)``: max angle between section secants within r and cK_x."""
    radii = [float(r) for r in radii]
    sec = forward_set_section(fs, x, samples, tols)
    pts = sec.points
    norms = np.linalg.norm(pts, axis=1) if pts.size else np.zeros(0)
    nz = norms > 0
    dirs = pts[nz] / norms[nz, None]
    norms = norms[nz]
    if sec.cone_directions.shape[0] and dirs.size:
        ang = np.min(_unit_angle(dirs[:, None, :], sec.cone_directions[None, :, :]), axis=1)
    else:
        ang = np.zeros(dirs.shape[0])
    out = []
    for r in radii:
        sel = norms <= r
        out.append((r, float(np.max(ang[sel])) if sel.any() else 0.0))
    return out


def deviation_slope(rows):
    r = np.array([a for a, _ in rows])
    d = np.array([b for _, b in rows])
    keep = d > 0
    if keep.sum() < 2:
        return np.inf
    return float(np.polyfit(np.log(r[keep]), np.log(d[keep]), 1)[0])


# -- tube systems ----------------------------------------------------------

@dataclass
class TubeSystem:
    """Tubes over truncated unstable manifolds of a catalog scenario.

    ``t0_radius`` is the Morse-coordinate radius of the minimum's ball,
    ``trunc_radius`` the Morse radius at which 1-strata are truncated,
    ``collar_width`` the collar width (same units) and ``tube_radius`` the
    fiber half-width in Morse units of the fiber coordinate.
    """

    scenario: object
    t0_radius: float
    trunc_radius: float
    collar_width: float
    tube_radius: float
    strata1: list
    checks: dict = field(default_factory=dict)

    # geometry is only non-trivial for the torus (1-strata s1, s2 through m)

    def morse0(self, x):
        return self.scenario.to_morse("m", x)

    def in_t0(self, x, strict=True):
        r = np.linalg.norm(self.morse0(x), axis=1)
        return r < self.t0_radius if strict else r <= self.t0_radius

    def _axis(self, sid):
        # s1 runs along theta (fiber coordinate phi), s2 along phi
        return (0, 1) if sid == "s1" else (1, 0)

    def base_radius(self, sid, x):
        """Morse distance from the minimum of the base point ``p_1(z)``."""
        along, _ = self._axis(sid)
        y = self.morse0(x)
        return np.abs(y[:, along])

    def fiber_offset(self, sid, x):
        _, across = self._axis(sid)
        return self.morse0(x)[:, across]

    def project(self, sid, x):
        """Fiber projection ``p_1`` onto the 1-stratum."""
        x = np.array(np.atleast_2d(x), dtype=float, copy=True)
        _, across = self._axis(sid)
        x[:, across] = 0.0
        return x

    def project0(self, x):
        return np.broadcast_to(np.asarray(self.scenario.cp("m").point, dtype=float), np.atleast_2d(x).shape).copy()

    def in_base(self, sid, x):
        return self.base_radius(sid, x) >= self.trunc_radius

    def in_tube(self, sid, x, radius=None):
        radius = self.tube_radius if radius is None else radius
        return self.in_base(sid, x) & (np.abs(self.fiber_offset(sid, x)) < radius)

    def collar_coord(self, sid, x):
        return np.clip((self.base_radius(sid, x) - self.trunc_radius) / self.collar_width, 0.0, 1.0)

    def in_collar(self, sid, x, radius=None):
        return self.in_tube(sid, x, radius) & (self.base_radius(sid, x) <= self.trunc_radius + self.collar_width)

    def lam(self, sid, x):
        """Collar function: 0 on the truncation boundary, 1 across the collar."""
        return smoothstep(self.collar_coord(sid, x))


def _fiber_point(scn, sid, base_angle, offset_morse):
    """Point over ``base_angle`` on stratum ``sid`` with Morse fiber offset."""
    phi = 2 * np.arcsin(np.clip(offset_morse / 2, -1, 1))
    if sid == "s1":
        return np.stack([base_angle, phi], axis=-1)
    return np.stack([phi, base_angle], axis=-1)


def check_choices(ts, radius, samples=64):
    """Sampled checks of the tube choices (1)-(3) plus same-index disjointness."""
    scn = ts.scenario
    out = {}
    # (1) the field is radial in Morse coordinates on the minimum's ball
    rng = np.random.default_rng(0)
    y = rng.uniform(-1, 1, size=(samples * 4, 2))
    y = y[np.linalg.norm(y, axis=1) < 1][:samples] * ts.t0_radius
    x = scn.from_morse("m", y)
    h = 1e-6
    vel = (scn.to_morse("m", _step(scn, x, h)) - scn.to_morse("m", _step(scn, x, -h))) / (2 * h)
    out["choice1"] = float(np.max(np.abs(vel + y))) <= 1e-6
    if not ts.strata1:
        out["choice2"] = out["choice3"] = out["disjoint"] = True
        return out
    s = np.linspace(-1, 1, samples) * radius * (1 - 1e-9)
    ok2 = ok3 = disj = True
    theta_c = 2 * np.arcsin(ts.trunc_radius / 2)
    theta_w = 2 * np.arcsin(min(ts.trunc_radius + ts.collar_width, 2.0) / 2)
    for sid in ts.strata1:
        for base in (theta_c, -theta_c):
            z = _fiber_point(scn, sid, np.full_like(s, base), s)
            ok2 &= bool(np.all(ts.in_t0(z)))
        bases = np.concatenate([np.linspace(theta_c, theta_w, samples), -np.linspace(theta_c, theta_w, samples)])
        bb, ss = np.meshgrid(bases, s, indexing="ij")
        z = _fiber_point(scn, sid, bb.ravel(), ss.ravel())
        # E_1 meets T_0 here, so it must sit inside int T_0 (whose single fiber contains every E_1 fiber)
        ok3 &= bool(np.all(ts.in_t0(z)))
    if len(ts.strata1) == 2:
        a, b = ts.strata1
        bases = np.linspace(theta_c, TWO_PI - theta_c, 4 * samples)
        bb, ss = np.meshgrid(bases, s, indexing="ij")
        z = _fiber_point(scn, a, bb.ravel(), ss.ravel())
        disj = not bool(np.any(ts.in_tube(b, z, radius) & ~ts.in_t0(z)))
    out["choice2"], out["choice3"], out["disjoint"] = bool(ok2), bool(ok3), bool(disj)
    return out


def _step(scn, x, h):
    k1 = scn.field(x)
    k2 = scn.field(x + 0.5 * h * k1)
    k3 = scn.field(x + 0.5 * h * k2)
    k4 = scn.field(x + h * k3)
    y = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if isinstance(scn, SphereHeight):
        y = y / np.linalg.norm(y, axis=1, keepdims=True)
    return y


def build_tube_system(scenario, t0_radius=0.8, trunc_radius=0.5, collar_width=0.2,
                      r_max=1.0, r_min=1e-4, iterations=40):
    """Tube radius found by bisection until the sampled choices pass."""
    if isinstance(scenario, str):
        from .scenarios import get_scenario

        scenario = get_scenario(scenario)
    strata1 = [c.id for c in scenario.critical_points if c.index == 1]
    ts = TubeSystem(scenario, t0_radius, trunc_radius, collar_width, r_max, strata1)

    def good(r):
        c = check_choices(ts, r)
        return all(c.values()), c

    ok, checks = good(r_max)
    if not checks["choice1"]:
        raise CannotSatisfyChoices("field is not radial on the minimum's ball")
    if ok:
        ts.tube_radius, ts.checks = r_max, checks
        return ts
    ok_lo, checks_lo = good(r_min)
    if not ok_lo:
        raise CannotSatisfyChoices(f"choices fail down to radius {r_min}")
    lo, hi = r_min, r_max
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if good(mid)[0]:
            lo = mid
        else:
            hi = mid
    ts.tube_radius = lo
    ts.checks = good(lo)[1]
    return ts


# -- unstable manifolds ------------------------------------------------------

def integrate_to_ball(scn, x0, ball_radius, step=1e-3, max_time=50.0):
    """RK4 along the field from ``x0`` until the minimum's Morse ball is reached.

    Returns ``(times, points)`` and an error estimate from step halving.
    """
    def run(h):
        xs, ts = [np.asarray(x0, dtype=float)], [0.0]
        x = xs[0][None, :]
        t = 0.0
        while np.linalg.norm(scn.to_morse("m", x)[0]) > ball_radius:
            x = _step(scn, x, h)
            t += h
            if not np.all(np.isfinite(x)) or not scn.inside_domain(x)[0]:
                raise IntegrationEscape("trajectory left the scenario domain")
            if t > max_time:
                raise IntegrationEscape("trajectory did not reach the minimum's ball")
            xs.append(x[0].copy())
            ts.append(t)
        return np.array(ts), np.array(xs)

    ts, xs = run(step)
    ts2, xs2 = run(step / 2)
    err = float(np.linalg.norm(wrap(xs2[-1] - xs[-1], scn.period))) if len(ts2) and abs(ts2[-1] - ts[-1]) < 2 * step \
        else np.nan
    return ts, xs, err


def unstable_manifold_sampler(scenario, cid, grid=64, chart_radius=0.5, ball_radius=0.8, step=1e-3):
    """Sampled unstable manifold as a parametrized stratum.

    Inside the critical point's Morse chart the closed form ``y e^t`` is
    used; beyond it, fixed-step RK4. The parameter is the flow time from the
    chart boundary, negative on the second branch.
    """
    scn = scenario
    c = scn.cp(cid)
    n = scn.ambient_dim
    if c.index == 0:
        return Stratum(cid, 0, n, Linear(np.zeros((0, n)), c.point))
    if c.index == 1:
        return _saddle_branches(scn, cid, chart_radius, ball_radius, step)
    if c.index == 2 and isinstance(scn, SphereHeight):
        return _sphere_top_cell(scn, chart_radius, ball_radius, step)
    raise StrataflowError("sampler supports index 0, saddles and the sphere maximum")


def _saddle_branches(scn, cid, chart_radius, ball_radius, step):
    from scipy.interpolate import CubicSpline

    sign_dirs = []
    for sgn in (1.0, -1.0):
        y0 = np.array([sgn * chart_radius, 0.0])
        x0 = scn.from_morse(cid, y0)[0]
        ts, xs, _ = integrate_to_ball(scn, x0, ball_radius, step)
        # closed-form piece inside the chart: y(t) = y_start e^t, t from log(1e-6 / r) to 0
        tin = np.linspace(np.log(1e-6 / chart_radius), 0.0, 200)[:-1]
        yin = np.stack([sgn * chart_radius * np.exp(tin), np.zeros_like(tin)], axis=1)
        xin = scn.from_morse(cid, yin)
        times = np.concatenate([tin, ts])
        pts = np.vstack([xin, xs])
        sign_dirs.append((times - times[0], pts))
    (ta, pa), (tb, pb) = sign_dirs
    centre = np.asarray(scn.cp(cid).point, dtype=float)
    times = np.concatenate([-(tb[::-1] + 1e-9), [0.0], ta + 1e-9])
    pts = np.vstack([pb[::-1], centre[None, :], pa])
    pts = centre + wrap(pts - centre, scn.period)
    spline = CubicSpline(times, pts, axis=0)
    deriv = spline.derivative()
    rep = Param(lambda a: spline(a[:, 0]), 1, scn.ambient_dim, [times[0]], [times[-1]],
                jac=lambda a: deriv(a[:, 0])[:, :, None])
    s = Stratum(cid, 1, scn.ambient_dim, rep)
    s.samples = {"times": times, "points": pts}
    return s


def _sphere_top_cell(scn, chart_radius, ball_radius, step):
    from scipy.interpolate import CubicSpline

    y0 = np.array([chart_radius, 0.0])
    x0 = scn.from_morse("M", y0)[0]
    ts, xs, _ = integrate_to_ball(scn, x0, ball_radius, step)
    psi = scn.polar(xs)
    tin = np.linspace(np.log(1e-6 / chart_radius), 0.0, 200)[:-1]
    psi_in = np.pi - 2 * np.arcsin(np.clip(chart_radius * np.exp(tin) / 2, 0, 1))
    times = np.concatenate([tin - tin[0], ts + (0 - tin[0])])
    psis = np.concatenate([psi_in, psi])
    spline = CubicSpline(times, psis)

    def fn(a):
        p = spline(a[:, 0])
        az = a[:, 1]
        return np.stack([np.sin(p) * np.cos(az), np.sin(p) * np.sin(az), -np.cos(p)], axis=1)

    rep = Param(fn, 2, 3, [times[0], -np.pi], [times[-1], np.pi])
    s = Stratum("M", 2, 3, rep)
    s.samples = {"times": times, "polar": psis}
    return s
