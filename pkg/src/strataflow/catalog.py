"""Built-in named evaluators for serialized strata.

Files never carry code: a parametrized or implicit stratum names one of
the evaluators below and supplies a parameter dictionary. Each builder
returns ``(fn, jac)`` acting on batches; ``jac`` may be ``None``, in which
case a central finite difference is used by the caller.
"""

import numpy as np

from .errors import SerializationError


def fd_jacobian(fn, w, h=1e-6):
    """Central-difference Jacobian of a batched map ``(m, p) -> (m, q)``."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    m, p = w.shape
    cols = []
    for j in range(p):
        step = h * np.maximum(1.0, np.abs(w[:, j]))
        wp = w.copy()
        wm = w.copy()
        wp[:, j] += step
        wm[:, j] -= step
        cols.append((fn(wp) - fn(wm)) / (2 * step)[:, None])
    if not cols:
        q = fn(w).shape[1]
        return np.zeros((m, q, 0))
    return np.stack(cols, axis=2)


# -- parametrizations -------------------------------------------------------

def _circle(params):
    c = np.asarray(params.get("center", [0.0, 0.0]), dtype=float)
    r = float(params.get("radius", 1.0))
    n = c.size
    axes = np.asarray(params.get("axes", np.eye(n)[:2]), dtype=float)
    e1, e2 = axes[0], axes[1]

    def fn(a):
        t = a[:, 0:1]
        return c + r * (np.cos(t) * e1 + np.sin(t) * e2)

    def jac(a):
        t = a[:, 0:1]
        return (r * (-np.sin(t) * e1 + np.cos(t) * e2))[:, :, None]

    return fn, jac


def _helix(params):
    r = float(params.get("radius", 1.0))
    pitch = float(params.get("pitch", 1.0))

    def fn(a):
        t = a[:, 0]
        return np.stack([r * np.cos(t), r * np.sin(t), pitch * t], axis=1)

    def jac(a):
        t = a[:, 0]
        return np.stack([-r * np.sin(t), r * np.cos(t), np.full_like(t, pitch)], axis=1)[:, :, None]

    return fn, jac


def _quadratic_graph(params):
    c = np.asarray(params["coeffs"], dtype=float)

    def fn(a):
        return np.hstack([a, (a * a) @ c[:, None]])

    def jac(a):
        m, d = a.shape
        top = np.broadcast_to(np.eye(d), (m, d, d))
        bottom = (2 * a * c)[:, None, :]
        return np.concatenate([top, bottom], axis=1)

    return fn, jac


def _sphere_patch(params):
    # (polar angle from +z, azimuth) on a sphere in R^3
    c = np.asarray(params.get("center", [0.0, 0.0, 0.0]), dtype=float)
    r = float(params.get("radius", 1.0))

    def fn(a):
        p, q = a[:, 0], a[:, 1]
        return c + r * np.stack([np.sin(p) * np.cos(q), np.sin(p) * np.sin(q), np.cos(p)], axis=1)

    def jac(a):
        p, q = a[:, 0], a[:, 1]
        dp = np.stack([np.cos(p) * np.cos(q), np.cos(p) * np.sin(q), -np.sin(p)], axis=1)
        dq = np.stack([-np.sin(p) * np.sin(q), np.sin(p) * np.cos(q), np.zeros_like(p)], axis=1)
        return r * np.stack([dp, dq], axis=2)

    return fn, jac


def _torus_surface(params):
    big = float(params.get("R", 2.0))
    small = float(params.get("r", 1.0))

    def fn(a):
        u, v = a[:, 0], a[:, 1]
        rad = big + small * np.cos(v)
        return np.stack([rad * np.cos(u), rad * np.sin(u), small * np.sin(v)], axis=1)

    return fn, None


def _spline(params):
    from scipy.interpolate import CubicSpline

    knots = np.asarray(params["knots"], dtype=float)
    values = np.asarray(params["values"], dtype=float)
    spline = CubicSpline(knots, values, axis=0)
    deriv = spline.derivative()

    def fn(a):
        return spline(a[:, 0])

    def jac(a):
        return deriv(a[:, 0])[:, :, None]

    return fn, jac


def _great_circle(params):
    # unit circle spanned by two orthonormal vectors
    axes = np.asarray(params["axes"], dtype=float)
    return _circle({"center": np.zeros(axes.shape[1]), "radius": 1.0, "axes": axes})


PARAM_EVALUATORS = {
    "circle": _circle,
    "helix": _helix,
    "quadratic_graph": _quadratic_graph,
    "sphere_patch": _sphere_patch,
    "torus_surface": _torus_surface,
    "spline": _spline,
    "great_circle": _great_circle,
}


# -- implicit equations ----------------------------------------------------

def _sphere_eq(params):
    c = np.asarray(params.get("center"), dtype=float)
    r = float(params.get("radius", 1.0))

    def fn(x):
        d = x - c
        return (np.sum(d * d, axis=1) - r * r)[:, None]

    def jac(x):
        return (2 * (x - c))[:, None, :]

    return fn, jac


def _graph_eq(params):
    # last coordinate equals sum c_i x_i^2
    c = np.asarray(params["coeffs"], dtype=float)

    def fn(x):
        return (x[:, -1] - (x[:, :-1] ** 2) @ c)[:, None]

    def jac(x):
        g = np.hstack([-2 * x[:, :-1] * c, np.ones((x.shape[0], 1))])
        return g[:, None, :]

    return fn, jac


def _affine_eq(params):
    # rows of A x = b
    a = np.atleast_2d(np.asarray(params["A"], dtype=float))
    b = np.asarray(params["b"], dtype=float)

    def fn(x):
        return x @ a.T - b

    def jac(x):
        return np.broadcast_to(a, (x.shape[0],) + a.shape)

    return fn, jac


IMPLICIT_EVALUATORS = {
    "sphere": _sphere_eq,
    "quadratic_graph": _graph_eq,
    "affine": _affine_eq,
}


def build(kind, name, params):
    table = PARAM_EVALUATORS if kind == "param" else IMPLICIT_EVALUATORS
    try:
        builder = table[name]
    except KeyError:
        raise SerializationError(f"unknown {kind} evaluator {name!r}") from None
    return builder(params)
