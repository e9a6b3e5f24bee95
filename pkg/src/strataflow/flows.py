"""Flows acting on points and strata.

A flow exposes ``apply(x, t)`` on point batches and ``pushforward(s, t)``
on strata. Translation flows push linear strata to linear strata exactly;
integrated vector fields push everything to parametrized strata.
"""

import numpy as np

from . import catalog
from .errors import FlowEvaluationFailure
from .strata import Implicit, Linear, Param, Stratum, StratifiedSet


class Flow:
    period = None
    exact = False

    def apply(self, x, t):
        raise NotImplementedError

    def pushforward(self, s, t):
        rep = s.rep
        if rep.kind == "implicit":
            fn = rep.eq

            def eq(x):
                return fn(self.apply(x, -t))

            pushed = Implicit(eq, rep.codim, rep.ambient_dim, rep.lower - 1.0, rep.upper + 1.0)
            return Stratum(s.id, s.dim, s.ambient_dim, pushed)
        if s.dim == 0:
            x = self.apply(rep.map(np.zeros((1, 0))), t)[0]
            return Stratum(s.id, 0, s.ambient_dim, Linear(np.zeros((0, s.ambient_dim)), x))
        mapper = rep.map

        def fn(a):
            return self.apply(mapper(a), t)

        pushed = Param(fn, s.dim, s.ambient_dim, rep.lower, rep.upper,
                       closure_faces=getattr(rep, "closure_faces", None))
        return Stratum(s.id, s.dim, s.ambient_dim, pushed)

    def pushforward_set(self, sset, t):
        try:
            strata = [self.pushforward(s, t) for s in sset.strata]
        except FloatingPointError as exc:
            raise FlowEvaluationFailure(f"flow failed at t={t}: {exc}") from exc
        return StratifiedSet(sset.ambient_dim, strata, list(sset.frontier), sset.period)

    def group_residual(self, x, s, t):
        """``max |phi^s(phi^t(x)) - phi^(s+t)(x)|`` on sample points."""
        x = np.atleast_2d(x)
        a = self.apply(self.apply(x, t), s)
        b = self.apply(x, s + t)
        return float(np.max(np.linalg.norm(a - b, axis=1)))


class TranslationFlow(Flow):
    exact = True

    def __init__(self, u, period=None):
        self.u = np.asarray(u, dtype=float)
        self.period = period

    def apply(self, x, t):
        return np.atleast_2d(x) + t * self.u

    def pushforward(self, s, t):
        return s.translated(t * self.u)


class LinearConjugate(Flow):
    """``L o phi^t o L^-1`` for an invertible matrix ``L``."""

    def __init__(self, flow, matrix):
        self.flow = flow
        self.matrix = np.asarray(matrix, dtype=float)
        self.inv = np.linalg.inv(self.matrix)
        self.exact = flow.exact

    def apply(self, x, t):
        return self.flow.apply(np.atleast_2d(x) @ self.inv.T, t) @ self.matrix.T

    def pushforward(self, s, t):
        if isinstance(self.flow, TranslationFlow):
            return s.translated(t * (self.matrix @ self.flow.u))
        return Flow.pushforward(self, s, t)


def transform_set(sset, matrix):
    """Image of a stratified set under an invertible linear map."""
    matrix = np.asarray(matrix, dtype=float)
    strata = []
    for s in sset.strata:
        rep = s.rep
        if rep.kind == "linear":
            new = Linear(rep.basis @ matrix.T, matrix @ rep.offset, rep.lower, rep.upper, rep.closure_faces)
        elif rep.kind == "param":
            fn = rep.map
            new = Param(lambda a, fn=fn: fn(a) @ matrix.T, s.dim, s.ambient_dim, rep.lower, rep.upper)
        else:
            inv = np.linalg.inv(matrix)
            eq = rep.eq
            new = Implicit(lambda x, eq=eq: eq(x @ inv.T), rep.codim, rep.ambient_dim)
        strata.append(Stratum(s.id, s.dim, s.ambient_dim, new))
    return StratifiedSet(sset.ambient_dim, strata, list(sset.frontier))


class VectorFieldFlow(Flow):
    """Flow of an autonomous field, integrated with fixed-step RK4."""

    def __init__(self, field, period=None, max_step=1e-2):
        self.field = field
        self.period = period
        self.max_step = float(max_step)

    def apply(self, x, t):
        x = np.array(np.atleast_2d(x), dtype=float, copy=True)
        if t == 0.0:
            return x
        steps = max(1, int(np.ceil(abs(t) / self.max_step)))
        h = t / steps
        f = self.field
        for _ in range(steps):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FlowEvaluationFailure(f"non-finite state at t={t}")
        return x

    def velocity(self, x):
        return self.field(np.atleast_2d(x))


def field_jacobian(field, x):
    return catalog.fd_jacobian(field, np.atleast_2d(x))
