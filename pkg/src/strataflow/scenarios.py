"""Built-in global scenarios with simple gradient-like fields.

``torus_height`` lives on the flat torus ``(theta, phi)`` with period 2 pi
and height ``-cos(theta) - cos(phi)``: a minimum, two saddles and a
maximum, the critical structure of the upright torus of revolution.
``sphere_height`` is the round unit sphere in R^3 with the height
function and its minimum at the south pole.

In both cases the field is simple near each critical point: in the Morse
coordinates ``2 sin(angle / 2)`` it is exactly ``(x_u, -x_s)``.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import wrap
from .strata import Linear, Stratum, StratifiedSet

# half-width (radians) of the per-coordinate region where the field is simple
SIMPLE_HALF_WIDTH = np.pi / 3
TWO_PI = 2 * np.pi


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _angle_speed(theta):
    """Per-coordinate speed: -2 tan(theta/2) near 0, 2 tan((theta-pi)/2) near pi."""
    th = wrap(np.asarray(theta, dtype=float)[..., None], (TWO_PI,))[..., 0]
    a = np.abs(th)
    w = smoothstep((a - SIMPLE_HALF_WIDTH) / (np.pi - 2 * SIMPLE_HALF_WIDTH))
    near0 = a < np.pi - SIMPLE_HALF_WIDTH
    nearpi = a > SIMPLE_HALF_WIDTH
    g0 = np.where(near0, -2 * np.tan(np.where(near0, th, 0.0) / 2), 0.0)
    dpi = wrap((th - np.pi)[..., None], (TWO_PI,))[..., 0]
    g1 = np.where(nearpi, 2 * np.tan(np.where(nearpi, dpi, 0.0) / 2), 0.0)
    return (1 - w) * g0 + w * g1


def morse_coord(angle, center):
    """``2 sin((angle - center) / 2)`` with the difference wrapped."""
    d = wrap((np.asarray(angle, dtype=float) - center)[..., None], (TWO_PI,))[..., 0]
    return 2 * np.sin(d / 2)


def morse_coord_inverse(y, center):
    return center + 2 * np.arcsin(np.clip(np.asarray(y, dtype=float) / 2, -1, 1))


def morse_coord_deriv(angle, center):
    d = wrap((np.asarray(angle, dtype=float) - center)[..., None], (TWO_PI,))[..., 0]
    return np.cos(d / 2)


@dataclass(frozen=True)
class CriticalPoint:
    id: str
    point: tuple
    index: int


class TorusHeight:
    name = "torus_height"
    ambient_dim = 2
    manifold_dim = 2
    period = (TWO_PI, TWO_PI)

    def __init__(self):
        self.critical_points = [
            CriticalPoint("m", (0.0, 0.0), 0),
            CriticalPoint("s1", (np.pi, 0.0), 1),
            CriticalPoint("s2", (0.0, np.pi), 1),
            CriticalPoint("M", (np.pi, np.pi), 2),
        ]

    def cp(self, cid):
        return next(c for c in self.critical_points if c.id == cid)

    def height(self, x):
        x = np.atleast_2d(x)
        return -np.cos(x[:, 0]) - np.cos(x[:, 1])

    def field(self, x):
        x = np.atleast_2d(x)
        return np.stack([_angle_speed(x[:, 0]), _angle_speed(x[:, 1])], axis=1)

    def to_morse(self, cid, x):
        c = self.cp(cid).point
        x = np.atleast_2d(x)
        return np.stack([morse_coord(x[:, 0], c[0]), morse_coord(x[:, 1], c[1])], axis=1)

    def from_morse(self, cid, y):
        c = self.cp(cid).point
        y = np.atleast_2d(y)
        return np.stack([morse_coord_inverse(y[:, 0], c[0]), morse_coord_inverse(y[:, 1], c[1])], axis=1)

    def morse_jacobian_diag(self, cid, x):
        c = self.cp(cid).point
        x = np.atleast_2d(x)
        return np.stack([morse_coord_deriv(x[:, 0], c[0]), morse_coord_deriv(x[:, 1], c[1])], axis=1)

    def in_simple_chart(self, cid, x):
        c = np.asarray(self.cp(cid).point)
        d = wrap(np.atleast_2d(x) - c, self.period)
        return np.all(np.abs(d) < SIMPLE_HALF_WIDTH, axis=1)

    def unstable_stratum(self, cid):
        """Exact unstable manifold as a stratum (known in closed form here)."""
        c = self.cp(cid)
        if c.index == 0:
            return Stratum(cid, 0, 2, Linear(np.zeros((0, 2)), c.point))
        if c.id == "s1":
            return Stratum("s1", 1, 2, Linear([[1.0, 0.0]], c.point, [-np.pi], [np.pi]))
        if c.id == "s2":
            return Stratum("s2", 1, 2, Linear([[0.0, 1.0]], c.point, [-np.pi], [np.pi]))
        return Stratum(cid, 2, 2, Linear(np.eye(2), c.point, [-np.pi, -np.pi], [np.pi, np.pi]))

    def sigma(self, max_dim=1):
        """Union of unstable manifolds of dimension at most ``max_dim``."""
        strata = [self.unstable_stratum(c.id) for c in self.critical_points if c.index <= max_dim]
        ids = {s.id for s in strata}
        frontier = [(lo, hi) for lo, hi in (("m", "s1"), ("m", "s2"), ("m", "M"), ("s1", "M"), ("s2", "M"))
                    if lo in ids and hi in ids]
        return StratifiedSet(2, strata, frontier, self.period)

    def inside_domain(self, x):
        return np.all(np.isfinite(np.atleast_2d(x)), axis=1)


def _sphere_speed_factor(psi):
    """``g(psi) / sin(psi)`` for the polar speed g; smooth at both poles."""
    psi = np.asarray(psi, dtype=float)
    w = smoothstep((psi - SIMPLE_HALF_WIDTH) / (np.pi - 2 * SIMPLE_HALF_WIDTH))
    c2 = np.cos(psi / 2) ** 2
    s2 = np.sin(psi / 2) ** 2
    h0 = np.where(c2 > 1e-3, -1.0 / np.maximum(c2, 1e-3), 0.0)
    h1 = np.where(s2 > 1e-3, -1.0 / np.maximum(s2, 1e-3), 0.0)
    return (1 - w) * h0 + w * h1


class SphereHeight:
    name = "sphere_height"
    ambient_dim = 3
    manifold_dim = 2
    period = None

    def __init__(self):
        self.critical_points = [
            CriticalPoint("m", (0.0, 0.0, -1.0), 0),
            CriticalPoint("M", (0.0, 0.0, 1.0), 2),
        ]

    def cp(self, cid):
        return next(c for c in self.critical_points if c.id == cid)

    def height(self, x):
        return np.atleast_2d(x)[:, 2]

    def polar(self, x):
        """Angle from the south pole."""
        return np.arccos(np.clip(-np.atleast_2d(x)[:, 2], -1, 1))

    def field(self, x):
        x = np.atleast_2d(x)
        z = x[:, 2]
        h = _sphere_speed_factor(self.polar(x))
        return h[:, None] * np.stack([-z * x[:, 0], -z * x[:, 1], 1 - z * z], axis=1)

    def to_morse(self, cid, x):
        """Lambert coordinates centred at the critical point."""
        x = np.atleast_2d(x)
        sign = -1.0 if cid == "m" else 1.0
        denom = np.sqrt(np.maximum((1 + sign * x[:, 2]) / 2, 1e-300))
        return x[:, :2] / denom[:, None]

    def from_morse(self, cid, y):
        y = np.atleast_2d(y)
        r = np.linalg.norm(y, axis=1)
        psi = 2 * np.arcsin(np.clip(r / 2, 0, 1))
        a = np.arctan2(y[:, 1], y[:, 0])
        sign = -1.0 if cid == "m" else 1.0
        return np.stack([np.sin(psi) * np.cos(a), np.sin(psi) * np.sin(a), sign * np.cos(psi)], axis=1)

    def in_simple_chart(self, cid, x):
        psi = self.polar(x)
        return psi < SIMPLE_HALF_WIDTH if cid == "m" else psi > np.pi - SIMPLE_HALF_WIDTH

    def unstable_stratum(self, cid):
        c = self.cp(cid)
        if c.index == 0:
            return Stratum(cid, 0, 3, Linear(np.zeros((0, 3)), c.point))
        raise NotImplementedError("the open 2-cell is sampled, not stored exactly")

    def sigma(self, max_dim=1):
        return StratifiedSet(3, [self.unstable_stratum("m")], [])

    def inside_domain(self, x):
        x = np.atleast_2d(x)
        return np.abs(np.linalg.norm(x, axis=1) - 1.0) < 1e-3


SCENARIOS = {"torus_height": TorusHeight, "sphere_height": SphereHeight}


def get_scenario(name):
    try:
        return SCENARIOS[name]()
    except KeyError:
        from .errors import SerializationError

        raise SerializationError(f"unknown scenario {name!r}") from None
