"""Averaged attaching maps, cellular boundaries and homology.

The attaching map of a cell follows the cascade over a chain of adhering
strata: the projection of the highest tube away from its collar, the arc
``gamma_z(lambda(z))`` on the collar, and so on down to the projection onto
the lowest stratum. Degrees come from signed endpoint counts (1-cells) and
winding of the characteristic angle (2-cells); homology from the Smith
normal form of the integer boundary matrices.
"""

from dataclasses import dataclass, field

import numpy as np
from sympy import Matrix, ZZ
from sympy.matrices.normalforms import invariant_factors

from .errors import ChainComplexViolation, SamplingTooCoarse, StrataflowError, UnresolvedMembership
from .linalg import wrap
from .morse import TubeSystem, build_tube_system
from .scenarios import TWO_PI, SphereHeight, TorusHeight, get_scenario
from .tolerances import DEFAULT


class TorusTubes:
    """Tube interface over a :class:`TubeSystem` of ``torus_height``."""

    def __init__(self, ts: TubeSystem):
        self.ts = ts
        self.scn = ts.scenario
        self.m = np.asarray(self.scn.cp("m").point, dtype=float)

    def in_tube(self, sid, z):
        if sid == "m":
            return self.ts.in_t0(z)
        return self.ts.in_tube(sid, z)

    def in_collar(self, sid, z):
        if sid == "m":
            return np.zeros(np.atleast_2d(z).shape[0], dtype=bool)
        return self.ts.in_collar(sid, z)

    def project(self, sid, z):
        if sid == "m":
            return self.ts.project0(z)
        return self.ts.project(sid, z)

    def lam(self, sid, z):
        return self.ts.lam(sid, z)

    def arc(self, lower, sid, z, s):
        """Straight segment in Morse coordinates from ``p_lower(z)`` to ``p_sid(z)``."""
        if lower != "m":
            raise StrataflowError("arcs start at the minimum in this catalog")
        y = self.scn.to_morse("m", self.ts.project(sid, z))
        return self.scn.from_morse("m", np.atleast_1d(s)[:, None] * y)

    def boundary_distance(self, sid, z):
        """Distance in the membership coordinates to the tube's boundary."""
        if sid == "m":
            return np.abs(np.linalg.norm(self.ts.morse0(z), axis=1) - self.ts.t0_radius)
        off = np.abs(np.abs(self.ts.fiber_offset(sid, z)) - self.ts.tube_radius)
        base = np.abs(self.ts.base_radius(sid, z) - self.ts.trunc_radius)
        return np.minimum(off, np.where(np.abs(self.ts.fiber_offset(sid, z)) < self.ts.tube_radius, base, np.inf))


class SphereTubes:
    """Only the minimum's ball exists on ``sphere_height``."""

    def __init__(self, ts):
        self.ts = ts
        self.scn = ts.scenario

    def in_tube(self, sid, z):
        return self.ts.in_t0(z)

    def in_collar(self, sid, z):
        return np.zeros(np.atleast_2d(z).shape[0], dtype=bool)

    def project(self, sid, z):
        return self.ts.project0(z)

    def boundary_distance(self, sid, z):
        return np.abs(np.linalg.norm(self.ts.morse0(z), axis=1) - self.ts.t0_radius)


def tubes_for(ts):
    return TorusTubes(ts) if isinstance(ts.scenario, TorusHeight) else SphereTubes(ts)


@dataclass
class AttachResult:
    points: np.ndarray
    branches: list
    unresolved: np.ndarray


def attach_general(z, chain, tubes, tols=DEFAULT):
    """Cascaded attaching map over ``chain = (i_1, ..., i_r, k)``.

    Branch labels: ``p:<id>`` for a projection, ``gamma:<id>`` for an arc.
    Membership within ``point_tol`` of a tube boundary is flagged in
    ``unresolved`` and settled by the cascade order.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    lower = list(chain[:-1])
    if not lower:
        raise StrataflowError("chain needs at least one stratum below the cell")
    if len(chain) > 3:
        import warnings

        warnings.warn("chains longer than three strata follow the literal cascade (untested territory)")
    m = z.shape[0]
    out = np.full(z.shape, np.nan)
    label = np.array([""] * m, dtype=object)
    todo = np.ones(m, dtype=bool)
    unresolved = np.zeros(m, dtype=bool)
    for sid in lower:
        unresolved |= tubes.boundary_distance(sid, z) <= tols.point_tol
    r = len(lower)
    top = lower[-1]
    if r >= 2:
        tube = tubes.in_tube(top, z)
        col = tubes.in_collar(top, z)
        sel = todo & tube & ~col
        out[sel] = tubes.project(top, z[sel])
        label[sel] = f"p:{top}"
        todo &= ~sel
    for ell in range(r - 1, 0, -1):
        sid, prev = lower[ell], lower[ell - 1]
        col = tubes.in_collar(sid, z)
        if ell < r - 1:
            col &= ~tubes.in_collar(prev, z)
        sel = todo & col
        if sel.any():
            lam = tubes.lam(sid, z[sel])
            out[sel] = np.vstack([tubes.arc(prev, sid, z[sel][i:i + 1], lam[i:i + 1]) for i in range(sel.sum())])
        label[sel] = f"gamma:{sid}"
        todo &= ~sel
    out[todo] = tubes.project(lower[0], z[todo])
    label[todo] = f"p:{lower[0]}"
    return AttachResult(out, list(label), unresolved)


def attach_three_strata(z, i, j, tubes, tols=DEFAULT):
    """The three-branch averaged attachment for strata ``i < j < cell``."""
    return attach_general(z, (i, j, "cell"), tubes, tols)


@dataclass
class AttachingMap:
    cell: str
    dim: int
    domain: np.ndarray
    images: np.ndarray
    branches: list
    chains: list = field(default_factory=list)

    def to_json(self, stride=1):
        return {"id": self.cell, "dim": self.dim,
                "attach_samples": np.asarray(self.images[::stride]).tolist(),
                "branch_trace": list(self.branches[::stride])}


def _square_loop(delta, count):
    """Boundary of ``[delta, 2 pi - delta]^2`` traversed counter-clockwise."""
    lo, hi = delta, TWO_PI - delta
    q = count // 4
    s = np.linspace(0, 1, q, endpoint=False)
    edges = [np.stack([lo + (hi - lo) * s, np.full(q, lo)], 1),
             np.stack([np.full(q, hi), lo + (hi - lo) * s], 1),
             np.stack([hi - (hi - lo) * s, np.full(q, hi)], 1),
             np.stack([np.full(q, lo), hi - (hi - lo) * s], 1)]
    return np.vstack(edges)


def _torus_cell_of(z, ts):
    """Which strata chain applies at each boundary point of the top cell."""
    chains = []
    for p in z:
        p = p[None, :]
        if ts.in_tube("s1", p)[0]:
            chains.append(("m", "s1", "M"))
        elif ts.in_tube("s2", p)[0]:
            chains.append(("m", "s2", "M"))
        else:
            chains.append(("m", "M"))
    return chains


def _evaluate_chains(z, chains, tubes, tols):
    out = np.zeros_like(z)
    labels = [""] * len(z)
    for ch in set(chains):
        idx = [i for i, c in enumerate(chains) if c == ch]
        res = attach_general(z[idx], ch, tubes, tols)
        out[idx] = res.points
        for k, i in enumerate(idx):
            labels[i] = res.branches[k]
    return out, labels


def torus_top_attaching_map(ts, samples=4096, tols=DEFAULT, continuity_tol=None, max_refine=6):
    tubes = TorusTubes(ts)
    delta = np.arcsin(ts.tube_radius / 2)  # fiber Morse offset 2 sin(delta / 2) ~ half the tube radius
    u = np.linspace(0.0, 1.0, samples, endpoint=False)
    z = _square_loop(delta, samples)
    chains = _torus_cell_of(z, ts)
    img, labels = _evaluate_chains(z, chains, tubes, tols)
    tol = continuity_tol if continuity_tol is not None else 0.05 * skeleton_diameter(ts.scenario)
    for _ in range(max_refine):
        jumps = np.linalg.norm(wrap(np.roll(img, -1, axis=0) - img, ts.scenario.period), axis=1)
        bad = np.flatnonzero(jumps > tol)
        if bad.size == 0:
            break
        new_u = (u[bad] + np.where(bad + 1 < len(u), u[(bad + 1) % len(u)], 1.0)) / 2
        zz = _loop_at(delta, new_u)
        ch = _torus_cell_of(zz, ts)
        ii, ll = _evaluate_chains(zz, ch, tubes, tols)
        order = np.argsort(np.concatenate([u, new_u]))
        u = np.concatenate([u, new_u])[order]
        z = np.vstack([z, zz])[order]
        img = np.vstack([img, ii])[order]
        labels = [(labels + ll)[i] for i in order]
        chains = [(chains + ch)[i] for i in order]
    else:
        raise SamplingTooCoarse("attaching loop still jumps after refinement")
    return AttachingMap("M", 2, z, img, labels, chains)


def _loop_at(delta, u):
    lo, hi = delta, TWO_PI - delta
    e = np.floor(u * 4).astype(int)
    s = u * 4 - e
    pts = np.zeros((u.size, 2))
    for i, (ei, si) in enumerate(zip(e, s)):
        if ei == 0:
            pts[i] = (lo + (hi - lo) * si, lo)
        elif ei == 1:
            pts[i] = (hi, lo + (hi - lo) * si)
        elif ei == 2:
            pts[i] = (hi - (hi - lo) * si, hi)
        else:
            pts[i] = (lo, hi - (hi - lo) * si)
    return pts


def torus_edge_attaching_map(ts, sid, tols=DEFAULT):
    """Endpoints of the truncated 1-cell, sent to the minimum."""
    tubes = TorusTubes(ts)
    theta_c = 2 * np.arcsin(ts.trunc_radius / 2)
    ends = np.array([theta_c, TWO_PI - theta_c])
    z = np.stack([ends, np.zeros(2)], 1) if sid == "s1" else np.stack([np.zeros(2), ends], 1)
    res = attach_general(z, ("m", sid), tubes, tols)
    return AttachingMap(sid, 1, z, res.points, res.branches, [("m", sid)] * 2)


def sphere_top_attaching_map(ts, samples=4096, radius=None, tols=DEFAULT):
    scn = ts.scenario
    tubes = SphereTubes(ts)
    r = 0.5 * ts.t0_radius if radius is None else radius
    a = np.linspace(0, TWO_PI, samples, endpoint=False)
    y = r * np.stack([np.cos(a), np.sin(a)], 1)
    z = scn.from_morse("m", y)
    res = attach_general(z, ("m", "M"), tubes, tols)
    return AttachingMap("M", 2, z, res.points, res.branches, [("m", "M")] * samples)


def skeleton_diameter(scn):
    if isinstance(scn, TorusHeight):
        return float(np.hypot(np.pi, np.pi))
    return 2.0


def _char_angle(scn, sid, y, tols):
    """Angle coordinate on the open 1-cell ``sid``; 0 off the cell."""
    y = np.atleast_2d(y)
    along, across = (0, 1) if sid == "s1" else (1, 0)
    ang = np.mod(y[:, along], TWO_PI)
    on = (np.abs(wrap(y[:, across:across + 1], (TWO_PI,))[:, 0]) <= tols.point_tol) \
        & (np.abs(wrap(ang[:, None], (TWO_PI,))[:, 0]) > tols.point_tol)
    return np.where(on, ang, 0.0)


def cell_boundary_degree(am, target, scenario, tols=DEFAULT, continuity_tol=None):
    """Degree of the attaching map onto the target cell (dims at most 2)."""
    if am.dim == 1:
        # endpoints with sign: -1 at the start, +1 at the end of the 1-cell
        signs = np.array([-1, 1])
        hits = np.array([_on_point(scenario, target, y, tols) for y in am.images])
        return int(np.sum(signs[hits]))
    if am.dim != 2:
        raise StrataflowError("cells of dimension at most 2 only")
    tol = continuity_tol if continuity_tol is not None else 0.05 * skeleton_diameter(scenario)
    per = scenario.period
    jumps = np.linalg.norm(wrap(np.roll(am.images, -1, axis=0) - am.images, per), axis=1) if per \
        else np.linalg.norm(np.roll(am.images, -1, axis=0) - am.images, axis=1)
    if np.any(jumps > tol):
        raise SamplingTooCoarse(f"image jump {np.max(jumps):.3g} exceeds continuity_tol {tol:.3g}")
    ang = _char_angle(scenario, target, am.images, tols)
    d = wrap((np.roll(ang, -1) - ang)[:, None], (TWO_PI,))[:, 0]
    return int(np.rint(np.sum(d) / TWO_PI))


def _on_point(scn, cid, y, tols):
    p = np.asarray(scn.cp(cid).point, dtype=float)
    d = wrap(y - p, scn.period) if scn.period else y - p
    return bool(np.linalg.norm(d) <= tols.point_tol)


@dataclass
class CWComplexModel:
    cells: dict
    boundaries: dict
    attaching: dict = field(default_factory=dict)

    def cells_of_dim(self, k):
        return [c for c, d in self.cells.items() if d == k]

    def check_chain_complex(self):
        for k in range(1, max(self.cells.values(), default=0)):
            a, b = self.boundaries.get(k), self.boundaries.get(k + 1)
            if a is None or b is None or a.size == 0 or b.size == 0:
                continue
            prod = a.astype(np.int64) @ b.astype(np.int64)
            if np.any(prod != 0):
                raise ChainComplexViolation(f"boundary composite in degree {k + 1} is non-zero")

    def flip_orientation(self, cid):
        """Negate one cell's orientation (row and column of the boundary matrices)."""
        k = self.cells[cid]
        idx = self.cells_of_dim(k).index(cid)
        out = {d: m.copy() for d, m in self.boundaries.items()}
        if k in out and out[k].size:
            out[k][:, idx] *= -1
        if k + 1 in out and out[k + 1].size:
            out[k + 1][idx, :] *= -1
        return CWComplexModel(dict(self.cells), out, dict(self.attaching))

    def to_json(self, stride=16):
        return {"cells": [dict({"id": c, "dim": d},
                               **({} if c not in self.attaching else
                                  {k: v for k, v in self.attaching[c].to_json(stride).items() if k not in ("id", "dim")}))
                          for c, d in self.cells.items()],
                "boundary_matrices": {str(k): m.tolist() for k, m in self.boundaries.items()},
                "homology": [{"betti": b, "torsion": t} for b, t in homology_from_cw(self)]}


def assemble_cw(scenario, tols=DEFAULT, samples=4096, tubes=None):
    """One cell per critical point; boundary matrices from attaching degrees."""
    scn = get_scenario(scenario) if isinstance(scenario, str) else scenario
    ts = tubes or build_tube_system(scn)
    cells = {c.id: c.index for c in scn.critical_points}
    dims = sorted(set(cells.values()))
    attaching = {}
    if isinstance(scn, TorusHeight):
        for sid in ("s1", "s2"):
            attaching[sid] = torus_edge_attaching_map(ts, sid, tols)
        attaching["M"] = torus_top_attaching_map(ts, samples, tols)
    elif isinstance(scn, SphereHeight):
        attaching["M"] = sphere_top_attaching_map(ts, samples, tols=tols)
    boundaries = {}
    for k in range(1, max(dims) + 1):
        rows = [c for c, d in cells.items() if d == k - 1]
        cols = [c for c, d in cells.items() if d == k]
        mat = np.zeros((len(rows), len(cols)), dtype=np.int64)
        for j, c in enumerate(cols):
            for i, r in enumerate(rows):
                mat[i, j] = cell_boundary_degree(attaching[c], r, scn, tols)
        boundaries[k] = mat
    model = CWComplexModel(cells, boundaries, attaching)
    model.check_chain_complex()
    return model


def homology_from_cw(model):
    """Betti numbers and torsion per dimension via Smith normal form."""
    model.check_chain_complex()
    top = max(model.cells.values(), default=-1)
    ranks, torsion = {}, {}
    for k, mat in model.boundaries.items():
        if mat.size == 0:
            ranks[k], torsion[k] = 0, []
            continue
        facs = [int(abs(f)) for f in invariant_factors(Matrix(mat.tolist()), domain=ZZ) if f != 0]
        ranks[k] = len(facs)
        torsion[k] = [f for f in facs if f > 1]
    out = []
    for k in range(top + 1):
        ck = len(model.cells_of_dim(k))
        betti = ck - ranks.get(k, 0) - ranks.get(k + 1, 0)
        out.append((betti, torsion.get(k + 1, [])))
    return out


def branch_coherence(ts, count=10000, rng=0, tols=DEFAULT):
    """Max disagreement of adjacent cascade branches at their common boundary.

    Samples the two collar edges crossed by boundary loops: the top edge
    (projection vs arc at lambda = 1) and the truncation edge (arc at
    lambda = 0 vs projection to the minimum).
    """
    rng = np.random.default_rng(rng)
    tubes = TorusTubes(ts)
    scn = ts.scenario
    worst = 0.0
    pts = []
    for edge in ("top", "trunc"):
        radius = ts.trunc_radius + (ts.collar_width if edge == "top" else 0.0)
        for sid in ("s1", "s2"):
            n = count // 4
            side = rng.choice([-1.0, 1.0], n)
            off = rng.uniform(-1, 1, n) * ts.tube_radius * (1 - 1e-6)
            y = np.zeros((n, 2))
            along, across = (0, 1) if sid == "s1" else (1, 0)
            y[:, along] = side * radius
            y[:, across] = off
            z = scn.from_morse("m", y)
            arc = np.vstack([tubes.arc("m", sid, z[i:i + 1], np.array([ts.lam(sid, z[i:i + 1])[0]]))
                             for i in range(n)])
            other = tubes.project(sid, z) if edge == "top" else tubes.project("m", z)
            worst = max(worst, float(np.max(np.linalg.norm(wrap(arc - other, scn.period), axis=1))))
            pts.append(arc)
            pts.append(other)
    return worst, np.vstack(pts)


def skeleton_distance(scn, y):
    """Distance to the 1-skeleton of ``torus_height``."""
    y = np.atleast_2d(y)
    d1 = np.abs(wrap(y[:, 1:2], (TWO_PI,))[:, 0])
    d2 = np.abs(wrap(y[:, 0:1], (TWO_PI,))[:, 0])
    return np.minimum(d1, d2)
