import numpy as np
import pytest

from strataflow.strata import Linear, Stratum, StratifiedSet


def linear(sid, basis, offset, lower=None, upper=None):
    basis = np.asarray(basis, dtype=float)
    n = len(offset)
    basis = basis.reshape(-1, n)
    return Stratum(sid, basis.shape[0], n, Linear(basis, offset, lower, upper))


def cross_r2():
    """Coordinate axes of the plane with the origin as a separate stratum."""
    o = linear("o", np.zeros((0, 2)), [0.0, 0.0])
    strata = [o]
    for i, e in enumerate(np.eye(2)):
        strata.append(linear(f"a{i}+", e, [0.0, 0.0], [0.0], [np.inf]))
        strata.append(linear(f"a{i}-", e, [0.0, 0.0], [-np.inf], [0.0]))
    return StratifiedSet(2, strata, [("o", s.id) for s in strata[1:]])


def coordinate_planes_r3():
    """Union of the coordinate planes of R^3: open quadrants, half-axes and the origin."""
    strata = [linear("o", np.zeros((0, 3)), [0.0, 0.0, 0.0])]
    frontier = []
    for i in range(3):
        e = np.eye(3)[i]
        for sign, tag in ((1, "+"), (-1, "-")):
            lo, hi = ([0.0], [np.inf]) if sign > 0 else ([-np.inf], [0.0])
            strata.append(linear(f"x{i}{tag}", e, [0.0, 0.0, 0.0], lo, hi))
            frontier.append(("o", f"x{i}{tag}"))
    for i in range(3):
        j, k = [a for a in range(3) if a != i]
        basis = np.eye(3)[[j, k]]
        for sj in (1, -1):
            for sk in (1, -1):
                lo = [0.0 if sj > 0 else -np.inf, 0.0 if sk > 0 else -np.inf]
                hi = [np.inf if sj > 0 else 0.0, np.inf if sk > 0 else 0.0]
                sid = f"q{i}{'+' if sj > 0 else '-'}{'+' if sk > 0 else '-'}"
                strata.append(linear(sid, basis, [0.0, 0.0, 0.0], lo, hi))
                frontier += [("o", sid), (f"x{j}{'+' if sj > 0 else '-'}", sid),
                             (f"x{k}{'+' if sk > 0 else '-'}", sid)]
    return StratifiedSet(3, strata, frontier)


@pytest.fixture
def cross():
    return cross_r2()


@pytest.fixture
def planes3():
    return coordinate_planes_r3()
