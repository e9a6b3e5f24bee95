"""Numerical tolerances used across the package."""

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    """Bundle of tolerances.

    ``rank_tol`` is relative to the largest singular value; ``angle_tol``
    is the smallest transversality angle (radians) still counted as
    transverse.
    """

    rank_tol: float = 1e-8
    point_tol: float = 1e-6
    cocycle_tol: float = 1e-8
    angle_tol: float = 1e-8

    def with_overrides(self, **kwargs):
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


DEFAULT = Tolerances()
