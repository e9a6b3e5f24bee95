"""JSON documents for stratified sets and cone bundles.

Files never carry code. Parametrized and implicit strata name a catalog
evaluator plus parameters; infinite bounds are written as ``null``.
"""

import numpy as np

from .errors import SerializationError
from .strata import (Chart, ConeBundle, Implicit, Linear, Param, RadialCone, Stratum,
                     StratifiedSet, Link)


def _bounds_out(a):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def _bounds_in(a, d, fill):
    if a is None:
        return None
    if len(a) != d:
        raise SerializationError(f"bounds need {d} entries, got {len(a)}")
    return np.array([fill if v is None else float(v) for v in a])


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def stratum_to_json(s):
    rep = s.rep
    if rep.kind == "linear":
        payload = {"basis": rep.basis.tolist(), "offset": rep.offset.tolist(),
                   "lower": _bounds_out(rep.lower), "upper": _bounds_out(rep.upper)}
    else:
        name = getattr(rep, "evaluator", None)
        if name is None:
            raise SerializationError(f"stratum {s.id!r} has no catalog evaluator and cannot be written")
        payload = {"evaluator": name, "params": _plain(rep.params),
                   "lower": _bounds_out(rep.lower), "upper": _bounds_out(rep.upper)}
        if rep.kind == "implicit":
            payload["codim"] = rep.codim
    return {"id": s.id, "dim": s.dim, "rep": {"kind": rep.kind, "payload": payload}}


def stratum_from_json(doc, ambient_dim):
    try:
        sid, dim, rep = doc["id"], int(doc["dim"]), doc["rep"]
        kind, p = rep["kind"], rep["payload"]
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed stratum entry: {exc}") from None
    if kind == "linear":
        basis = np.asarray(p["basis"], dtype=float).reshape(-1, ambient_dim)
        new = Linear(basis, p["offset"], _bounds_in(p.get("lower"), dim, -np.inf),
                     _bounds_in(p.get("upper"), dim, np.inf))
    elif kind == "param":
        new = Param.from_catalog(p["evaluator"], p.get("params", {}), dim, ambient_dim,
                                 _bounds_in(p.get("lower"), dim, -np.inf), _bounds_in(p.get("upper"), dim, np.inf))
    elif kind == "implicit":
        codim = int(p.get("codim", ambient_dim - dim))
        new = Implicit.from_catalog(p["evaluator"], p.get("params", {}), codim, ambient_dim,
                                    _bounds_in(p.get("lower"), ambient_dim, -np.inf),
                                    _bounds_in(p.get("upper"), ambient_dim, np.inf))
    else:
        raise SerializationError(f"unknown stratum kind {kind!r}")
    return Stratum(sid, dim, ambient_dim, new)


def set_to_json(sset):
    doc = {"ambient_dim": sset.ambient_dim, "strata": [stratum_to_json(s) for s in sset.strata],
           "frontier": [list(f) for f in sset.frontier]}
    if sset.period is not None:
        doc["period"] = [None if not p else float(p) for p in sset.period]
    return doc


def set_from_json(doc):
    try:
        n = int(doc["ambient_dim"])
        strata = [stratum_from_json(s, n) for s in doc["strata"]]
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed stratified set: {exc}") from None
    period = doc.get("period")
    period = None if period is None else tuple(None if p is None else float(p) for p in period)
    return StratifiedSet(n, strata, [tuple(f) for f in doc.get("frontier", [])], period)


def bundle_to_json(cb):
    charts = [{"lower": _bounds_out(c.lower), "upper": _bounds_out(c.upper), "matrix": _plain(c.matrix),
               "push": None if c.push is None else np.asarray(c.push, dtype=float).tolist()}
              for c in cb.charts]
    cone = cb.fiber_cone
    return {"base": stratum_to_json(cb.base), "base_ambient_dim": cb.base.ambient_dim,
            "fiber_link": set_to_json(cone.link.set), "truncation_radius": cone.truncation_radius,
            "charts": charts, "base_period": None if cb.base_period is None else list(cb.base_period)}


def bundle_from_json(doc):
    try:
        base = stratum_from_json(doc["base"], int(doc["base_ambient_dim"]))
        link_set = set_from_json(doc["fiber_link"])
        k = base.dim
        charts = [Chart(_bounds_in(c["lower"], k, -np.inf), _bounds_in(c["upper"], k, np.inf),
                        c.get("matrix", {"kind": "identity"}),
                        None if c.get("push") is None else np.asarray(c["push"], dtype=float))
                  for c in doc["charts"]]
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed cone bundle: {exc}") from None
    cone = RadialCone(Link(link_set.ambient_dim - 1, link_set), None, float(doc.get("truncation_radius", 1.0)))
    period = doc.get("base_period")
    return ConeBundle(base, cone, charts, None if period is None else tuple(period))
