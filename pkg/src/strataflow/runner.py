"""Declarative scenario files: parse, run, report.

A scenario names a ``kind`` (transversality, magic_fact, build_cw,
synthesize, toy_section), an ``inputs`` block for that kind, an optional
tolerance override block and, for stochastic kinds, a 64-bit ``seed``.
Reports carry a content hash of the inputs so reruns can be compared;
timestamps stay out of the hash.
"""

import copy
import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .errors import ParseError, SchemaError, StageError, StrataflowError
from .tolerances import DEFAULT

KINDS = ("transversality", "magic_fact", "build_cw", "synthesize", "toy_section")
STOCHASTIC = ("transversality", "synthesize")
SCENARIO_NAMES = ("torus_height", "sphere_height")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

INPUT_SCHEMAS = {
    "transversality": {
        "type": "object", "additionalProperties": False, "required": ["sigma"],
        "properties": {
            "sigma": {"type": "object"},
            "flow": {"type": "object", "additionalProperties": False, "required": ["kind"],
                     "properties": {"kind": {"enum": ["translation", "generic"]},
                                    "u": {"type": "array", "items": _NUM},
                                    "max_tries": {"type": "integer", "minimum": 1}}},
            "epsilon": _POS,
            "grid": {"type": "integer", "minimum": 1},
            "family_grid": {"type": "integer", "minimum": 2},
        },
    },
    "magic_fact": {
        "type": "object", "additionalProperties": False,
        "properties": {
            "n": {"type": "integer", "minimum": 2}, "k": {"type": "integer", "minimum": 1},
            "tilt_deg": _NUM, "radii": {"type": "array", "items": _POS, "minItems": 1},
            "samples": {"type": "integer", "minimum": 17},
        },
    },
    "build_cw": {
        "type": "object", "additionalProperties": False,
        "properties": {"scenario": {"enum": list(SCENARIO_NAMES)},
                       "samples": {"type": "integer", "minimum": 64}},
    },
    "synthesize": {
        "type": "object", "additionalProperties": False,
        "properties": {"scenario": {"enum": list(SCENARIO_NAMES)}, "epsilon": _POS,
                       "grid": {"type": "integer", "minimum": 2}},
    },
    "toy_section": {
        "type": "object", "additionalProperties": False,
        "properties": {"radius": _POS, "frequency": {"type": "integer", "minimum": 0},
                       "epsilon": _POS, "grid": {"type": "integer", "minimum": 2}},
    },
}

INPUT_DEFAULTS = {
    "transversality": {"flow": {"kind": "generic"}, "epsilon": 1.0, "grid": 16},
    "magic_fact": {"n": 3, "k": 1, "tilt_deg": 45.0, "radii": [2.0 ** -i for i in range(1, 11)],
                   "samples": 4097},
    "build_cw": {"scenario": "torus_height", "samples": 4096},
    "synthesize": {"scenario": "torus_height", "grid": 16},
    "toy_section": {"radius": 1.0, "frequency": 2, "epsilon": 0.1, "grid": 16},
}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "kind"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "inputs": {"type": "object"},
        "tolerances": {"type": "object", "additionalProperties": False,
                       "properties": {k: _POS for k in ("rank_tol", "point_tol", "cocycle_tol", "angle_tol")}},
        "output": {"type": "object", "additionalProperties": False,
                   "properties": {"path": {"type": "string"}, "format": {"enum": ["json", "csv"]}}},
    },
}


def published_schema():
    """One self-contained draft-07 schema: the envelope plus each kind's input block."""
    doc = copy.deepcopy(SCENARIO_SCHEMA)
    doc["title"] = "strataflow scenario"
    doc["allOf"] = [{"if": {"properties": {"kind": {"const": k}}},
                     "then": {"properties": {"inputs": copy.deepcopy(INPUT_SCHEMAS[k])},
                              **({"required": ["seed"]} if k in STOCHASTIC else {})}}
                    for k in KINDS]
    return doc


@dataclass
class Scenario:
    name: str
    kind: str
    inputs: dict
    seed: int = None
    tolerances: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def tols(self):
        return DEFAULT.with_overrides(**self.tolerances)

    def to_json(self):
        doc = {"name": self.name, "kind": self.kind, "inputs": self.inputs}
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.tolerances:
            doc["tolerances"] = self.tolerances
        if self.output:
            doc["output"] = self.output
        return doc


def _violations(validator, doc, prefix=""):
    out = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.path)):
        where = prefix + "/".join(str(p) for p in err.path)
        out.append(f"{where or '<root>'}: {err.message}")
    return out


def validate_scenario(doc):
    """Schema-check a scenario document and fill defaults. Returns a :class:`Scenario`."""
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object", ["<root>: not an object"])
    base = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    bad = _violations(base, doc)
    if bad:
        raise SchemaError("; ".join(bad), bad)
    kind = doc["kind"]
    inputs = copy.deepcopy(doc.get("inputs", {}))
    bad = _violations(jsonschema.Draft7Validator(INPUT_SCHEMAS[kind]), inputs, "inputs/")
    if kind in STOCHASTIC and "seed" not in doc:
        bad.append(f"seed: required for stochastic kind {kind!r}")
    if bad:
        raise SchemaError("; ".join(bad), bad)
    filled = copy.deepcopy(INPUT_DEFAULTS[kind])
    filled.update(inputs)
    return Scenario(doc["name"], kind, filled, doc.get("seed"), dict(doc.get("tolerances", {})),
                    dict(doc.get("output", {})))


def parse_scenario(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return validate_scenario(doc)


def content_hash(obj):
    """sha256 of the canonical JSON encoding (sorted keys, no whitespace)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


@dataclass
class RunReport:
    scenario: str
    kind: str
    input_hash: str
    passed: bool
    stages: dict
    table: list = field(default_factory=list)
    header: tuple = ()
    wall_time: float = 0.0

    def to_json(self, with_time=True):
        doc = {"scenario": self.scenario, "kind": self.kind, "input_hash": self.input_hash,
               "pass": self.passed, "stages": self.stages,
               "table": {"header": list(self.header), "rows": [list(r) for r in self.table]}}
        if with_time:
            doc["wall_time"] = self.wall_time
        return doc

    def result_hash(self):
        return content_hash(self.to_json(with_time=False))


def _seed32(seed):
    return int(seed) % (2 ** 32) if seed is not None else 0


def _run_transversality(sc, tols):
    from .flows import TranslationFlow
    from .serialize import set_from_json
    from .transversality import (default_t_grid, flow_family_transversality, generic_translation_sample,
                                 immediate_transversality_verify)

    inp = sc.inputs
    sigma = set_from_json(inp["sigma"])
    flow_doc = inp["flow"]
    stages = {}
    if flow_doc["kind"] == "translation":
        if "u" not in flow_doc:
            raise SchemaError("translation flow needs u", ["inputs/flow/u: required"])
        u = np.asarray(flow_doc["u"], dtype=float)
    else:
        u, tries = generic_translation_sample(sigma, sc.seed, flow_doc.get("max_tries", 100), tols)
        stages["sample"] = {"u": u.tolist(), "tries": tries}
    flow = TranslationFlow(u, sigma.period)
    eps = float(inp["epsilon"])
    cert = immediate_transversality_verify(sigma, flow, eps, default_t_grid(eps, inp["grid"]), tols)
    stages["certificate"] = cert.to_json()
    passed = cert.passed
    if "family_grid" in inp and cert.passed:
        fam = flow_family_transversality(sigma, flow, 0.5 * eps, eps, inp["family_grid"], tols)
        stages["family"] = {"pass": fam}
        passed = passed and fam
    return passed, stages, cert.csv_rows(), ("t", "min_angle", "pairs_checked", "status")


def _run_magic_fact(sc, tols):
    from .morse import FlowedSet, MorseModel, deviation_slope, magic_fact_deviation, tilted_seed

    inp = sc.inputs
    model = MorseModel(inp["n"], inp["k"])
    fs = FlowedSet(model, tilted_seed(model, np.deg2rad(inp["tilt_deg"])))
    x = np.concatenate([[model.r_minus], np.zeros(model.k - 1)])
    rows = magic_fact_deviation(fs, x, inp["radii"], inp["samples"], tols)
    devs = [d for _, d in rows]
    slope = deviation_slope(rows)
    decreasing = all(b < a for a, b in zip(devs, devs[1:]))
    stages = {"deviation": [{"r": r, "deviation": d} for r, d in rows], "slope": slope,
              "strictly_decreasing": decreasing}
    return decreasing, stages, rows, ("r", "deviation")


def _run_build_cw(sc, tols):
    from .cw import assemble_cw, homology_from_cw

    model = assemble_cw(sc.inputs["scenario"], tols, sc.inputs["samples"])
    doc = model.to_json()
    homology = homology_from_cw(model)
    rows = [(k, b, " ".join(map(str, t))) for k, (b, t) in enumerate(homology)]
    return True, {"cw": doc}, rows, ("dim", "betti", "torsion")


def _run_synthesize(sc, tols):
    from .synthesis import synthesize_immediate_flow
    from .transversality import default_t_grid

    inp = sc.inputs
    eps = inp.get("epsilon")
    grid = None if eps is None else default_t_grid(eps, inp["grid"])
    res = synthesize_immediate_flow(inp["scenario"], eps, _seed32(sc.seed), tols, t_grid=grid)
    cert = res.certificate
    return cert.passed, {"synthesis": res.to_json()}, cert.csv_rows(), ("t", "min_angle", "pairs_checked", "status")


def _run_toy_section(sc, tols):
    from .synthesis import circle_stratum, normal_section, tubular_section_flow
    from .transversality import default_t_grid

    inp = sc.inputs
    s = circle_stratum(inp["radius"])
    freq = inp["frequency"]
    u = normal_section(s, lambda a: np.sin(freq * a))
    eps = inp["epsilon"]
    _, cert = tubular_section_flow(s, u, eps, default_t_grid(eps, inp["grid"]), tols=tols)
    return cert.passed, {"certificate": cert.to_json()}, cert.csv_rows(), ("t", "min_angle", "pairs_checked", "status")


RUNNERS = {"transversality": _run_transversality, "magic_fact": _run_magic_fact, "build_cw": _run_build_cw,
           "synthesize": _run_synthesize, "toy_section": _run_toy_section}


def _clean(obj):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def run_scenario(sc, jobs=1):
    """Dispatch to the module pipeline for ``sc.kind``.

    ``jobs`` is the parallelism budget; the pipelines here are sequential
    and record it only.
    """
    start = time.perf_counter()
    tols = sc.tols()
    try:
        passed, stages, table, header = RUNNERS[sc.kind](sc, tols)
    except StageError:
        raise
    except StrataflowError as exc:
        raise StageError(sc.kind, exc) from exc
    stages = _clean(stages)
    stages["jobs"] = int(jobs)
    return RunReport(sc.name, sc.kind, content_hash(sc.to_json()), bool(passed), stages,
                     [tuple(_clean(list(r))) for r in table], tuple(header), time.perf_counter() - start)


def report_csv(r):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(r.header)
    for row in r.table:
        w.writerow(row)
    return buf.getvalue()


def emit_report(r, fmt="json", path=None):
    """Write the report; returns the text. ``path=None`` writes nothing."""
    if fmt == "json":
        text = json.dumps(r.to_json(), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = report_csv(r)
    else:
        raise StrataflowError(f"unknown format {fmt!r}")
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from None
    return text


class IoError(StrataflowError):
    """Report could not be written."""


def exit_code(r):
    return 0 if r.passed else 1
