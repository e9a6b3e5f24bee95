"""Command-line entry point.

Subcommands run one construction each, either from a scenario file
(``--scenario``) or from flags. Exit codes: 0 pass, 1 fail, 2 error.
"""

import argparse
import json
import os
import sys

from .errors import StrataflowError
from .runner import emit_report, exit_code, run_scenario, validate_scenario

SUBCOMMANDS = {
    "verify-transversality": "transversality",
    "magic-fact": "magic_fact",
    "build-cw": "build_cw",
    "synthesize-flow": "synthesize",
    "toy-section": "toy_section",
}


def _common(p):
    p.add_argument("--scenario", help="scenario JSON file (its kind must match the subcommand)")
    p.add_argument("--seed", type=int, help="64-bit seed; falls back to $STRATAFLOW_SEED")
    p.add_argument("--tol-angle", type=float, help="override angle_tol")
    p.add_argument("--tol-point", type=float, help="override point_tol")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--jobs", type=int, default=1, help="worker budget")


def build_parser():
    parser = argparse.ArgumentParser(prog="strataflow", description="Stratified transversality by flows.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("verify-transversality", help="certificate for a translation flow on a set")
    _common(p)
    p.add_argument("--sigma", help="stratified set JSON file")
    p.add_argument("--u", type=float, nargs="+", help="translation vector (sampled when omitted)")
    p.add_argument("--epsilon", type=float)
    p = sub.add_parser("magic-fact", help="deviation of forward sections from their cone")
    _common(p)
    p.add_argument("--tilt-deg", type=float)
    p = sub.add_parser("build-cw", help="CW model and homology of a scenario")
    _common(p)
    p.add_argument("--name", choices=("torus_height", "sphere_height"))
    p = sub.add_parser("synthesize-flow", help="field of immediate transversality for a scenario")
    _common(p)
    p.add_argument("--name", choices=("torus_height", "sphere_height"))
    p.add_argument("--epsilon", type=float)
    p = sub.add_parser("toy-section", help="normal-section flow on the circle")
    _common(p)
    p.add_argument("--frequency", type=int)
    p.add_argument("--epsilon", type=float)
    return parser


def _scenario_doc(args, kind):
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise StrataflowError(f"{args.scenario}: line {exc.lineno}: {exc.msg}") from None
        if doc.get("kind") != kind:
            raise StrataflowError(f"scenario kind {doc.get('kind')!r} does not match {kind!r}")
    else:
        doc = {"name": f"cli-{kind}", "kind": kind, "inputs": {}}
    inputs = doc.setdefault("inputs", {})
    if kind == "transversality":
        if args.sigma:
            with open(args.sigma, encoding="utf-8") as fh:
                inputs["sigma"] = json.load(fh)
        if args.u:
            inputs["flow"] = {"kind": "translation", "u": args.u}
    for flag, key in (("epsilon", "epsilon"), ("tilt_deg", "tilt_deg"), ("name", "scenario"),
                      ("frequency", "frequency")):
        val = getattr(args, flag, None)
        if val is not None:
            inputs[key] = val
    seed = args.seed
    if seed is None and "seed" not in doc and os.environ.get("STRATAFLOW_SEED"):
        seed = int(os.environ["STRATAFLOW_SEED"])
    if seed is not None:
        doc["seed"] = seed
    tols = doc.setdefault("tolerances", {})
    if args.tol_angle is not None:
        tols["angle_tol"] = args.tol_angle
    if args.tol_point is not None:
        tols["point_tol"] = args.tol_point
    if not tols:
        doc.pop("tolerances")
    return doc


def main(argv=None):
    args = build_parser().parse_args(argv)
    kind = SUBCOMMANDS[args.command]
    try:
        sc = validate_scenario(_scenario_doc(args, kind))
        report = run_scenario(sc, jobs=args.jobs)
        out = args.out or sc.output.get("path")
        fmt = args.format if args.out or not sc.output.get("format") else sc.output["format"]
        text = emit_report(report, fmt, out)
    except (StrataflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if out is None:
        sys.stdout.write(text)
    return exit_code(report)


if __name__ == "__main__":
    sys.exit(main())
