import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import cross_r2, linear
from strataflow.cli import main
from strataflow.errors import ParseError, SchemaError, StageError
from strataflow.runner import (emit_report, parse_scenario, published_schema, run_scenario,
                               validate_scenario)
from strataflow.serialize import set_to_json
from strataflow.strata import StratifiedSet

DOCS = Path(__file__).resolve().parents[1] / "docs"


def cross_doc(**extra):
    doc = {"name": "cross", "kind": "transversality", "seed": 7,
           "inputs": {"sigma": set_to_json(cross_r2()), "grid": 6}}
    doc.update(extra)
    return doc


def sliding_plane_doc():
    plane = StratifiedSet(3, [linear("p", [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0, 0.0, 0.0])])
    return {"name": "slide", "kind": "transversality", "seed": 0,
            "inputs": {"sigma": set_to_json(plane), "flow": {"kind": "translation", "u": [1.0, 0.0, 0.0]},
                       "grid": 4}}


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


class TestParse:
    def test_defaults_filled(self, tmp_path):
        sc = parse_scenario(write(tmp_path, cross_doc()))
        assert sc.inputs["flow"] == {"kind": "generic"} and sc.inputs["epsilon"] == 1.0

    def test_missing_seed(self):
        doc = cross_doc()
        del doc["seed"]
        with pytest.raises(SchemaError) as info:
            validate_scenario(doc)
        assert "seed" in str(info.value)

    def test_deterministic_kind_needs_no_seed(self):
        assert validate_scenario({"name": "m", "kind": "magic_fact"}).seed is None

    def test_unknown_key(self):
        with pytest.raises(SchemaError) as info:
            validate_scenario(cross_doc(foo=1))
        assert "foo" in str(info.value)

    def test_unknown_input_key(self):
        doc = cross_doc()
        doc["inputs"]["foo"] = 1
        with pytest.raises(SchemaError) as info:
            validate_scenario(doc)
        assert "foo" in str(info.value)

    def test_bad_json_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "name": "x",\n "kind": }')
        with pytest.raises(ParseError) as info:
            parse_scenario(str(p))
        assert "line 3" in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            parse_scenario(str(tmp_path / "none.json"))

    def test_round_trip(self, tmp_path):
        sc = parse_scenario(write(tmp_path, cross_doc()))
        assert parse_scenario(write(tmp_path, sc.to_json(), "again.json")) == sc


class TestRun:
    def test_magic_fact_column_decreases(self):
        r = run_scenario(validate_scenario({"name": "m", "kind": "magic_fact"}))
        devs = [d for _, d in r.table]
        assert r.passed and all(b < a for a, b in zip(devs, devs[1:]))

    def test_build_cw_torus(self):
        r = run_scenario(validate_scenario({"name": "t", "kind": "build_cw", "inputs": {"samples": 512}}))
        assert [row[1] for row in r.table] == [1, 2, 1]

    def test_deterministic(self):
        sc = validate_scenario(cross_doc())
        a, b = run_scenario(sc), run_scenario(sc)
        assert a.result_hash() == b.result_hash()
        assert json.dumps(a.to_json(with_time=False)) == json.dumps(b.to_json(with_time=False))

    def test_seed_changes_sample(self):
        a = run_scenario(validate_scenario(cross_doc()))
        b = run_scenario(validate_scenario(cross_doc(seed=8)))
        assert a.stages["sample"]["u"] != b.stages["sample"]["u"]
        assert a.input_hash != b.input_hash

    def test_stage_wrapped(self):
        # frequency 0 is the zero section
        with pytest.raises(StageError) as info:
            run_scenario(validate_scenario({"name": "z", "kind": "toy_section", "inputs": {"frequency": 0}}))
        assert "toy_section" in str(info.value)


class TestEmit:
    def test_csv_header(self, tmp_path):
        r = run_scenario(validate_scenario(cross_doc()))
        path = tmp_path / "out.csv"
        emit_report(r, "csv", str(path))
        raw = path.read_bytes()
        assert b"\r" not in raw
        rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
        assert rows[0] == ["t", "min_angle", "pairs_checked", "status"] and len(rows) == 7

    def test_json_round_trip(self, tmp_path):
        r = run_scenario(validate_scenario(cross_doc()))
        path = tmp_path / "out.json"
        emit_report(r, "json", str(path))
        assert json.loads(path.read_text()) == json.loads(json.dumps(r.to_json()))

    def test_unwritable(self, tmp_path):
        from strataflow.runner import IoError
        r = run_scenario(validate_scenario(cross_doc()))
        with pytest.raises(IoError):
            emit_report(r, "json", str(tmp_path / "missing" / "out.json"))


class TestCli:
    def test_pass_exit_zero(self, tmp_path, capsys):
        assert main(["verify-transversality", "--scenario", write(tmp_path, cross_doc())]) == 0
        assert json.loads(capsys.readouterr().out)["pass"] is True

    def test_fail_exit_one(self, tmp_path, capsys):
        assert main(["verify-transversality", "--scenario", write(tmp_path, sliding_plane_doc())]) == 1

    def test_error_exit_two(self, tmp_path, capsys):
        assert main(["verify-transversality", "--scenario", write(tmp_path, cross_doc(foo=1))]) == 2
        assert "foo" in capsys.readouterr().err

    def test_kind_mismatch(self, tmp_path, capsys):
        assert main(["build-cw", "--scenario", write(tmp_path, cross_doc())]) == 2

    def test_env_seed(self, tmp_path, monkeypatch, capsys):
        doc = cross_doc()
        del doc["seed"]
        path = write(tmp_path, doc)
        assert main(["verify-transversality", "--scenario", path]) == 2
        capsys.readouterr()
        monkeypatch.setenv("STRATAFLOW_SEED", "7")
        assert main(["verify-transversality", "--scenario", path]) == 0
        env_u = json.loads(capsys.readouterr().out)["stages"]["sample"]["u"]
        main(["verify-transversality", "--scenario", write(tmp_path, cross_doc(), "b.json")])
        assert json.loads(capsys.readouterr().out)["stages"]["sample"]["u"] == env_u

    def test_flags_without_scenario(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["toy-section", "--frequency", "2", "--format", "csv", "--out", str(out)]) == 0
        assert out.read_text().startswith("t,min_angle,pairs_checked,status\n")

    def test_magic_fact_csv(self, capsys):
        assert main(["magic-fact", "--tilt-deg", "30", "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("r,deviation\n")

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "strataflow.cli", "verify-transversality", "--scenario",
                               write(tmp_path, sliding_plane_doc())], capture_output=True)
        assert proc.returncode == 1


def test_published_schema_is_current():
    assert json.loads((DOCS / "scenario.schema.json").read_text()) == published_schema()
