import json

import pytest
from click.testing import CliRunner

from varcheck.cli import main
from varcheck.runner import SCHEMA, load_example, run_checks, simulate, trajectory_csv

OSC = "[space]\ncoords = q\n[sode]\nq = -q\n[fibermap leg]\nq = qd\n[checks]\nrun = helmholtz, l_conditions\n"


@pytest.fixture
def cli():
    return CliRunner()


def _write(tmp_path, text, name="p.problem"):
    f = tmp_path / name
    f.write_text(text)
    return str(f)


def test_check_passes_with_exit_zero(cli, tmp_path):
    r = cli.invoke(main, ["check", _write(tmp_path, OSC)])
    assert r.exit_code == 0, r.output
    assert "HELMHOLTZ_CLASSIC: PASS" in r.output


def test_failed_check_exits_one(cli, tmp_path):
    r = cli.invoke(main, ["check", _write(tmp_path, OSC.replace("q = qd", "q = q*qd"))])
    assert r.exit_code == 1


def test_input_errors_exit_two(cli, tmp_path):
    assert cli.invoke(main, ["check", _write(tmp_path, "")]).exit_code == 2
    assert cli.invoke(main, ["check", str(tmp_path / "none.problem")]).exit_code == 2
    r = cli.invoke(main, ["example", "unknown"])
    assert r.exit_code == 2 and "rolling_disk" in r.output


def test_unwritable_output_exits_three(cli, tmp_path):
    r = cli.invoke(main, ["check", _write(tmp_path, OSC), "--out", str(tmp_path / "no" / "dir" / "r.json")])
    assert r.exit_code == 3


def test_check_errors_are_recorded_not_raised(tmp_path):
    from varcheck.problem import parse_problem

    p = parse_problem(OSC.replace("run = helmholtz, l_conditions", "run = reconstruct, helmholtz"))
    rep = run_checks(p)
    assert [o.name for o in rep.outcomes] == ["reconstruct", "helmholtz"]
    assert rep.outcomes[0].error and rep.outcomes[1].passed
    assert rep.exit_code == 1


def test_json_report_shape(cli, tmp_path):
    out = tmp_path / "r.json"
    r = cli.invoke(main, ["example", "harmonic_oscillator", "--out", str(out)])
    assert r.exit_code == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == SCHEMA and doc["seed"] == 0 and len(doc["input_sha256"]) == 64
    assert doc["defaults"]["samples"] == 64 and doc["settings"]["tolerance"] == 1e-9
    assert doc["pass"] is True and doc["checks"][0]["reports"][0]["family"] == "HELMHOLTZ_CLASSIC"


def test_json_is_byte_identical_on_rerun(cli):
    a = cli.invoke(main, ["example", "nonholonomic_particle", "--format", "json"]).output
    b = cli.invoke(main, ["example", "nonholonomic_particle", "--format", "json"]).output
    assert a == b and a.startswith("{")


def test_seed_and_flags_change_the_run(cli):
    a = json.loads(cli.invoke(main, ["example", "free_particle", "--format", "json", "--seed", "1"]).output)
    assert a["seed"] == 1
    b = json.loads(cli.invoke(main, ["example", "free_particle", "--format", "json", "--samples", "5", "--tol", "1e-3"]).output)
    assert b["settings"]["samples"] == 5 and b["checks"][0]["reports"][0]["samples_used"] == 5


def test_example_list(cli):
    r = cli.invoke(main, ["example", "--list"])
    assert r.exit_code == 0 and len(r.output.split()) == 10


def test_simulate_csv(cli):
    r = cli.invoke(main, ["simulate", "rolling_disk", "--x0", "0,0,0,0,1,1", "--t-final", "0.002"])
    assert r.exit_code == 0
    lines = r.output.splitlines()
    assert lines[0] == "t,q1,q2,q3,q4,qd1,qd2,qd3,qd4,phi1,phi2"
    assert lines[1] == "0,0,0,0,0,1,1,1,0,0,0"
    assert len(lines) == 4


def test_simulate_euler_lagrange_and_bad_state(cli):
    r = cli.invoke(main, ["simulate", "harmonic_oscillator", "--x0", "1,0", "--t-final", "0.01", "--system", "euler_lagrange"])
    assert r.exit_code == 0
    assert cli.invoke(main, ["simulate", "harmonic_oscillator", "--x0", "1", "--t-final", "1"]).exit_code == 2
    assert cli.invoke(main, ["simulate", "harmonic_oscillator", "--x0", "a,b", "--t-final", "1"]).exit_code == 2


def test_csv_numbers_use_seventeen_digits():
    p = load_example("harmonic_oscillator")
    text = trajectory_csv(simulate(p, [1.0, 0.0], 0.001))
    row = text.splitlines()[2].split(",")
    assert float(row[1]) == pytest.approx(0.9999995, rel=1e-9)
    assert len(row[1].replace(".", "").lstrip("0")) == 17


def test_trajectory_csv_directory(cli, tmp_path):
    d = tmp_path / "traj"
    r = cli.invoke(
        main, ["extend", _write(tmp_path, load_example_text("nonholonomic_particle")), "--format", "csv", "--out", str(d)]
    )
    assert r.exit_code == 0, r.output
    files = sorted(p.name for p in d.iterdir())
    assert files == ["verify_extension_constrained_0.csv", "verify_extension_extension_0.csv"]
    header = (d / files[1]).read_text().splitlines()[0]
    assert header == "t,q1,q2,q3,qd1,qd2,qd3,phi1"


def load_example_text(name):
    from importlib import resources

    return (resources.files("varcheck") / "corpus" / f"{name}.problem").read_text()


def test_extend_command_closed_form(cli, tmp_path):
    text = load_example_text("nonholonomic_particle")
    r = cli.invoke(main, ["extend", _write(tmp_path, text), "--method", "closed-form", "--no-verify"])
    assert r.exit_code == 0, r.output
    assert "RESTRICTION_TO_M: PASS" in r.output


def test_version(cli):
    r = cli.invoke(main, ["--version"])
    assert r.exit_code == 0 and "0.1.0" in r.output
