import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varcheck.errors import InputError, SemanticError
from varcheck.problem import DEFAULTS, ProblemSyntaxError, load_problem, parse_problem
from varcheck.runner import corpus_names, load_example

MINIMAL = """\
[space]
coords = q
param.w = 2
[sode]
q = -w^2*q   # trailing comment
[fibermap leg]
q = qd
[checks]
run = helmholtz
"""


def test_minimal_problem():
    p = parse_problem(MINIMAL)
    assert p.coords == ("q",) and p.sode.gamma[0].evaluate(q=1.0) == -4.0
    assert p.checks == ["helmholtz"] and list(p.fibermaps) == ["leg"]
    assert p.samples == DEFAULTS["samples"] and p.tolerance == DEFAULTS["tolerance"]


def test_empty_file():
    with pytest.raises(SemanticError, match=r"missing \[space\] section"):
        parse_problem("")


def test_undeclared_variable_names_variable_and_section():
    with pytest.raises(SemanticError) as info:
        parse_problem("[space]\ncoords = x\n[sode]\nx = z\n")
    assert info.value.name == "z" and "[sode]" in str(info.value)


def test_parse_error_position():
    with pytest.raises(ProblemSyntaxError) as info:
        parse_problem("[space]\ncoords = x\n[sode]\nx = 2x\n")
    assert info.value.line == 4 and info.value.column == 6


@pytest.mark.parametrize(
    "text, match",
    [
        ("[spaces]\n", "unknown section"),
        ("coords = x\n", "outside"),
        ("[space]\ncoords = x\ncoords = y\n", "duplicate"),
        ("[space]\ncoords = x, x\n", "duplicate"),
        ("[space]\nfoo = 1\ncoords = x\n", "unknown key"),
        ("[space]\ncoords = x\nformat = 2\n", "format version"),
        ("[space]\ncoords = x\n[sode]\ny = 0\n", "not a free coordinate"),
        ("[space]\ncoords = x, y\n[sode]\nx = 0\n", "missing acceleration"),
        ("[space]\ncoords = x\n[sode]\nx = 0\n[fibermap]\nx = xd\ny = 0\n", "undeclared coordinate"),
        ("[space]\ncoords = x\n[sode]\nx = 0\n[sampling]\nx = [1, 0]\n", "low < high"),
        ("[space]\ncoords = x\n[sode]\nx = 0\n[checks]\nrun = nothing\n", "unknown check"),
        ("[space]\ncoords = x\n[sode]\nx = 0\n[checks]\nrun = helmholtz\nhelmholtz.bad = 1\n", "unknown option"),
        ("[space]\ncoords = x\n[sode]\nx = 0\n[sampling]\nguard = x + 1\n", "comparison"),
        ("[space]\ncoords = x\n[checks]\nsingular_identity.g = [[1, 0]\n", "unbalanced"),
    ],
)
def test_rejected_inputs(text, match):
    with pytest.raises(InputError, match=match):
        parse_problem(text)


def test_multiline_lists_and_nested_numbers():
    p = parse_problem(
        "[space]\ncoords = x, y\n[sode]\nx = 0\ny = 0\n[lagrangian]\nL = (xd - yd)^2/2\n"
        "[checks]\nrun = singular_identity\nsingular_identity.g = [[1, -1],\n   [-1, 1]]\n"
    )
    assert p.option("singular_identity", "g").numbers() == [[1, -1], [-1, 1]]


def test_constraints_reorder_coordinates():
    p = parse_problem("[space]\ncoords = x, th\n[sode]\nth = 0\n[constraints]\nx = thd\n")
    assert p.coords == ("th", "x") and p.sode.m == 1
    assert p.nh_constraints[0].evaluate(xd=2.0, thd=0.5) == pytest.approx(1.5)


def test_guards_and_box_sampling():
    p = parse_problem(
        "[space]\ncoords = x\n[sode]\nx = 0\n[sampling]\nx = [0, 2]\nxd = [-1, 1]\nguard = x > 1\nseed = 5\n"
    )
    pts = p.draw_samples(p.sode.space, 50)
    assert pts.shape == (50, 2) and pts[:, 0].min() > 1 and pts[:, 0].max() <= 2
    assert np.array_equal(pts, p.draw_samples(p.sode.space, 50))


def test_impossible_guards_are_reported():
    p = parse_problem("[space]\ncoords = x\n[sode]\nx = 0\n[sampling]\nguard = x > 5\n")
    with pytest.raises(SemanticError, match="reject"):
        p.draw_samples(p.sode.space, 4)


def test_shipped_rolling_disk():
    p = load_example("rolling_disk")
    assert p.n == 4 and p.m == 2
    assert set(p.fibermaps) == {"leg", "second"}


def test_every_corpus_file_loads():
    names = corpus_names()
    assert len(names) == 10
    for name in names:
        assert load_example(name).checks


def test_load_problem_from_disk(tmp_path):
    f = tmp_path / "a.problem"
    f.write_text(MINIMAL)
    assert load_problem(f).name == "a"
    with pytest.raises(FileNotFoundError):
        load_problem(tmp_path / "missing.problem")
    g = tmp_path / "bin.problem"
    g.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(InputError):
        load_problem(g)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=5, unique=True), st.integers(0, 99))
def test_hash_and_samples_are_deterministic(coords, seed):
    text = "[space]\ncoords = " + ", ".join(coords) + "\n[sode]\n" + "".join(f"{c} = 0\n" for c in coords)
    text += f"[sampling]\nseed = {seed}\n"
    a, b = parse_problem(text), parse_problem(text)
    assert a.source_hash == b.source_hash
    assert np.array_equal(a.draw_samples(a.sode.space, 8), b.draw_samples(b.sode.space, 8))
