"""Command-line interface.

Exit codes: 0 all checks pass, 1 a check failed, 2 input error,
3 runtime or I/O error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import InputError, VarcheckError
from .problem import DEFAULTS, load_problem
from .runner import corpus_names, load_example, run_checks, simulate, trajectory_csv

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


def _common(fn):
    fn = click.option("--tol", type=float, default=None, help=f"Jet-level tolerance (default {DEFAULTS['tolerance']:g}).")(fn)
    fn = click.option("--samples", type=click.IntRange(min=1), default=None, help="Sample count (default 64).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Sampling seed (default 0).")(fn)
    fn = click.option("--out", type=click.Path(dir_okay=True), default=None, help="Output file (or directory for csv).")(fn)
    fn = click.option(
        "--format", "fmt", type=click.Choice(["text", "json", "csv"]), default=None, help="Output format."
    )(fn)
    return fn


def _write(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        click.echo(f"error: cannot write {path}: {exc.strerror or exc}", err=True)
        sys.exit(EXIT_RUNTIME)


def _guarded(fn):
    """Map library exceptions to exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(EXIT_INPUT)
        except FileNotFoundError as exc:
            click.echo(f"input error: {exc.filename}: no such file", err=True)
            sys.exit(EXIT_INPUT)
        except (VarcheckError, OSError, ArithmeticError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _emit_report(report, out, fmt):
    fmt = fmt or ("json" if out else "text")
    if fmt == "csv":
        if not out:
            raise InputError("--format csv needs --out DIRECTORY")
        if not report.trajectories:
            raise InputError("this run recorded no trajectories to write as csv")
        d = Path(out)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            click.echo(f"error: cannot create {d}: {exc.strerror or exc}", err=True)
            sys.exit(EXIT_RUNTIME)
        for name, traj in sorted(report.trajectories.items()):
            _write(d / f"{name}.csv", trajectory_csv(traj))
    elif fmt == "json":
        text = report.to_json()
        if out:
            _write(out, text)
        else:
            click.echo(text, nl=False)
    else:
        text = "\n".join(report.summary_lines()) + "\n"
        if out:
            _write(out, text)
        else:
            click.echo(text, nl=False)
    sys.exit(report.exit_code)


@click.group()
@click.version_option(package_name="artifact", prog_name="varcheck")
def main():
    """Numerical checks for the inverse problem of the calculus of variations."""


@main.command()
@click.argument("file", type=click.Path())
@_common
@_guarded
def check(file, tol, samples, seed, out, fmt):
    """Run the checks declared in a problem FILE."""
    problem = load_problem(file)
    _emit_report(run_checks(problem, tolerance=tol, samples=samples, seed=seed), out, fmt)


@main.command()
@click.argument("name", required=False)
@click.option("--list", "list_", is_flag=True, help="List the built-in examples.")
@_common
@_guarded
def example(name, list_, tol, samples, seed, out, fmt):
    """Run a built-in example NAME."""
    if list_ or not name:
        click.echo("\n".join(corpus_names()))
        sys.exit(EXIT_OK if list_ else EXIT_INPUT)
    problem = load_example(name)
    _emit_report(run_checks(problem, tolerance=tol, samples=samples, seed=seed), out, fmt)


def _numbers(text, what):
    try:
        return [float(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None


@main.command("simulate")
@click.argument("file", type=click.Path())
@click.option("--x0", required=True, help="Initial state, comma separated.")
@click.option("--t-final", type=float, required=True)
@click.option("-h", "--step", "h", type=float, default=DEFAULTS["h"], show_default=True)
@click.option(
    "--system",
    type=click.Choice(["auto", "sode", "euler_lagrange", "nonholonomic"]),
    default="auto",
    show_default=True,
)
@_common
@_guarded
def simulate_cmd(file, x0, t_final, h, system, tol, samples, seed, out, fmt):
    """Integrate the dynamics of FILE (or a built-in example) and write a CSV trajectory."""
    use_corpus = not Path(file).exists() and file in corpus_names()
    problem = load_example(file) if use_corpus else load_problem(file)
    traj = simulate(problem, _numbers(x0, "--x0"), t_final, h, system)
    fmt = fmt or "csv"
    if fmt != "csv":
        raise InputError("simulate writes csv only")
    text = trajectory_csv(traj)
    if out:
        _write(out, text)
    else:
        click.echo(text, nl=False)
    if traj.truncated:
        click.echo(f"warning: integration {traj.truncated}", err=True)
        sys.exit(EXIT_RUNTIME)
    sys.exit(EXIT_OK)


@main.command()
@click.argument("file", type=click.Path())
@click.option("--method", type=click.Choice(["flow", "closed-form"]), default="flow", show_default=True)
@click.option("--verify/--no-verify", default=True, help="Also run verify_extension when x0 is configured.")
@_common
@_guarded
def extend(file, method, verify, tol, samples, seed, out, fmt):
    """Build an extension of the constrained system in FILE to all of TQ."""
    problem = load_problem(file)
    names = ["extend_flow" if method == "flow" else "extend_closed"]
    if verify and problem.option("verify_extension", "x0") is not None:
        names.append("verify_extension")
    _emit_report(run_checks(problem, tolerance=tol, samples=samples, seed=seed, checks=names), out, fmt)


if __name__ == "__main__":  # pragma: no cover
    main()
