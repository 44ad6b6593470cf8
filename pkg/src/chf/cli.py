"""Command-line entry point: ``chf run|list|describe|validate``."""

from __future__ import annotations

import json
import sys

import click

from .errors import ChfError
from .harness import ExperimentSpec, list_experiments, get_experiment, run as run_experiment, validate as validate_spec


def _parse_params(pairs):
    params = {}
    for item in pairs:
        if "=" not in item:
            raise click.BadParameter(f"expected k=v, got {item!r}", param_hint="--param")
        key, raw = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            params[key.strip()] = raw
    return params


def _experiments_epilog():
    lines = ["\b", "Experiments and their parameters:"]
    for exp in list_experiments():
        lines.append(f"  {exp.name}  [{', '.join(exp.criteria)}]")
        for k, v in sorted(exp.defaults.items()):
            lines.append(f"      {k} = {json.dumps(v)}")
    return "\n".join(lines)


@click.group()
def main():
    """Simulation harness for speed-field control and reconstruction networks."""


@main.command(epilog=_experiments_epilog())
@click.argument("name", required=False)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for the experiment RNG.")
@click.option("--out", "out", default="runs", show_default=True, help="Parent directory for run output.")
@click.option("--param", "params", multiple=True, help="Override a parameter, k=v (JSON values allowed).")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="Read name, seed, params and output_dir from a JSON spec file.")
def run(name, seed, out, params, spec_path):
    """Run one experiment; exit code 0 iff every verdict passes."""
    if spec_path:
        spec = ExperimentSpec.from_json(spec_path)
        if name and name != spec.name:
            raise click.UsageError(f"spec file names {spec.name!r} but {name!r} was given")
        spec.params.update(_parse_params(params))
    elif name:
        spec = ExperimentSpec(name, seed, _parse_params(params), out)
    else:
        raise click.UsageError("give an experiment name or --spec")
    try:
        result = run_experiment(spec)
    except (ChfError, KeyError) as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    for crit, ok in sorted(result.verdicts.items()):
        click.echo(f"{'PASS' if ok else 'FAIL'}  {crit}")
    click.echo(f"summary: {result.run_dir / 'summary.json'}")
    sys.exit(0 if result.passed else 1)


@main.command("list")
def list_cmd():
    """List registered experiments and the criteria they check."""
    for exp in list_experiments():
        click.echo(f"{exp.name:26s} {', '.join(exp.criteria)}")


@main.command()
@click.argument("name")
def describe(name):
    """Show an experiment's description and default parameters."""
    try:
        exp = get_experiment(name)
    except KeyError as err:
        raise click.ClickException(str(err)) from None
    click.echo(exp.help)
    click.echo("")
    click.echo(json.dumps(exp.defaults, indent=2, sort_keys=True))


@main.command()
@click.argument("spec_path", type=click.Path(exists=True, dir_okay=False))
def validate(spec_path):
    """Check a JSON spec file without running it."""
    try:
        spec = ExperimentSpec.from_json(spec_path)
        params = validate_spec(spec)
    except (ChfError, KeyError, json.JSONDecodeError) as err:
        click.echo(f"invalid: {err}", err=True)
        sys.exit(2)
    click.echo(json.dumps({"name": spec.name, "seed": spec.seed, "params": params}, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
