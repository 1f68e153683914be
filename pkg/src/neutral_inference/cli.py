"""Command line entry point: ``neutral-audit``."""

from __future__ import annotations

import logging
import sys

import click

from . import audit
from .domain import ValidationError
from .scenario import bundled_scenarios

log = logging.getLogger("neutral_inference")


def _emit(report: audit.AuditReport, out: str | None, timestamp: bool) -> None:
    if out is None:
        click.echo(report.to_json(timestamp), nl=False)
    for name, verdict in report.verdicts.items():
        click.echo(f"{name:8s} {verdict}", err=True)


def _finish(report: audit.AuditReport) -> None:
    sys.exit(report.exit_code())


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more detail.")
def main(verbose: int) -> None:
    """Audit an inference gateway for QoS wedges, routing bias and FRAND disparities."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("scenario")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Write the report here instead of stdout.")
@click.option("--export-dir", type=click.Path(file_okay=False), help="Also write samples, routing log and terms.")
@click.option("--no-timestamp", is_flag=True, help="Omit generated_at so reports diff cleanly.")
def run(scenario: str, seed: int | None, out: str | None, export_dir: str | None, no_timestamp: bool) -> None:
    """Simulate SCENARIO (a YAML path or bundled name) and audit it."""
    try:
        report = audit.run_scenario(scenario, seed, out, export_dir, timestamp=not no_timestamp)
    except (ValidationError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(audit.EXIT_CONFIG)
    _emit(report, out, not no_timestamp)
    _finish(report)


@main.command()
@click.option("--samples", type=click.Path(exists=True, dir_okay=False), help="QoS sample records.")
@click.option("--routing-log", type=click.Path(exists=True, dir_okay=False), help="Routing log records.")
@click.option("--benchmark", type=click.Path(exists=True, dir_okay=False), help="Tool quality benchmark (JSON).")
@click.option("--terms", type=click.Path(exists=True, dir_okay=False), help="Buyer terms records.")
@click.option("--config", help="Scenario file or bundled name supplying thresholds and criteria.")
@click.option("--seed", type=int, default=None, help="Bootstrap seed (default: config seed or 0).")
@click.option("-o", "--out", type=click.Path(dir_okay=False))
@click.option("--no-timestamp", is_flag=True)
def ingest(samples, routing_log, benchmark, terms, config, seed, out, no_timestamp) -> None:
    """Audit externally captured record files."""
    if not any((samples, routing_log, terms)):
        click.echo("error: give at least one of --samples, --routing-log, --terms", err=True)
        sys.exit(audit.EXIT_CONFIG)
    try:
        report = audit.ingest(samples, routing_log, terms, benchmark, config, seed, out, timestamp=not no_timestamp)
    except (ValidationError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(audit.EXIT_CONFIG)
    _emit(report, out, not no_timestamp)
    _finish(report)


@main.command("scenarios")
def list_scenarios() -> None:
    """List bundled scenarios."""
    for name in bundled_scenarios():
        click.echo(name)


if __name__ == "__main__":
    main()
