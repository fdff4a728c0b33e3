"""Operator CLI: run experiments, serve the coordinator, manage projects.

Every command is scriptable (no prompts); add --json for machine-readable
output. Experiment configs are JSON files; see README for the key set.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
from pathlib import Path

import click

from . import sim
from .errors import FlaasError, NotFound

logger = logging.getLogger(__name__)

DEFAULT_SERVER = "http://127.0.0.1:8080"


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool):
    """Federated-learning orchestration: simulate fleets or run the service."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print the summary as JSON.")
def simulate(config: str, out_dir: str, as_json: bool):
    """Run the experiment(s) described by CONFIG on virtual time."""
    try:
        spec = sim.ExperimentSpec.from_json_file(config)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(spec, list):
            cells = {}
            for cell_spec in spec:
                report = sim.run_experiment(cell_spec)
                mode = cell_spec.project.training_mode
                dist = cell_spec.partition.distribution.value
                cells[(mode, dist)] = report
                (out / f"{mode}_{dist}.csv").write_text(report.to_csv(), encoding="utf-8")
                (out / f"{mode}_{dist}.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
            comparison = sim.ComparisonResult(cells)
            (out / "comparison.csv").write_text(comparison.table_csv(), encoding="utf-8")
            summary = {
                f"{mode}/{dist}": report.summary() for (mode, dist), report in cells.items()
            }
        else:
            report = sim.run_experiment(spec)
            (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / "records.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
            summary = report.summary()
        (out / "summary.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
    except FlaasError as exc:
        raise click.ClickException(str(exc)) from exc
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(f"wrote results to {out_dir}/")


@main.command()
@click.option("--bind", default="127.0.0.1:8080", show_default=True, help="HOST:PORT to listen on.")
@click.option(
    "--state",
    "state_dir",
    type=click.Path(file_okay=False),
    default=lambda: os.environ.get("FLAAS_STATE_DIR", "flaas-state"),
    help="State directory [env FLAAS_STATE_DIR].",
)
@click.option("--tick-period", type=float, default=60.0, show_default=True, help="Scheduler period in seconds.")
@click.option("--ui", "ui_dir", type=click.Path(file_okay=False, exists=True), default=None, help="Serve a dashboard build from this directory.")
def serve(bind: str, state_dir: str, tick_period: float, ui_dir: str | None):
    """Run the coordinator service; state survives restarts in --state."""
    import uvicorn

    from .coordinator import FileStore, QueueNotifier, SystemClock, Coordinator
    from .protocol import TokenStore
    from .service import create_app

    try:
        host, port_text = bind.rsplit(":", 1)
        port = int(port_text)
    except ValueError:
        raise click.ClickException(f"--bind must be HOST:PORT, got {bind!r}")
    store = FileStore(state_dir)
    notifier = QueueNotifier()
    coordinator = Coordinator.restore(
        SystemClock(), store, notifier=notifier, scheduler_period=tick_period
    )
    app = create_app(coordinator, TokenStore(), notifier, scheduler_period=tick_period)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    click.echo(f"serving on http://{bind} (state: {state_dir})")
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit:
        raise
    except OSError as exc:
        raise click.ClickException(f"cannot bind {bind}: {exc}") from exc


def _api(server: str, path: str, method: str = "GET", body=None):
    import requests

    url = f"{server.rstrip('/')}{path}"
    resp = requests.request(method, url, json=body, timeout=30)
    if resp.status_code >= 400:
        try:
            payload = resp.json()
        except ValueError:
            payload = {}
        code = payload.get("error", f"http-{resp.status_code}")
        if code == "not-found":
            raise NotFound(payload.get("detail", "not found"))
        raise FlaasError(payload.get("detail", resp.text))
    return resp.json() if resp.content else {}


server_option = click.option(
    "--server",
    default=lambda: os.environ.get("FLAAS_SERVER", DEFAULT_SERVER),
    help=f"Coordinator base URL [env FLAAS_SERVER, default {DEFAULT_SERVER}].",
)
json_option = click.option("--json", "as_json", is_flag=True, help="JSON output.")


@main.group()
def project():
    """Create, inspect or terminate projects on a running coordinator."""


@project.command("create")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@server_option
@json_option
def project_create(config: str, server: str, as_json: bool):
    """Create a project from a ProjectConfig JSON file; prints the id."""
    try:
        body = json.loads(Path(config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise click.ClickException(f"{config}: {exc}")
    try:
        out = _api(server, "/api/admin/projects", "POST", body)
    except FlaasError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(out) if as_json else out["project_id"])


@project.command("status")
@click.argument("project_id")
@server_option
@json_option
def project_status(project_id: str, server: str, as_json: bool):
    """Show a project's state and round table."""
    try:
        snap = _api(server, f"/api/admin/projects/{project_id}")
    except NotFound:
        raise click.ClickException("not found")
    except FlaasError as exc:
        raise click.ClickException(str(exc))
    if as_json:
        click.echo(json.dumps(snap, sort_keys=True))
        return
    state = snap["state"]
    click.echo(f"project   {project_id}")
    click.echo(f"status    {state['status']}")
    click.echo(f"rounds    {state['rounds_completed']} completed")
    click.echo("round  outcome    received  accuracy    loss")
    for rec in snap["history"]:
        acc = "-" if rec["test_accuracy"] is None else f"{rec['test_accuracy']:.4f}"
        loss = "-" if rec["aggregate_loss"] is None else f"{rec['aggregate_loss']:.4f}"
        click.echo(
            f"{rec['round']:>5}  {rec['outcome']:<9}  {len(rec['received_models']):>8}  {acc:>8}  {loss:>8}"
        )


@project.command("terminate")
@click.argument("project_id")
@server_option
@json_option
def project_terminate(project_id: str, server: str, as_json: bool):
    """Terminate a project; its open round (if any) is recorded invalid."""
    try:
        _api(server, f"/api/admin/projects/{project_id}", "DELETE")
    except NotFound:
        raise click.ClickException("not found")
    except FlaasError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps({"terminated": project_id}) if as_json else f"terminated {project_id}")


if __name__ == "__main__":
    main()
