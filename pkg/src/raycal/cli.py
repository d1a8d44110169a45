"""Command-line client for the calibration service.

Every subcommand is a thin HTTP call: by default the requests run against
the bundled app in-process, and --server redirects them to a running
instance with the same routes. Scene files referenced by a config are
inlined client-side before sending, so the server never touches the local
filesystem.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import asyncio
import json
import logging
import os
import sys

import click
import httpx

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class InProcessClient:
    """Synchronous facade over the bundled ASGI app."""

    def __init__(self):
        from .service import app

        self._app = app

    def request(self, method: str, url: str, json=None) -> httpx.Response:
        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://raycal.local", timeout=None
            ) as client:
                return await client.request(method, url, json=json)

        return asyncio.run(go())


class RemoteClient:
    def __init__(self, base_url: str):
        self._base_url = base_url

    def request(self, method: str, url: str, json=None) -> httpx.Response:
        with httpx.Client(base_url=self._base_url, timeout=None) as client:
            return client.request(method, url, json=json)


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}", EXIT_CONFIG)
    except json.JSONDecodeError as exc:
        _fail(f"{path} is not valid JSON: {exc}", EXIT_CONFIG)


def _inline_scenes(config: dict, base_dir: str) -> dict:
    """Replace scene file references with their parsed contents."""
    out = dict(config)
    for key in ("scene_truth", "scene_dt"):
        entry = out.get(key)
        if isinstance(entry, str):
            path = entry if os.path.isabs(entry) else os.path.join(base_dir, entry)
            out[key] = _load_json(path)
    return out


def _load_config(path: str) -> dict:
    config = _load_json(path)
    if not isinstance(config, dict):
        _fail(f"{path} must contain a JSON object", EXIT_CONFIG)
    return _inline_scenes(config, os.path.dirname(os.path.abspath(path)))


def _call(ctx, method: str, url: str, payload=None):
    client = ctx.obj["client"]
    try:
        resp = client.request(method, url, json=payload)
    except httpx.HTTPError as exc:
        _fail(f"request failed: {exc}", EXIT_NUMERICAL)
    if resp.status_code >= 400:
        try:
            body = resp.json()
            detail = body.get("detail", resp.text)
            kind = body.get("error_kind", "")
        except ValueError:
            detail, kind = resp.text, ""
        code = EXIT_CONFIG if resp.status_code == 422 else EXIT_NUMERICAL
        if kind == "config":
            code = EXIT_CONFIG
        elif kind == "numerical":
            code = EXIT_NUMERICAL
        _fail(f"{detail}", code)
    return resp.json()


def _write_text(path, text: str):
    if path is None:
        click.echo(text, nl=False)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path, payload):
    text = json.dumps(payload, indent=2) + "\n"
    _write_text(path, text)


def _parse_point(value: str):
    try:
        x, y = value.split(",")
        return float(x), float(y)
    except ValueError:
        _fail(f"expected a coordinate like 1.5,-2.0 but got {value!r}", EXIT_CONFIG)


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Send requests to a running service instead of in-process.")
@click.option("--seed", default=None, type=int,
              help="Override the dataset seed used by synth.")
@click.option("--threads", default=1, type=click.IntRange(1, 32), show_default=True,
              help="Worker threads for run.")
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
@click.pass_context
def main(ctx, server, seed, threads, verbose):
    """Ray-tracing digital-twin calibration workbench."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)
    ctx.ensure_object(dict)
    ctx.obj["client"] = RemoteClient(server) if server else InProcessClient()
    ctx.obj["seed"] = seed
    ctx.obj["threads"] = threads


@main.command()
@click.argument("scene", type=click.Path(exists=True, dir_okay=False))
@click.option("--tx", required=True, metavar="X,Y", help="Transmitter position.")
@click.option("--rx", required=True, metavar="X,Y", help="Receiver position.")
@click.option("--max-bounces", default=3, show_default=True, type=click.IntRange(0))
@click.option("--los/--no-los", "include_los", default=True, show_default=True,
              help="Include the line-of-sight path.")
@click.option("--fc", default=6.0e9, show_default=True, help="Carrier frequency [Hz].")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the path set here instead of stdout.")
@click.pass_context
def trace(ctx, scene, tx, rx, max_bounces, include_los, fc, output):
    """Trace specular paths through a scene and dump them as JSON."""
    payload = {
        "scene": _load_json(scene),
        "tx": _parse_point(tx),
        "rx": _parse_point(rx),
        "max_bounces": max_bounces,
        "include_los": include_los,
        "f_c": fc,
    }
    _write_json(output, _call(ctx, "POST", "/trace", payload))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the dataset here instead of stdout.")
@click.pass_context
def synth(ctx, config, output):
    """Synthesize a noisy observation dataset from an experiment config."""
    payload = {"config": _load_config(config), "seed": ctx.obj["seed"]}
    _write_json(output, _call(ctx, "POST", "/synthesize", payload))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--scheme", required=True, type=click.Choice(["peoc", "upec", "peac"]),
              help="Calibration scheme.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the report here instead of stdout.")
@click.pass_context
def calibrate(ctx, config, dataset, scheme, output):
    """Calibrate material parameters against a dataset."""
    payload = {
        "config": _load_config(config),
        "dataset": _load_json(dataset),
        "scheme": scheme,
    }
    _write_json(output, _call(ctx, "POST", "/calibrate", payload))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the per-run metrics CSV here instead of stdout.")
@click.option("--aggregate", "aggregate_path", type=click.Path(dir_okay=False),
              default=None, help="Also write the quartile summary CSV here.")
@click.pass_context
def run(ctx, config, output, aggregate_path):
    """Run a full sweep experiment and emit metric CSVs."""
    payload = {"config": _load_config(config), "threads": ctx.obj["threads"]}
    body = _call(ctx, "POST", "/experiments/run", payload)
    _write_text(output, body["rows_csv"])
    if aggregate_path is not None:
        _write_text(aggregate_path, body["aggregate_csv"])


if __name__ == "__main__":
    main()
