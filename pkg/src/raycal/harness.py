"""Experiment runner: sweeps, metrics, and CSV reports.

A single experiment config describes the ground-truth scene, the twin
scene handed to the calibrator, the radio, the discrepancy injected into
the synthetic observations, the schemes to run, and a one-dimensional
sweep (bandwidth, SNR, phase spread, or receiver displacement) evaluated
over a list of seeds. Every cell of the sweep is deterministic given the
config, so two runs of the same config produce byte-identical CSVs; cells
may execute on a thread pool and rows are sorted before writing.

A diverged calibration never aborts a sweep: the row keeps its coordinates
and carries the failure in the ``error`` column, and aggregation skips it.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibrate import SCHEMES, CalibrationResult, OptimConfig, calibrate
from .channel import ArrayGeometry, RadioConfig, synthesize_dataset
from .errors import ConfigError, NumericalError
from .mathkit import KAPPA_CAP, bessel_ratio, bessel_ratio_inv
from .raytracer import (
    DevicePair,
    MaterialParams,
    Scene,
    load_scene,
    scene_from_dict,
    trace_paths,
)

__all__ = [
    "SWEEP_AXES",
    "ExperimentConfig",
    "MetricsRow",
    "AggregateRow",
    "experiment_config_from_dict",
    "compute_metrics",
    "run_experiment",
    "aggregate",
    "rows_to_csv",
    "aggregates_to_csv",
    "calibration_report",
]

SWEEP_AXES = ("bandwidth", "snr", "phase-std", "displacement")

ROW_FIELDS = (
    "scheme",
    "sweep_value",
    "seed",
    "material",
    "eps_hat",
    "gamma_hat",
    "eps_rel_err",
    "gamma_rel_err",
    "power_rel_err",
    "power_rel_err_db",
    "error",
)

AGG_FIELDS = (
    "scheme",
    "sweep_value",
    "n",
    "eps_rel_err_q1",
    "eps_rel_err_median",
    "eps_rel_err_q3",
    "gamma_rel_err_q1",
    "gamma_rel_err_median",
    "gamma_rel_err_q3",
    "power_rel_err_q1",
    "power_rel_err_median",
    "power_rel_err_q3",
    "power_rel_err_db_q1",
    "power_rel_err_db_median",
    "power_rel_err_db_q3",
)


@dataclass
class MetricsRow:
    scheme: str
    sweep_value: float
    seed: int
    material: str
    eps_hat: float | None
    gamma_hat: float | None
    eps_rel_err: float | None
    gamma_rel_err: float | None
    power_rel_err: float | None
    power_rel_err_db: float | None
    error: str = ""

    def sort_key(self):
        return (self.scheme, self.sweep_value, self.seed, self.material)


@dataclass
class AggregateRow:
    scheme: str
    sweep_value: float
    n: int
    eps_rel_err_q: tuple
    gamma_rel_err_q: tuple
    power_rel_err_q: tuple
    power_rel_err_db_q: tuple


@dataclass
class ExperimentConfig:
    """Normalized experiment description; build with experiment_config_from_dict."""

    scene_truth: Scene
    scene_dt: Scene
    pair: DevicePair
    f_c: float
    delta_f: float
    bandwidth: float
    rx_array: ArrayGeometry
    tx_array: ArrayGeometry
    max_bounces: int
    include_los: bool
    mode: str
    level: float
    snr_db: float
    n_obs: int
    schemes: tuple
    optim: OptimConfig
    theta_init: dict | None
    sweep_axis: str
    sweep_grid: tuple
    seeds: tuple
    projection_policy: str = "paths"
    grid_size: int | None = None

    def radio_for(self, sweep_value: float) -> RadioConfig:
        bandwidth = sweep_value if self.sweep_axis == "bandwidth" else self.bandwidth
        return self.base_radio(bandwidth)

    def base_radio(self, bandwidth: float | None = None) -> RadioConfig:
        if bandwidth is None:
            bandwidth = self.bandwidth
        s_count = int(math.floor(bandwidth / self.delta_f + 1e-9))
        if s_count < 1:
            raise ConfigError(
                f"bandwidth {bandwidth} is below one subcarrier spacing {self.delta_f}"
            )
        f_min = self.f_c - (s_count - 1) * self.delta_f / 2.0
        return RadioConfig(
            f_min=f_min,
            delta_f=self.delta_f,
            s_count=s_count,
            rx_array=self.rx_array,
            tx_array=self.tx_array,
        )

    def snr_for(self, sweep_value: float) -> float:
        return sweep_value if self.sweep_axis == "snr" else self.snr_db

    def discrepancy_for(self, sweep_value: float):
        """(mode, level) after applying the sweep axis."""
        if self.sweep_axis == "phase-std":
            return "iid-phase", _kappa_from_phase_std(sweep_value)
        if self.sweep_axis == "displacement":
            return "rx-displacement", sweep_value
        return self.mode, self.level


def _kappa_from_phase_std(phase_std: float) -> float:
    """Map a phase spread [rad] to the matching concentration.

    Uses the wrapped-Gaussian moment convention: the mean resultant of the
    injected errors equals exp(-std^2 / 2).
    """
    if phase_std < 0:
        raise ConfigError("phase spread must be non-negative")
    r = math.exp(-0.5 * phase_std * phase_std)
    if r >= bessel_ratio(KAPPA_CAP):
        return KAPPA_CAP
    return bessel_ratio_inv(r)


def _scene_from_entry(entry, base_dir=None) -> Scene:
    if isinstance(entry, str):
        import os

        path = entry
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return load_scene(path)
    if isinstance(entry, dict):
        return scene_from_dict(entry)
    raise ConfigError("scene entry must be a file path or an inline scene object")


def _array_from_entry(entry) -> ArrayGeometry:
    if entry is None:
        return ArrayGeometry(offsets=((0.0, 0.0),))
    try:
        offsets = tuple((float(x), float(y)) for x, y in entry)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad array geometry: {entry!r}") from exc
    return ArrayGeometry(offsets=offsets)


def experiment_config_from_dict(data: dict, base_dir: str | None = None) -> ExperimentConfig:
    """Validate and normalize a JSON experiment config.

    :param data: Parsed JSON object.
    :param base_dir: Directory used to resolve relative scene file paths.
    :raises ConfigError: On any missing or invalid field.
    """
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be an object")
    try:
        scene_truth = _scene_from_entry(data["scene_truth"], base_dir)
        scene_dt = _scene_from_entry(data["scene_dt"], base_dir)
        rx = tuple(float(v) for v in data["rx"])
        tx = tuple(float(v) for v in data["tx"])
        radio = data["radio"]
        f_c = float(radio["f_c"])
        delta_f = float(radio["delta_f"])
        bandwidth = float(radio["bandwidth"])
        n_obs = int(data["n_obs"])
        snr_db = float(data["snr_db"])
        schemes = tuple(data["schemes"])
        sweep = data["sweep"]
        sweep_axis = sweep["axis"]
        sweep_grid = tuple(float(v) for v in sweep["grid"])
        seeds = tuple(int(s) for s in data["seeds"])
    except KeyError as exc:
        raise ConfigError(f"experiment config is missing {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc

    if len(rx) != 2 or len(tx) != 2:
        raise ConfigError("rx and tx must be [x, y] coordinates")
    if sweep_axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {sweep_axis!r}; expected one of {SWEEP_AXES}")
    if not sweep_grid:
        raise ConfigError("sweep grid must be non-empty")
    if not seeds:
        raise ConfigError("seeds list must be non-empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    if not schemes:
        raise ConfigError("schemes list must be non-empty")
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}; expected one of {SCHEMES}")
    if n_obs < 1:
        raise ConfigError("n_obs must be at least 1")

    trace_cfg = data.get("trace", {})
    max_bounces = int(trace_cfg.get("max_bounces", 3))
    include_los = bool(trace_cfg.get("include_los", True))

    disc = data.get("discrepancy", {})
    mode = disc.get("mode", "exact")
    level = float(disc.get("level", 0.0))
    if mode not in ("exact", "rx-displacement", "iid-phase"):
        raise ConfigError(f"unknown discrepancy mode {mode!r}")
    if sweep_axis == "phase-std" and mode not in ("exact", "iid-phase"):
        raise ConfigError("a phase-std sweep requires the iid-phase discrepancy mode")
    if sweep_axis == "displacement" and mode not in ("exact", "rx-displacement"):
        raise ConfigError("a displacement sweep requires the rx-displacement mode")

    optim_cfg = data.get("optim", {})
    try:
        optim = OptimConfig(**optim_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad optim config: {exc}") from exc

    theta_init = None
    if data.get("theta_init") is not None:
        theta_init = {}
        for name, m in data["theta_init"].items():
            try:
                theta_init[name] = MaterialParams(eps=float(m["eps"]), sigma=float(m["sigma"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad theta_init entry for {name!r}") from exc

    proj = data.get("projections", {})
    projection_policy = proj.get("policy", "paths")
    grid_size = proj.get("grid_size")

    return ExperimentConfig(
        scene_truth=scene_truth,
        scene_dt=scene_dt,
        pair=DevicePair(rx=rx, tx=tx),
        f_c=f_c,
        delta_f=delta_f,
        bandwidth=bandwidth,
        rx_array=_array_from_entry(radio.get("rx_array")),
        tx_array=_array_from_entry(radio.get("tx_array")),
        max_bounces=max_bounces,
        include_los=include_los,
        mode=mode,
        level=level,
        snr_db=snr_db,
        n_obs=n_obs,
        schemes=schemes,
        optim=optim,
        theta_init=theta_init,
        sweep_axis=sweep_axis,
        sweep_grid=sweep_grid,
        seeds=seeds,
        projection_policy=projection_policy,
        grid_size=grid_size,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def compute_metrics(theta_hat, theta_true, pathset_dt, pathset_truth):
    """Per-material parameter errors plus the shared power error.

    The reconstructed power is the energy of the twin path set evaluated at
    theta_hat; the reference power is the energy of the ground-truth path
    set at theta_true. Values are dicts keyed like MetricsRow fields, one
    per material name shared by both parameter sets.

    Raises:
        ConfigError: Empty path sets, zero reference power, or mismatched
            material names.
    """
    if len(pathset_dt) == 0 or len(pathset_truth) == 0:
        raise ConfigError("metrics need non-empty path sets")
    p_hat = float(np.sum(np.abs(pathset_dt.alphas) ** 2))
    p_true = float(np.sum(np.abs(pathset_truth.alphas) ** 2))
    if p_true == 0.0:
        raise ConfigError("reference power is zero; power error undefined")
    power_rel = abs(p_hat - p_true) / p_true
    power_db = 10.0 * math.log10(power_rel) if power_rel > 0 else float("-inf")

    names = sorted(theta_hat)
    missing = [n for n in names if n not in theta_true]
    if missing:
        raise ConfigError(f"no ground truth for estimated materials {missing}")
    out = []
    for name in names:
        t, h = theta_true[name], theta_hat[name]
        if t.eps == 0.0 or t.sigma == 0.0:
            raise ConfigError(f"true parameters for {name!r} must be non-zero")
        out.append({
            "material": name,
            "eps_hat": h.eps,
            "gamma_hat": h.sigma,
            "eps_rel_err": abs(h.eps - t.eps) / abs(t.eps),
            "gamma_rel_err": abs(h.sigma - t.sigma) / abs(t.sigma),
            "power_rel_err": power_rel,
            "power_rel_err_db": power_db,
        })
    return out


# ---------------------------------------------------------------------------
# sweep execution
# ---------------------------------------------------------------------------

def _run_cell(config: ExperimentConfig, sweep_value: float, seed: int):
    """All schemes for one (sweep value, seed) cell, sharing one dataset."""
    try:
        radio = config.radio_for(sweep_value)
        mode, level = config.discrepancy_for(sweep_value)
        snr_db = config.snr_for(sweep_value)
        dataset = synthesize_dataset(
            config.scene_truth,
            None,
            config.pair,
            radio,
            config.n_obs,
            mode,
            snr_db,
            seed,
            level=level,
            max_bounces=config.max_bounces,
            include_los=config.include_los,
        )
        theta_true = dict(config.scene_truth.materials)
        pathset_truth = trace_paths(
            config.scene_truth, config.pair, config.max_bounces,
            config.include_los, f_c=config.f_c,
        )
    except ConfigError as exc:
        raise ConfigError(
            f"sweep value {sweep_value}, seed {seed}: {exc}"
        ) from exc

    rows = []
    for scheme in config.schemes:
        try:
            result = calibrate(
                scheme,
                config.scene_dt,
                dataset,
                optim=config.optim,
                theta_init=dict(config.theta_init) if config.theta_init else None,
                max_bounces=config.max_bounces,
                include_los=config.include_los,
                projection_policy=config.projection_policy,
                grid_size=config.grid_size,
            )
            dt_hat = config.scene_dt.with_materials(result.theta_hat)
            pathset_dt = trace_paths(
                dt_hat, config.pair, config.max_bounces,
                config.include_los, f_c=config.f_c,
            )
            metrics = compute_metrics(
                result.theta_hat, theta_true, pathset_dt, pathset_truth
            )
            for m in metrics:
                rows.append(MetricsRow(
                    scheme=scheme,
                    sweep_value=float(sweep_value),
                    seed=seed,
                    **m,
                ))
        except NumericalError as exc:
            for name in sorted(config.scene_dt.materials):
                rows.append(MetricsRow(
                    scheme=scheme,
                    sweep_value=float(sweep_value),
                    seed=seed,
                    material=name,
                    eps_hat=None,
                    gamma_hat=None,
                    eps_rel_err=None,
                    gamma_rel_err=None,
                    power_rel_err=None,
                    power_rel_err_db=None,
                    error=f"{type(exc).__name__}: {exc}",
                ))
        except ConfigError as exc:
            raise ConfigError(
                f"sweep value {sweep_value}, seed {seed}, scheme {scheme}: {exc}"
            ) from exc
    return rows


def run_experiment(config: ExperimentConfig, threads: int = 1):
    """Execute the full sweep and return rows in deterministic order.

    Cells (sweep value x seed) are independent; with threads > 1 they run
    on a pool. Rows are sorted by (scheme, sweep value, seed, material), so
    the schedule never changes the output.
    """
    cells = [(v, s) for v in config.sweep_grid for s in config.seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda c: _run_cell(config, *c), cells))
    else:
        chunks = [_run_cell(config, v, s) for v, s in cells]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=MetricsRow.sort_key)
    return rows


def aggregate(rows):
    """Quartiles per (scheme, sweep value) group, skipping error rows.

    Quantiles interpolate linearly between order statistics (the
    p(k) = (k-1)/(n-1) convention). dB quartiles are the dB values of the
    linear power quartiles.
    """
    valid = [r for r in rows if not r.error]
    if not valid:
        raise ConfigError("no successful rows to aggregate")
    groups: dict = {}
    for r in valid:
        groups.setdefault((r.scheme, r.sweep_value), []).append(r)

    def quartiles(values):
        q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25.0, 50.0, 75.0])
        return (float(q1), float(med), float(q3))

    out = []
    for (scheme, value) in sorted(groups):
        members = groups[(scheme, value)]
        power_q = quartiles([r.power_rel_err for r in members])
        power_db_q = tuple(
            10.0 * math.log10(p) if p > 0 else float("-inf") for p in power_q
        )
        out.append(AggregateRow(
            scheme=scheme,
            sweep_value=value,
            n=len(members),
            eps_rel_err_q=quartiles([r.eps_rel_err for r in members]),
            gamma_rel_err_q=quartiles([r.gamma_rel_err for r in members]),
            power_rel_err_q=power_q,
            power_rel_err_db_q=power_db_q,
        ))
    return out


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(ROW_FIELDS)
    for r in rows:
        writer.writerow([
            r.scheme,
            _fmt(r.sweep_value),
            r.seed,
            r.material,
            _fmt(r.eps_hat),
            _fmt(r.gamma_hat),
            _fmt(r.eps_rel_err),
            _fmt(r.gamma_rel_err),
            _fmt(r.power_rel_err),
            _fmt(r.power_rel_err_db),
            r.error,
        ])
    return buf.getvalue()


def aggregates_to_csv(aggs) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(AGG_FIELDS)
    for a in aggs:
        writer.writerow(
            [a.scheme, _fmt(a.sweep_value), a.n]
            + [_fmt(v) for v in a.eps_rel_err_q]
            + [_fmt(v) for v in a.gamma_rel_err_q]
            + [_fmt(v) for v in a.power_rel_err_q]
            + [_fmt(v) for v in a.power_rel_err_db_q]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# single-run report
# ---------------------------------------------------------------------------

def calibration_report(result: CalibrationResult, config_echo: dict, seed: int) -> dict:
    """JSON-ready summary of one calibration run."""
    report = {
        "scheme": result.scheme,
        "theta_hat": {
            name: {"eps": m.eps, "sigma": m.sigma}
            for name, m in sorted(result.theta_hat.items())
        },
        "kappa0_hat": result.kappa0_hat,
        "loss_trace": [float(x) for x in result.loss_trace],
        "free_energy_trace": (
            [float(x) for x in result.free_energy_trace]
            if result.free_energy_trace is not None else None
        ),
        "outer_iterations": result.outer_iterations,
        "converged": result.converged,
        "wall_clock": result.wall_clock,
        "seed": seed,
        "config": config_echo,
    }
    return report
