"""Acceptance suite: one verdict line per stated requirement.

Run as

    pytest tests/test_acceptance.py -v -s

so the CRITERION lines print as they complete. The two bandwidth-sweep
criteria and the determinism criterion share one pair of full experiment
runs executed through the actual CLI on the bundled config.
"""

import csv
import math
import time
from importlib import resources
from types import SimpleNamespace

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import make_radio, make_toy_scene
from test_calibrate import TOY_PAIR, make_two_material_scene
from raycal.calibrate import (
    ThetaParam,
    VariationalState,
    build_workspace,
    e_step,
    free_energy,
    m_step_kappa0,
    peoc_loss_grad,
    sum_free_energy_grad,
    upec_loss_grad,
)
from raycal.channel import GMatrix, avg_power_von_mises, g_matrix, synthesize_dataset
from raycal.cli import main
from raycal.mathkit import KAPPA_CAP, bessel_ratio, log_bessel_i0, wrap_angle
from raycal.raytracer import MaterialParams, trace_paths

BANDWIDTH_GRID = tuple(v * 1.0e6 for v in (1, 2, 5, 10, 20, 50, 100, 200, 500))


def verdict(n: int, ok: bool, detail: str):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


def random_gmatrix(rng, n_paths, l_dim, alpha_scale=1.0):
    phases = rng.uniform(-np.pi, np.pi, size=(l_dim, n_paths))
    sig = np.exp(1j * phases)
    mags = alpha_scale * rng.uniform(0.5, 1.5, size=n_paths)
    alphas = mags * np.exp(1j * rng.uniform(-np.pi, np.pi, size=n_paths))
    return GMatrix(matrix=sig * alphas[np.newaxis, :], alphas=alphas, signatures=sig)


# ---------------------------------------------------------------------------
# criteria 1, 2, 9: the bundled bandwidth sweep, via the CLI
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fig5(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig5")
    config_path = str(resources.files("raycal") / "configs" / "toy_fig5.json")
    runner = CliRunner()

    t0 = time.perf_counter()
    first = runner.invoke(main, [
        "--threads", "4", "run", config_path,
        "-o", str(out / "rows1.csv"), "--aggregate", str(out / "agg1.csv"),
    ])
    elapsed = time.perf_counter() - t0
    assert first.exit_code == 0, first.output
    second = runner.invoke(main, [
        "--threads", "2", "run", config_path,
        "-o", str(out / "rows2.csv"), "--aggregate", str(out / "agg2.csv"),
    ])
    assert second.exit_code == 0, second.output

    medians = {}
    with open(out / "agg1.csv") as fh:
        for row in csv.DictReader(fh):
            key = (row["scheme"], float(row["sweep_value"]))
            medians[key] = float(row["power_rel_err_db_median"])
    return SimpleNamespace(dir=out, elapsed=elapsed, medians=medians)


def test_criterion_1_wideband_regime(fig5):
    b = 500.0e6
    peac = fig5.medians[("peac", b)]
    upec = fig5.medians[("upec", b)]
    peoc = fig5.medians[("peoc", b)]
    ok = (
        peac <= -20.0
        and -14.0 <= upec <= -8.0
        and peoc >= -4.0
        and peac < upec < peoc
        and fig5.elapsed < 600.0
    )
    verdict(1, ok, (
        f"B=500MHz medians [dB]: peac={peac:.1f} (need <=-20), "
        f"upec={upec:.1f} (need in [-14,-8]), peoc={peoc:.1f} (need >=-4), "
        f"ordering peac<upec<peoc: {peac < upec < peoc}; "
        f"sweep took {fig5.elapsed:.0f}s (need <600s)"
    ))


def test_criterion_2_narrowband_regime(fig5):
    upec_vals = {b: fig5.medians[("upec", b)] for b in BANDWIDTH_GRID if b <= 10.0e6}
    upec_ok = all(abs(v) <= 2.0 for v in upec_vals.values())
    below = {
        b: (
            fig5.medians[("peac", b)] < fig5.medians[("upec", b)]
            and fig5.medians[("peac", b)] < fig5.medians[("peoc", b)]
        )
        for b in BANDWIDTH_GRID
        if b >= 2.0e6
    }
    ok = upec_ok and all(below.values())
    worst_upec = max(abs(v) for v in upec_vals.values())
    verdict(2, ok, (
        f"UPEC within +/-2dB of 0 for B<=10MHz (worst |median|={worst_upec:.2f}dB); "
        f"PEAC below both baselines for all B>=2MHz: {all(below.values())}"
    ))


def test_criterion_9_byte_identical_reruns(fig5):
    rows_equal = (
        (fig5.dir / "rows1.csv").read_bytes() == (fig5.dir / "rows2.csv").read_bytes()
    )
    agg_equal = (
        (fig5.dir / "agg1.csv").read_bytes() == (fig5.dir / "agg2.csv").read_bytes()
    )
    verdict(9, rows_equal and agg_equal, (
        f"two CLI runs of the bundled sweep: rows identical={rows_equal}, "
        f"aggregates identical={agg_equal}"
    ))


# ---------------------------------------------------------------------------
# criterion 3: closed-form free energy vs Monte Carlo
# ---------------------------------------------------------------------------

def mc_free_energy(rng, g, h, mu, kappa, kappa0, sigma2,
                   n_samples=1_000_000, batch=200_000):
    """Sample-average estimate of E_q[ln q - ln prior - ln likelihood]."""
    p = len(mu)
    l_dim = g.l_dim
    log_norm_q = float(np.sum(np.log(2.0 * np.pi) + log_bessel_i0(kappa)))
    log_norm_p = p * (math.log(2.0 * math.pi) + log_bessel_i0(kappa0))
    const = -log_norm_q + log_norm_p + l_dim * math.log(math.pi * sigma2)
    total = 0.0
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        z = rng.vonmises(mu, kappa, size=(m, p))
        ln_q = (np.cos(z - mu) * kappa).sum(axis=1)
        ln_prior = kappa0 * np.cos(z).sum(axis=1)
        diff = np.exp(1j * z) @ g.matrix.T - h
        resid = np.sum(np.abs(diff) ** 2, axis=1)
        total += float(np.sum(ln_q - ln_prior + resid / sigma2))
        done += m
    return total / n_samples + const


def test_criterion_3_free_energy_oracle():
    rng = np.random.default_rng(31)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        p = int(rng.integers(1, 5))
        s = int(rng.integers(1, 9))
        g = random_gmatrix(rng, p, s)
        h = g.matrix @ np.exp(1j * rng.uniform(-np.pi, np.pi, p))
        h += 0.3 * (rng.standard_normal(s) + 1j * rng.standard_normal(s))
        mu = rng.uniform(-np.pi, np.pi, p)
        kappa = rng.uniform(0.0, 30.0, p)
        kappa0 = float(rng.uniform(0.0, 10.0))
        sigma2 = float(rng.uniform(0.5, 2.0))
        exact = free_energy(g, h, mu, kappa, kappa0, sigma2)
        estimate = mc_free_energy(rng, g, h, mu, kappa, kappa0, sigma2)
        worst = max(worst, abs(estimate - exact) / abs(exact))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and elapsed < 60.0
    verdict(3, ok, (
        f"closed form vs 1e6-sample MC on 20 instances: worst relative "
        f"deviation {worst:.2e} (need <1e-2) in {elapsed:.0f}s (need <60s)"
    ))


# ---------------------------------------------------------------------------
# criterion 4: average received power under von Mises phase errors
# ---------------------------------------------------------------------------

def mc_avg_power(rng, g, mu, kappa, n_samples=1_000_000, batch=200_000):
    p = len(mu)
    total = 0.0
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        z = rng.vonmises(mu, kappa, size=(m, p))
        v = np.exp(1j * z) @ g.matrix.T
        total += float(np.sum(np.abs(v) ** 2)) / g.l_dim
        done += m
    return total / n_samples


def test_criterion_4_average_power_identity():
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(20):
        p = int(rng.integers(1, 5))
        s = int(rng.integers(2, 9))
        g = random_gmatrix(rng, p, s)
        mu = rng.uniform(-np.pi, np.pi, p)
        kappa = rng.uniform(0.0, 40.0, p)
        exact = avg_power_von_mises(g, g.alphas, mu, kappa)
        estimate = mc_avg_power(rng, g, mu, kappa)
        worst = max(worst, abs(estimate - exact) / exact)

    g = random_gmatrix(rng, 3, 6)
    mu = rng.uniform(-np.pi, np.pi, 3)
    incoherent = avg_power_von_mises(g, g.alphas, mu, np.zeros(3))
    expect_incoherent = float(np.sum(np.abs(g.alphas) ** 2))
    coherent = avg_power_von_mises(g, g.alphas, mu, np.full(3, KAPPA_CAP))
    expect_coherent = float(np.sum(np.abs(g.matrix @ np.exp(1j * mu)) ** 2)) / g.l_dim
    lo_err = abs(incoherent - expect_incoherent) / expect_incoherent
    hi_err = abs(coherent - expect_coherent) / expect_coherent

    ok = worst < 0.005 and lo_err < 1e-12 and hi_err < 1e-12
    verdict(4, ok, (
        f"MC agreement on 20 instances: worst {worst:.2e} (need <5e-3); "
        f"endpoint errors kappa=0: {lo_err:.1e}, kappa=cap: {hi_err:.1e} "
        f"(need <1e-12)"
    ))


# ---------------------------------------------------------------------------
# criterion 5: analytic gradients vs central finite differences
# ---------------------------------------------------------------------------

def _fd_loss_grad(loss_of_u, u, h):
    g = np.zeros_like(u)
    for i in range(u.size):
        up, um = u.copy(), u.copy()
        up[i] += h
        um[i] -= h
        g[i] = (loss_of_u(up) - loss_of_u(um)) / (2.0 * h)
    return g


def _random_instance(i):
    rng = np.random.default_rng(500 + i)
    scene = make_toy_scene() if i % 2 == 0 else make_two_material_scene()
    radio = make_radio(float(rng.choice([0.5e6, 1.0e6, 2.0e6])))
    ds = synthesize_dataset(
        scene, None, TOY_PAIR, radio, int(rng.integers(1, 4)), "exact",
        float(rng.choice([10.0, 20.0, 40.0])), 700 + i,
        max_bounces=1, include_los=False,
    )
    ws = build_workspace(scene, ds, max_bounces=1, include_los=False)
    theta = {
        name: MaterialParams(
            eps=1.0 + 10.0 ** rng.uniform(-0.3, 0.9),
            sigma=10.0 ** rng.uniform(-2.0, -0.3),
        )
        for name in ws.material_names
    }
    return ws, ds, ThetaParam.encode(theta), rng


def _frozen_state(ws, ds, base, kappa0):
    """E-step posteriors at the evaluation point, then held fixed."""
    mu = [None] * len(ds.observations)
    kappa = [None] * len(ds.observations)
    for group in ws.groups:
        g = g_matrix(group.pathset, base.decode(), ws.radio)
        for n in group.obs_indices:
            mu[n], kappa[n] = e_step(
                g, ds.observations[n].h, ws.sigma2, kappa0, obs_index=n
            )
    return VariationalState(mu=mu, kappa=kappa, kappa0=kappa0)


def _grad_rel_err(loss_grad_of_theta, base, h):
    _, analytic = loss_grad_of_theta(base)
    fd = _fd_loss_grad(lambda u: loss_grad_of_theta(base.replace_u(u))[0], base.u, h)
    return float(np.linalg.norm(fd - analytic) / np.linalg.norm(analytic))


def test_criterion_5_gradient_suite():
    worst = {"peoc": 0.0, "upec": 0.0, "peac": 0.0}
    for i in range(10):
        ws, ds, base, rng = _random_instance(i)
        worst["peoc"] = max(
            worst["peoc"],
            _grad_rel_err(lambda t: peoc_loss_grad(t, ws), base, 1e-6),
        )
        worst["upec"] = max(
            worst["upec"],
            _grad_rel_err(lambda t: upec_loss_grad(t, ws), base, 1e-5),
        )
        state = _frozen_state(ws, ds, base, kappa0=float(rng.uniform(0.0, 3.0)))
        worst["peac"] = max(
            worst["peac"],
            _grad_rel_err(lambda t: sum_free_energy_grad(t, ws, state), base, 1e-6),
        )
    ok = all(v < 1e-4 for v in worst.values())
    verdict(5, ok, (
        "worst relative gradient error over 10 instances each: "
        f"peoc={worst['peoc']:.1e}, upec={worst['upec']:.1e}, "
        f"peac={worst['peac']:.1e} (need <1e-4)"
    ))


# ---------------------------------------------------------------------------
# criterion 6: posterior concentration and phase updates
# ---------------------------------------------------------------------------

def _fixed_point_kappa(s, lo, hi):
    """Bisect kappa = 2 s b(kappa) on the analytic bracket."""
    f = lambda k: k - 2.0 * s * bessel_ratio(k)
    assert f(lo) <= 0.0 <= f(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, lo):
            break
    return 0.5 * (lo + hi)


def test_criterion_6_e_step_suite():
    rng = np.random.default_rng(61)

    # (a) kappa is exactly zero whenever the per-path SNR is at most one
    zeros_ok = True
    for _ in range(5):
        p = int(rng.integers(1, 5))
        l_dim = p + int(rng.integers(2, 7))
        g = random_gmatrix(rng, p, l_dim)
        h = rng.standard_normal(l_dim) + 1j * rng.standard_normal(l_dim)
        s_max = l_dim * float(np.max(np.abs(g.alphas)) ** 2)
        for sigma2 in (s_max, 1.5 * s_max):
            _, kappa = e_step(g, h, sigma2, 0.5)
            zeros_ok = zeros_ok and bool(np.all(kappa == 0.0))

    # (b) above one: inside the bracket and below the true fixed point
    bracket_ok = True
    worst_overshoot = -math.inf
    for s in (1.5, 2.0, 5.0, 100.0, 1.0e4):
        lo = 2.0 * math.sqrt((s - 1.0) * s)
        hi = 2.0 * math.sqrt((s - 0.5) * s)
        k_star = _fixed_point_kappa(s, lo, hi)
        sigma2, l_dim = 1.0, 4
        amag = math.sqrt(s * sigma2 / l_dim)
        sig = np.exp(1j * rng.uniform(-np.pi, np.pi, (l_dim, 1)))
        g = GMatrix(matrix=amag * sig, alphas=np.array([amag + 0.0j]), signatures=sig)
        h = rng.standard_normal(l_dim) + 1j * rng.standard_normal(l_dim)
        _, kappa = e_step(g, h, sigma2, 0.0)
        k_ret = float(kappa[0])
        bracket_ok = bracket_ok and (lo - 1e-9 <= k_ret <= hi) and (k_star <= hi)
        worst_overshoot = max(worst_overshoot, k_ret - k_star)

    # (c) noise-free single-path phase recovery
    sig = np.exp(1j * rng.uniform(-np.pi, np.pi, (8, 1)))
    alpha = np.array([0.8 * np.exp(0.3j)])
    g = GMatrix(matrix=sig * alpha, alphas=alpha, signatures=sig)
    worst_mu = 0.0
    for z in (-3.0, -1.2, 0.5, 2.9):
        h = g.matrix @ np.array([np.exp(1j * z)])
        mu, _ = e_step(g, h, 1e-6, 0.0)
        worst_mu = max(worst_mu, abs(float(wrap_angle(mu[0] - z))))

    ok = zeros_ok and bracket_ok and worst_overshoot <= 1e-8 and worst_mu < 1e-8
    verdict(6, ok, (
        f"low-SNR kappa exactly zero: {zeros_ok}; bracket membership: {bracket_ok} "
        f"with max (returned - fixed point) = {worst_overshoot:.1e} (need <=1e-8); "
        f"noise-free phase recovery worst |mu - z| = {worst_mu:.1e} (need <1e-8)"
    ))


# ---------------------------------------------------------------------------
# criterion 7: stationarity of the prior concentration update
# ---------------------------------------------------------------------------

def test_criterion_7_prior_update_stationarity():
    rng = np.random.default_rng(71)
    worst_ratio = 0.0
    for _ in range(5):
        n_obs, p, l_dim, sigma2 = 6, 3, 5, 1.0
        gs = [random_gmatrix(rng, p, l_dim) for _ in range(n_obs)]
        hs = [
            rng.standard_normal(l_dim) + 1j * rng.standard_normal(l_dim)
            for _ in range(n_obs)
        ]
        mu = [rng.normal(0.0, 0.4, p) for _ in range(n_obs)]
        kappa = [rng.uniform(1.0, 50.0, p) for _ in range(n_obs)]
        k0 = m_step_kappa0(VariationalState(mu=mu, kappa=kappa, kappa0=0.0))
        assert 0.0 < k0 < KAPPA_CAP

        def total_f(k0v):
            return sum(
                free_energy(g, h, m, k, k0v, sigma2)
                for g, h, m, k in zip(gs, hs, mu, kappa)
            )

        step = 1e-4 * max(1.0, k0)
        deriv = (total_f(k0 + step) - total_f(k0 - step)) / (2.0 * step)
        worst_ratio = max(worst_ratio, abs(deriv) / abs(total_f(k0)))

    clamp_ok = True
    for _ in range(3):
        mu = [rng.uniform(2.5, np.pi, 3), rng.uniform(-np.pi, -2.5, 3)]
        kappa = [rng.uniform(1.0, 20.0, 3), rng.uniform(1.0, 20.0, 3)]
        k0 = m_step_kappa0(VariationalState(mu=mu, kappa=kappa, kappa0=0.0))
        clamp_ok = clamp_ok and k0 == 0.0

    ok = worst_ratio < 1e-6 and clamp_ok
    verdict(7, ok, (
        f"worst |dF/dkappa0| / |F| at the update = {worst_ratio:.1e} (need <1e-6); "
        f"negative-resultant cases return exactly 0: {clamp_ok}"
    ))


# ---------------------------------------------------------------------------
# criterion 8: degenerate posterior reduces the free energy to the LS loss
# ---------------------------------------------------------------------------

def test_criterion_8_reduction_identity():
    scene = make_toy_scene()
    radio = make_radio(1.0e6)
    ds = synthesize_dataset(
        scene, None, TOY_PAIR, radio, 4, "exact", 20.0, 81,
        max_bounces=1, include_los=False,
    )
    ws = build_workspace(scene, ds, max_bounces=1, include_los=False)
    theta = ThetaParam.encode({"wall": MaterialParams(eps=4.0, sigma=0.2)})
    n_paths = len(ws.groups[0].pathset)
    n_obs = len(ds.observations)
    state = VariationalState(
        mu=[np.zeros(n_paths) for _ in range(n_obs)],
        kappa=[np.full(n_paths, KAPPA_CAP) for _ in range(n_obs)],
        kappa0=KAPPA_CAP,
    )
    f_total, _ = sum_free_energy_grad(theta, ws, state)
    loss, _ = peoc_loss_grad(theta, ws)
    const = n_obs * radio.l_dim * math.log(math.pi * ds.sigma2)
    rel = abs((f_total - const) * ds.sigma2 - loss) / abs(loss)
    verdict(8, rel < 1e-9, (
        f"(F - N L ln(pi sigma^2)) * sigma^2 vs least-squares loss: "
        f"relative gap {rel:.1e} (need <1e-9)"
    ))
