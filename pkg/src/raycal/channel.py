"""Space-frequency channel modeling and observation synthesis.

Turns traced path sets into multi-carrier MIMO channel responses: steering
vectors under the planar-wavefront model, Kronecker space-frequency
signatures, the path-signature matrix G, deterministic and phase-error
channel models, noisy dataset synthesis under three discrepancy generators,
and the power-profile quantities used by the power-matching calibrator.

Vector ordering is subcarrier-major, then receive antenna, then transmit
antenna everywhere: index (s, n_rx, n_tx) maps to the flat position
s*N_rx*N_tx + n_rx*N_tx + n_tx, matching w(tau) kron a_rx kron conj(a_tx).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mathkit import KAPPA_CAP, bessel_ratio, von_mises_sample, wrap_angle
from .raytracer import (
    V_LIGHT,
    DevicePair,
    MaterialParams,
    PathSet,
    Scene,
    path_amplitudes,
    trace_paths,
)

__all__ = [
    "ArrayGeometry",
    "RadioConfig",
    "ChannelObservation",
    "ChannelDataset",
    "GMatrix",
    "steering_vector",
    "space_freq_signature",
    "g_matrix",
    "deterministic_cfr",
    "noise_power_from_snr",
    "synthesize_dataset",
    "measured_power",
    "model_power",
    "avg_power_von_mises",
    "dataset_to_dict",
    "dataset_from_dict",
]


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna element offsets in local 2D coordinates (meters)."""

    offsets: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.offsets) == 0:
            raise ConfigError("array needs at least one element")
        if len(set(self.offsets)) != len(self.offsets):
            raise ConfigError("array element offsets must be distinct")

    @property
    def n(self) -> int:
        return len(self.offsets)

    def as_matrix(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=float)


@dataclass(frozen=True)
class RadioConfig:
    """Subcarrier grid and array geometry.

    Subcarrier s (1-based) sits at f_s = f_min + (s-1)*delta_f; the derived
    carrier is the band center f_c = f_min + (s_count-1)*delta_f/2.
    """

    f_min: float
    delta_f: float
    s_count: int
    rx_array: ArrayGeometry
    tx_array: ArrayGeometry

    def __post_init__(self):
        if self.s_count < 1:
            raise ConfigError("s_count must be >= 1")
        if self.delta_f <= 0 or self.f_min <= 0:
            raise ConfigError("delta_f and f_min must be positive")

    @property
    def f_c(self) -> float:
        return self.f_min + (self.s_count - 1) * self.delta_f / 2.0

    @property
    def bandwidth(self) -> float:
        return self.s_count * self.delta_f

    @property
    def l_dim(self) -> int:
        return self.s_count * self.rx_array.n * self.tx_array.n

    @property
    def subcarriers(self) -> np.ndarray:
        return self.f_min + self.delta_f * np.arange(self.s_count)

    def to_dict(self) -> dict:
        return {
            "f_min": self.f_min,
            "delta_f": self.delta_f,
            "s_count": self.s_count,
            "rx_array": [list(o) for o in self.rx_array.offsets],
            "tx_array": [list(o) for o in self.tx_array.offsets],
        }

    @staticmethod
    def from_dict(d: dict) -> "RadioConfig":
        try:
            return RadioConfig(
                f_min=float(d["f_min"]),
                delta_f=float(d["delta_f"]),
                s_count=int(d["s_count"]),
                rx_array=ArrayGeometry(tuple((float(o[0]), float(o[1])) for o in d["rx_array"])),
                tx_array=ArrayGeometry(tuple((float(o[0]), float(o[1])) for o in d["tx_array"])),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed radio config: {exc}") from exc


@dataclass(frozen=True)
class ChannelObservation:
    """One measured CFR vector of length L for a device pair."""

    pair: DevicePair
    h: np.ndarray


@dataclass
class ChannelDataset:
    """Observations plus the noise power and the generator provenance."""

    radio: RadioConfig
    observations: list[ChannelObservation]
    sigma2: float
    provenance: dict

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class GMatrix:
    """Path-signature matrix: column p is alpha_p times the signature of path p."""

    matrix: np.ndarray      # (L, P)
    alphas: np.ndarray      # (P,)
    signatures: np.ndarray  # (L, P), unit-modulus entries

    @property
    def l_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_paths(self) -> int:
        return self.matrix.shape[1]


def steering_vector(angle: float, array: ArrayGeometry, f_c: float) -> np.ndarray:
    """Planar-wavefront steering vector for a 2D array.

    Entry n is exp(j*(2*pi/V_LIGHT)*f_c*(d_n . u)) with u = (cos angle,
    sin angle); all entries have unit modulus.
    """
    u = np.array([math.cos(angle), math.sin(angle)])
    proj = array.as_matrix() @ u
    return np.exp(1j * (2.0 * math.pi / V_LIGHT) * f_c * proj)


def space_freq_signature(tau: float, aoa: float, aod: float, radio: RadioConfig) -> np.ndarray:
    """Kronecker space-frequency signature a(tau, aoa, aod), length L.

    Composition w(tau) kron a_rx(aoa) kron conj(a_tx(aod)) with subcarrier
    phasors w_s = exp(-j*2*pi*f_s*tau).
    """
    w = np.exp(-2j * math.pi * radio.subcarriers * tau)
    a_rx = steering_vector(aoa, radio.rx_array, radio.f_c)
    a_tx = steering_vector(aod, radio.tx_array, radio.f_c)
    return np.kron(w, np.kron(a_rx, np.conj(a_tx)))


def _signature_matrix(pathset: PathSet, radio: RadioConfig) -> np.ndarray:
    """Stack per-path signatures into an (L, P) matrix."""
    if len(pathset) == 0:
        raise ConfigError("path set is empty; no coverage between the devices")
    cols = [
        space_freq_signature(p.delay, p.aoa, p.aod, radio)
        for p in pathset.paths
    ]
    return np.column_stack(cols)


def g_matrix(pathset: PathSet, theta: dict[str, MaterialParams], radio: RadioConfig) -> GMatrix:
    """Build G = [a_1 ... a_P] diag(alpha(theta)) for a traced path set."""
    sig = _signature_matrix(pathset, radio)
    alpha, _ = path_amplitudes(pathset, theta, radio.f_c)
    return GMatrix(matrix=sig * alpha[np.newaxis, :], alphas=alpha, signatures=sig)


def deterministic_cfr(g: GMatrix) -> np.ndarray:
    """Deterministic channel prediction: the phase-error model with all-zero phases."""
    return g.matrix.sum(axis=1)


def noise_power_from_snr(pathset: PathSet, snr_db: float) -> float:
    """Noise power sigma^2 = ||alpha||^2 / 10^(snr_db/10) for the given path set."""
    if len(pathset) == 0:
        raise ConfigError("cannot define SNR on an empty path set")
    p_sig = float(np.sum(np.abs(pathset.alphas) ** 2))
    return p_sig / (10.0 ** (snr_db / 10.0))


def measured_power(h: np.ndarray, tau: float, aoa: float, aod: float, radio: RadioConfig) -> float:
    """Power-profile sample of a measured CFR: |(1/sqrt(L)) a^H h|^2."""
    a = space_freq_signature(tau, aoa, aod, radio)
    if a.shape != np.shape(h):
        raise ConfigError("observation length does not match the radio config")
    return float(np.abs(np.vdot(a, h)) ** 2 / radio.l_dim)


def model_power(g: GMatrix, tau: float, aoa: float, aod: float, radio: RadioConfig) -> float:
    """Uniform-phase-average model power: ||(1/sqrt(L)) a^H G||^2."""
    a = space_freq_signature(tau, aoa, aod, radio)
    row = np.conj(a) @ g.matrix
    return float(np.sum(np.abs(row) ** 2) / radio.l_dim)


def avg_power_von_mises(g: GMatrix, alpha: np.ndarray, mu: np.ndarray, kappa: np.ndarray) -> float:
    """Expected received power under independent von Mises phase errors.

    (1/L) ||G diag(b(kappa)) e^{j mu}||^2 + sum_p |alpha_p|^2 (1 - b(kappa_p)^2);
    exact at both endpoints (kappa = 0 gives ||alpha||^2, kappa capped gives
    ||G e^{j mu}||^2 / L).
    """
    alpha = np.asarray(alpha, dtype=complex)
    b = bessel_ratio(np.asarray(kappa, dtype=float))
    phasor = b * np.exp(1j * np.asarray(mu, dtype=float))
    coherent = g.matrix @ phasor
    l_dim = g.l_dim
    return float(
        np.sum(np.abs(coherent) ** 2) / l_dim
        + np.sum(np.abs(alpha) ** 2 * (1.0 - b ** 2))
    )


def _obs_rng(seed: int, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(n)]))


def synthesize_dataset(
    scene_truth: Scene,
    theta_true: dict[str, MaterialParams] | None,
    pair: DevicePair,
    radio: RadioConfig,
    n_obs: int,
    mode: str,
    snr_db: float,
    seed: int,
    *,
    level: float = 0.0,
    max_bounces: int = 3,
    include_los: bool = True,
) -> ChannelDataset:
    """Generate N noisy channel observations from the ground-truth scene.

    Modes:
      - "exact": H_n = deterministic CFR + noise.
      - "rx-displacement": each observation retraces the scene with the
        receiver displaced by level*lambda_c in a uniformly random
        direction; level must lie in [0, 0.5]. The recorded coordinates
        stay nominal (the calibrator never sees the true displacement).
      - "iid-phase": H_n = G exp(j z_n) + noise with z_n drawn i.i.d. von
        Mises(0, level) per path.

    Noise is circular Gaussian with total per-component variance sigma^2
    (real and imaginary parts each sigma^2/2), sigma^2 set from snr_db on
    the nominal ground-truth path set. Observation n consumes its own
    generator derived from (seed, n), so synthesis is reproducible and
    order-independent.
    """
    if n_obs < 1:
        raise ConfigError("n_obs must be >= 1")
    if mode not in ("exact", "rx-displacement", "iid-phase"):
        raise ConfigError(f"unknown synthesis mode {mode!r}")
    if mode == "rx-displacement" and not 0.0 <= level <= 0.5:
        raise ConfigError("rx-displacement level must lie in [0, 0.5]")
    if mode == "iid-phase" and not 0.0 <= level <= KAPPA_CAP:
        raise ConfigError("iid-phase level must be a valid concentration")

    theta = theta_true if theta_true is not None else scene_truth.materials
    scene = scene_truth.with_materials(theta)
    pathset = trace_paths(scene, pair, max_bounces, include_los, f_c=radio.f_c)
    if len(pathset) == 0:
        raise ConfigError("ground-truth trace produced no paths")
    sigma2 = noise_power_from_snr(pathset, snr_db)
    g = g_matrix(pathset, theta, radio)
    h_det = deterministic_cfr(g)
    lam_c = V_LIGHT / radio.f_c
    l_dim = radio.l_dim

    observations = []
    for n in range(n_obs):
        rng = _obs_rng(seed, n)
        if mode == "exact":
            h_clean = h_det
        elif mode == "iid-phase":
            z = von_mises_sample(rng, 0.0, level, size=g.n_paths)
            h_clean = g.matrix @ np.exp(1j * z)
        else:  # rx-displacement
            phi = rng.uniform(-math.pi, math.pi)
            displaced = DevicePair(
                rx=(
                    pair.rx[0] + level * lam_c * math.cos(phi),
                    pair.rx[1] + level * lam_c * math.sin(phi),
                ),
                tx=pair.tx,
            )
            ps_n = trace_paths(scene, displaced, max_bounces, include_los, f_c=radio.f_c)
            if len(ps_n) == 0:
                h_clean = np.zeros(l_dim, dtype=complex)
            else:
                h_clean = deterministic_cfr(g_matrix(ps_n, theta, radio))
        noise_re = rng.standard_normal(l_dim)
        noise_im = rng.standard_normal(l_dim)
        w = math.sqrt(sigma2 / 2.0) * (noise_re + 1j * noise_im)
        observations.append(ChannelObservation(pair=pair, h=h_clean + w))

    return ChannelDataset(
        radio=radio,
        observations=observations,
        sigma2=sigma2,
        provenance={"mode": mode, "level": float(level), "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def dataset_to_dict(ds: ChannelDataset) -> dict:
    return {
        "radio": ds.radio.to_dict(),
        "sigma2": ds.sigma2,
        "provenance": dict(ds.provenance),
        "observations": [
            {
                "rx": list(o.pair.rx),
                "tx": list(o.pair.tx),
                "h": [[z.real, z.imag] for z in o.h],
            }
            for o in ds.observations
        ],
    }


def dataset_from_dict(d: dict) -> ChannelDataset:
    try:
        radio = RadioConfig.from_dict(d["radio"])
        observations = []
        for o in d["observations"]:
            pair = DevicePair(rx=(float(o["rx"][0]), float(o["rx"][1])),
                              tx=(float(o["tx"][0]), float(o["tx"][1])))
            h = np.array([complex(re, im) for re, im in o["h"]], dtype=complex)
            if h.shape[0] != radio.l_dim:
                raise ConfigError(
                    f"observation length {h.shape[0]} != L={radio.l_dim}"
                )
            observations.append(ChannelObservation(pair=pair, h=h))
        return ChannelDataset(
            radio=radio,
            observations=observations,
            sigma2=float(d["sigma2"]),
            provenance=dict(d.get("provenance", {})),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed dataset: {exc}") from exc
