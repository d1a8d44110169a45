"""Special functions and circular statistics used across the workbench.

Provides the modified Bessel functions I0/I1 in log/ratio form, the inverse
of the Bessel ratio, and the von Mises density and sampler. Everything here
is pure and re-entrant; sampler state lives in the caller-owned generator.

Concentrations are non-negative reals. The sentinel ``KAPPA_CAP`` stands in
for an infinite concentration: every limit formula (ratio -> 1, density ->
point mass, sampler -> degenerate) switches exactly at the cap, so callers
never have to special-case infinity themselves.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import i0e, i1e

__all__ = [
    "KAPPA_CAP",
    "wrap_angle",
    "log_bessel_i0",
    "bessel_ratio",
    "bessel_ratio_inv",
    "von_mises_pdf",
    "von_mises_sample",
]

#: Sentinel concentration representing an infinite (degenerate) von Mises.
KAPPA_CAP = 1e8

#: Largest representable ratio value strictly below 1; bessel_ratio(KAPPA_CAP)
#: returns this so downstream 1 - b**2 terms vanish in the degenerate limit.
_RATIO_AT_CAP = np.nextafter(1.0, 0.0)


def wrap_angle(x):
    """Wrap an angle (radians) into the canonical interval [-pi, pi).

    Args:
        x: Angle or array of angles in radians; any finite real value.

    Returns:
        The wrapped angle(s), with wrap(x + 2*pi) == wrap(x) and the
        boundary convention wrap(pi) == -pi.
    """
    if np.ndim(x) == 0:
        x = float(x)
        if -math.pi <= x < math.pi:
            return x
        return (x + math.pi) % (2.0 * math.pi) - math.pi
    a = np.asarray(x, dtype=float)
    return np.where(
        (a >= -np.pi) & (a < np.pi),
        a,
        np.mod(a + np.pi, 2.0 * np.pi) - np.pi,
    )


def _validate_kappa(kappa) -> np.ndarray:
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0.0):
        raise ValueError("concentration must be non-negative")
    if np.any(k > KAPPA_CAP):
        raise ValueError(f"concentration exceeds KAPPA_CAP={KAPPA_CAP:g}")
    return k


def log_bessel_i0(kappa):
    """Compute ln I0(kappa) without overflow.

    Uses the exponentially scaled Bessel function, ln I0(k) = ln(i0e(k)) + k,
    which stays finite over the whole admissible range [0, KAPPA_CAP].

    Args:
        kappa: Concentration value(s), 0 <= kappa <= KAPPA_CAP.

    Returns:
        ln I0(kappa), scalar or array matching the input shape.

    Raises:
        ValueError: If kappa is negative or exceeds the cap.
    """
    k = _validate_kappa(kappa)
    out = np.log(i0e(k)) + k
    return float(out) if np.ndim(kappa) == 0 else out


def bessel_ratio(kappa):
    """Compute the Bessel ratio b(kappa) = I1(kappa)/I0(kappa).

    The ratio is the mean resultant length of a von Mises variable with
    concentration kappa; it increases strictly from b(0) = 0 toward 1. At
    the sentinel cap the degenerate-limit value (the largest double below
    1) is returned so that 1 - b**2 underflows to the exact limit 0.

    Args:
        kappa: Concentration value(s), 0 <= kappa <= KAPPA_CAP.

    Returns:
        b(kappa) in [0, 1), scalar or array matching the input shape.

    Raises:
        ValueError: If kappa is negative or exceeds the cap.
    """
    k = _validate_kappa(kappa)
    out = np.where(k >= KAPPA_CAP, _RATIO_AT_CAP, i1e(k) / i0e(k))
    return float(out) if np.ndim(kappa) == 0 else out


def _bessel_ratio_deriv(kappa: float, b: float) -> float:
    # b'(k) = 1 - b/k - b^2, from the Bessel recurrence I1' = I0 - I1/k.
    return 1.0 - b / kappa - b * b


def bessel_ratio_inv(r: float) -> float:
    """Invert the Bessel ratio: find kappa with b(kappa) = r.

    Runs a Newton iteration safeguarded by the analytic bracket
    [r/(1-r^2), 2r/(1-r^2)] obtained by inverting the standard two-sided
    bounds on b; falls back to bisection whenever a Newton step would
    leave the bracket.

    Args:
        r: Target ratio, 0 <= r < 1.

    Returns:
        kappa >= 0 with |b(kappa) - r| <= 1e-10; returns KAPPA_CAP when r
        is at or above the ratio value at the cap.

    Raises:
        ValueError: If r is outside [0, 1).
        RuntimeError: If the safeguarded iteration fails to converge.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    if r == 0.0:
        return 0.0
    if r >= _RATIO_AT_CAP:
        return KAPPA_CAP

    lo = r / (1.0 - r * r)
    hi = min(2.0 * r / (1.0 - r * r), KAPPA_CAP)
    if hi >= KAPPA_CAP:
        return KAPPA_CAP
    k = min(max(r * (2.0 - r * r) / (1.0 - r * r), lo), hi)

    for _ in range(100):
        b = float(i1e(k) / i0e(k))
        f = b - r
        if abs(f) <= 1e-13:
            return k
        if f > 0.0:
            hi = k
        else:
            lo = k
        step = f / _bessel_ratio_deriv(k, b)
        k_new = k - step
        if not lo < k_new < hi:
            k_new = 0.5 * (lo + hi)
        if abs(k_new - k) <= 1e-14 * max(1.0, k):
            return k_new
        k = k_new
    if abs(float(i1e(k) / i0e(k)) - r) <= 1e-10:
        return k
    raise RuntimeError(f"bessel_ratio_inv failed to converge for r={r!r}")


def von_mises_pdf(x, mu, kappa):
    """Evaluate the von Mises density at x for location mu, concentration kappa.

    Computed as exp(kappa*(cos(x - mu) - 1)) / (2*pi*i0e(kappa)), which is
    exact and overflow-free for every admissible kappa.

    Args:
        x: Angle(s), radians.
        mu: Location parameter, radians.
        kappa: Concentration, 0 <= kappa <= KAPPA_CAP.

    Returns:
        Density value(s); 1/(2*pi) everywhere when kappa = 0.
    """
    k = _validate_kappa(kappa)
    out = np.exp(k * (np.cos(np.asarray(x) - mu) - 1.0)) / (2.0 * np.pi * i0e(k))
    scalar = np.ndim(x) == 0 and np.ndim(mu) == 0 and np.ndim(kappa) == 0
    return float(out) if scalar else out


def von_mises_sample(rng: np.random.Generator, mu, kappa, size=None):
    """Draw von Mises samples wrapped to [-pi, pi).

    Exact rejection sampling (the generator's built-in Best-Fisher method)
    for finite positive kappa; kappa = 0 reduces to the uniform circle and
    kappa = KAPPA_CAP returns mu exactly.

    Args:
        rng: Seeded numpy Generator; consumed deterministically.
        mu: Location parameter, radians.
        kappa: Concentration, 0 <= kappa <= KAPPA_CAP.
        size: Optional sample shape; None draws a single scalar.

    Returns:
        Sample(s) in [-pi, pi), deterministic given the generator state.
    """
    k = _validate_kappa(kappa)
    if np.ndim(k) != 0:
        raise ValueError("kappa must be scalar for sampling")
    kf = float(k)
    if kf >= KAPPA_CAP:
        w = wrap_angle(mu)
        if size is None:
            return w
        return np.full(size, w, dtype=float)
    if kf == 0.0:
        return rng.uniform(-np.pi, np.pi, size)
    return wrap_angle(rng.vonmises(mu, kf, size))
