"""Image-method specular ray tracer for 2D planar-wall scenes.

Walls are line segments with both faces reflective; propagation paths are
enumerated exhaustively up to a bounce budget by mirroring the transmitter
across wall sequences and validating reflection points and occlusion. Path
geometry (delays, angles, incidence cosines) is independent of the material
parameters, so amplitudes can be re-evaluated cheaply for new parameter
values along with their closed-form derivatives.

Scenes are 2D and reflections are TE polarized (field perpendicular to the
scene plane). The two physical constants the formulas need live here.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, SceneError
from .mathkit import wrap_angle

__all__ = [
    "V_LIGHT",
    "EPS0",
    "MaterialParams",
    "Wall",
    "Scene",
    "DevicePair",
    "Path",
    "PathSet",
    "complex_permittivity",
    "fresnel_te",
    "trace_paths",
    "path_amplitudes",
    "load_scene",
    "scene_from_dict",
    "scene_to_dict",
    "pathset_to_dict",
]

#: Propagation speed, m/s.
V_LIGHT = 2.998e8

#: Vacuum permittivity, F/m.
EPS0 = 8.854187817e-12

# geometric tolerance for occlusion / endpoint ties, meters
_GEOM_TOL = 1e-9


@dataclass(frozen=True)
class MaterialParams:
    """Electromagnetic material parameters: relative permittivity and conductivity [S/m]."""

    eps: float
    sigma: float


@dataclass(frozen=True)
class Wall:
    a: tuple[float, float]
    b: tuple[float, float]
    material: str

    def length(self) -> float:
        return math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])


@dataclass(frozen=True)
class Scene:
    """Planar wall segments with material assignments; both wall faces reflect."""

    walls: tuple[Wall, ...]
    materials: dict[str, MaterialParams]

    def __post_init__(self):
        for i, w in enumerate(self.walls):
            if w.length() <= _GEOM_TOL:
                raise SceneError(f"wall {i} has zero length")
            if w.material not in self.materials:
                raise SceneError(f"wall {i} references unknown material {w.material!r}")

    def with_materials(self, materials: dict[str, MaterialParams]) -> "Scene":
        """Return a copy of the scene with material parameters replaced."""
        merged = dict(self.materials)
        merged.update(materials)
        return Scene(walls=self.walls, materials=merged)


@dataclass(frozen=True)
class DevicePair:
    """Receiver and transmitter reference coordinates (meters, 2D)."""

    rx: tuple[float, float]
    tx: tuple[float, float]

    def __post_init__(self):
        if self.rx == self.tx:
            raise SceneError("rx and tx coincide")


@dataclass(frozen=True)
class Path:
    """One specular propagation path.

    amplitude is the complex voltage gain evaluated at the reference
    materials and carrier the path set was traced with; delay is
    total_length / V_LIGHT. aod/aoa are the departure direction at the
    transmitter and the arrival-pointing direction at the receiver
    (azimuths, radians, wrapped to [-pi, pi)).
    """

    amplitude: complex
    delay: float
    aod: float
    aoa: float
    bounce_points: tuple[tuple[float, float], ...]
    wall_ids: tuple[int, ...]
    total_length: float
    cos_incidences: tuple[float, ...]
    materials: tuple[str, ...]


@dataclass(frozen=True)
class PathSet:
    """Traced paths for one device pair, sorted by ascending delay.

    The geometry is frozen at trace time; amplitudes stored on the paths
    refer to (reference materials, f_c) and can be recomputed for any other
    material parameters with path_amplitudes.
    """

    paths: tuple[Path, ...]
    pair: DevicePair
    f_c: float

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.amplitude for p in self.paths], dtype=complex)

    @property
    def delays(self) -> np.ndarray:
        return np.array([p.delay for p in self.paths], dtype=float)


def complex_permittivity(mat: MaterialParams, f: float) -> complex:
    """Complex relative permittivity eta = eps - j*sigma/(2*pi*f*EPS0) at frequency f [Hz]."""
    if f <= 0:
        raise GeometryError("frequency must be positive")
    return complex(mat.eps, -mat.sigma / (2.0 * math.pi * f * EPS0))


def fresnel_te(cos_incidence: float, eta: complex) -> complex:
    """TE (perpendicular) Fresnel reflection coefficient.

    r = (cos_i - g) / (cos_i + g) with g = sqrt(eta - sin_i^2) taken as the
    principal square root (non-negative real part). |r| <= 1 for passive
    materials (Re eta >= 1, Im eta <= 0).

    Raises:
        GeometryError: If cos_incidence is outside (0, 1].
    """
    r, _ = _fresnel_te_with_grad(cos_incidence, eta)
    return r


def _fresnel_te_with_grad(cos_incidence: float, eta: complex) -> tuple[complex, complex]:
    """Return (r, dr/d eta)."""
    if not 0.0 < cos_incidence <= 1.0:
        raise GeometryError(f"incidence cosine {cos_incidence!r} outside (0, 1]")
    c = cos_incidence
    g = np.sqrt(complex(eta - (1.0 - c * c)))
    r = (c - g) / (c + g)
    dr_deta = -c / (g * (c + g) ** 2)
    return complex(r), complex(dr_deta)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _mirror(p, wall: Wall):
    ax, ay = wall.a
    bx, by = wall.b
    dx, dy = bx - ax, by - ay
    # unit normal
    nlen = math.hypot(dx, dy)
    nx, ny = -dy / nlen, dx / nlen
    dist = (p[0] - ax) * nx + (p[1] - ay) * ny
    return (p[0] - 2.0 * dist * nx, p[1] - 2.0 * dist * ny)


def _intersect_params(p1, p2, q1, q2):
    """Intersection of segments p1->p2 and q1->q2 as parameters (t, u), or None if parallel."""
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = q2[0] - q1[0], q2[1] - q1[1]
    denom = rx * sy - ry * sx
    if denom == 0.0:
        return None
    qpx, qpy = q1[0] - p1[0], q1[1] - p1[1]
    t = (qpx * sy - qpy * sx) / denom
    u = (qpx * ry - qpy * rx) / denom
    return t, u


def _leg_blocked(p1, p2, scene: Scene) -> bool:
    """True if the leg p1->p2 hits a wall strictly between endpoints.

    Intersections within _GEOM_TOL meters of either leg endpoint (where
    reflection points sit on their walls) or of either wall endpoint
    (shared-corner ties) do not block.
    """
    leg_len = math.hypot(p2[0] - p1[0], p2[1] - p1[1])
    if leg_len <= _GEOM_TOL:
        return False
    for wall in scene.walls:
        hit = _intersect_params(p1, p2, wall.a, wall.b)
        if hit is None:
            continue
        t, u = hit
        wall_len = wall.length()
        if not (_GEOM_TOL < t * leg_len < leg_len - _GEOM_TOL):
            continue
        if not (_GEOM_TOL < u * wall_len < wall_len - _GEOM_TOL):
            continue
        return True
    return False


def _wall_sequences(n_walls: int, max_bounces: int):
    """All wall-index sequences of length 1..max_bounces without immediate repeats."""
    frontier = [(i,) for i in range(n_walls)]
    for _ in range(max_bounces):
        next_frontier = []
        for seq in frontier:
            yield seq
            for j in range(n_walls):
                if j != seq[-1]:
                    next_frontier.append(seq + (j,))
        frontier = next_frontier


def _trace_sequence(scene: Scene, pair: DevicePair, seq: tuple[int, ...]):
    """Attempt the image-method construction for one wall sequence.

    Returns (bounce_points, total_length) or None when the sequence is
    geometrically invalid (reflection point off-segment, wrong side, or an
    occluded leg).
    """
    walls = [scene.walls[i] for i in seq]
    images = [pair.tx]
    for wall in walls:
        images.append(_mirror(images[-1], wall))

    # back-trace reflection points from the receiver
    target = pair.rx
    points_rev = []
    for i in range(len(seq) - 1, -1, -1):
        wall = walls[i]
        hit = _intersect_params(target, images[i + 1], wall.a, wall.b)
        if hit is None:
            return None
        t, u = hit
        if not 1e-12 < t < 1.0 - 1e-12:
            return None  # image on the same side; no physical crossing
        wall_len = wall.length()
        slack = _GEOM_TOL / wall_len
        if not -slack <= u <= 1.0 + slack:
            return None  # reflection point outside the segment
        q = (
            target[0] + t * (images[i + 1][0] - target[0]),
            target[1] + t * (images[i + 1][1] - target[1]),
        )
        points_rev.append(q)
        target = q
    points = list(reversed(points_rev))

    # occlusion along every leg
    vertices = [pair.tx] + points + [pair.rx]
    for a, b in zip(vertices, vertices[1:]):
        if math.hypot(b[0] - a[0], b[1] - a[1]) <= _GEOM_TOL:
            return None
        if _leg_blocked(a, b, scene):
            return None

    total_length = math.hypot(
        pair.rx[0] - images[-1][0], pair.rx[1] - images[-1][1]
    )
    return points, total_length


def _incidence_cosines(scene, seq, vertices):
    cosines = []
    for i, wall_id in enumerate(seq):
        wall = scene.walls[wall_id]
        ax, ay = wall.a
        bx, by = wall.b
        nlen = wall.length()
        nx, ny = -(by - ay) / nlen, (bx - ax) / nlen
        p_prev = vertices[i]
        q = vertices[i + 1]
        leg = (q[0] - p_prev[0], q[1] - p_prev[1])
        leg_len = math.hypot(*leg)
        cos_inc = abs((leg[0] * nx + leg[1] * ny) / leg_len)
        if cos_inc <= 1e-12:
            return None  # grazing incidence, degenerate reflection
        cosines.append(min(cos_inc, 1.0))
    return tuple(cosines)


def trace_paths(
    scene: Scene,
    pair: DevicePair,
    max_bounces: int = 3,
    include_los: bool = True,
    *,
    f_c: float,
) -> PathSet:
    """Enumerate all valid specular paths up to max_bounces by the image method.

    The line-of-sight path is included only when include_los is set and the
    direct leg is unoccluded. Amplitudes are evaluated at the scene's own
    material parameters and the given carrier f_c.

    Returns a PathSet sorted by ascending delay.
    """
    if max_bounces < 0:
        raise SceneError("max_bounces must be >= 0")
    records = []

    if include_los and not _leg_blocked(pair.tx, pair.rx, scene):
        d = math.hypot(pair.rx[0] - pair.tx[0], pair.rx[1] - pair.tx[1])
        records.append({
            "points": [],
            "seq": (),
            "length": d,
            "cosines": (),
        })

    for seq in _wall_sequences(len(scene.walls), max_bounces):
        result = _trace_sequence(scene, pair, seq)
        if result is None:
            continue
        points, total_length = result
        vertices = [pair.tx] + points + [pair.rx]
        cosines = _incidence_cosines(scene, seq, vertices)
        if cosines is None:
            continue
        records.append({
            "points": points,
            "seq": seq,
            "length": total_length,
            "cosines": cosines,
        })

    paths = []
    for rec in records:
        vertices = [pair.tx] + rec["points"] + [pair.rx]
        first, last = vertices[1], vertices[-2]
        aod = wrap_angle(math.atan2(first[1] - pair.tx[1], first[0] - pair.tx[0]))
        aoa = wrap_angle(math.atan2(last[1] - pair.rx[1], last[0] - pair.rx[0]))
        paths.append(Path(
            amplitude=0j,
            delay=rec["length"] / V_LIGHT,
            aod=aod,
            aoa=aoa,
            bounce_points=tuple(rec["points"]),
            wall_ids=rec["seq"],
            total_length=rec["length"],
            cos_incidences=rec["cosines"],
            materials=tuple(scene.walls[i].material for i in rec["seq"]),
        ))
    paths.sort(key=lambda p: (p.delay, p.wall_ids))
    pathset = PathSet(paths=tuple(paths), pair=pair, f_c=f_c)
    if len(paths) == 0:
        return pathset
    alphas, _ = path_amplitudes(pathset, scene.materials, f_c)
    paths = [
        dataclasses.replace(p, amplitude=complex(a))
        for p, a in zip(paths, alphas)
    ]
    return PathSet(paths=tuple(paths), pair=pair, f_c=f_c)


def path_amplitudes(
    pathset: PathSet,
    materials: dict[str, MaterialParams],
    f_c: float,
):
    """Complex path amplitudes and their material derivatives.

    The amplitude model is free-space spreading times the product of TE
    reflection coefficients at the carrier:

        alpha_p = (lambda_c / (4 pi d_p)) * prod_i r(cos_i, eta(material_i))

    Args:
        pathset: Traced geometry.
        materials: Material parameters covering every bounced material.
        f_c: Carrier frequency [Hz].

    Returns:
        (alpha, grads): alpha is a complex (P,) array; grads maps material
        name -> (d alpha/d eps, d alpha/d sigma), each a complex (P,) array.
        Gradients for materials a path never touches are zero.
    """
    lam = V_LIGHT / f_c
    names = sorted(materials)
    etas = {}
    detas_dsigma = -1j / (2.0 * math.pi * f_c * EPS0)
    for name in names:
        etas[name] = complex_permittivity(materials[name], f_c)

    P = len(pathset.paths)
    alpha = np.zeros(P, dtype=complex)
    grads = {name: (np.zeros(P, dtype=complex), np.zeros(P, dtype=complex))
             for name in names}

    for p_idx, path in enumerate(pathset.paths):
        for m in path.materials:
            if m not in materials:
                raise SceneError(f"material parameters missing for {m!r}")
        base = lam / (4.0 * math.pi * path.total_length)
        refl = []
        dr_deta = []
        for cos_inc, m in zip(path.cos_incidences, path.materials):
            r, dr = _fresnel_te_with_grad(cos_inc, etas[m])
            refl.append(r)
            dr_deta.append(dr)
        prod = 1.0 + 0j
        for r in refl:
            prod *= r
        alpha[p_idx] = base * prod
        for i, m in enumerate(path.materials):
            prod_except = 1.0 + 0j
            for j, r in enumerate(refl):
                if j != i:
                    prod_except *= r
            term = base * dr_deta[i] * prod_except
            d_eps, d_sigma = grads[m]
            d_eps[p_idx] += term          # d eta / d eps = 1
            d_sigma[p_idx] += term * detas_dsigma
    return alpha, grads


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def scene_from_dict(d: dict) -> Scene:
    try:
        materials = {
            name: MaterialParams(eps=float(m["eps"]), sigma=float(m["sigma"]))
            for name, m in d["materials"].items()
        }
        walls = tuple(
            Wall(
                a=(float(w["a"][0]), float(w["a"][1])),
                b=(float(w["b"][0]), float(w["b"][1])),
                material=str(w["material"]),
            )
            for w in d["walls"]
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise SceneError(f"malformed scene data: {exc}") from exc
    return Scene(walls=walls, materials=materials)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "walls": [
            {"a": list(w.a), "b": list(w.b), "material": w.material}
            for w in scene.walls
        ],
        "materials": {
            name: {"eps": m.eps, "sigma": m.sigma}
            for name, m in scene.materials.items()
        },
    }


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def pathset_to_dict(pathset: PathSet) -> dict:
    return {
        "rx": list(pathset.pair.rx),
        "tx": list(pathset.pair.tx),
        "f_c": pathset.f_c,
        "paths": [
            {
                "amplitude": [p.amplitude.real, p.amplitude.imag],
                "delay": p.delay,
                "aod": p.aod,
                "aoa": p.aoa,
                "total_length": p.total_length,
                "wall_ids": list(p.wall_ids),
                "materials": list(p.materials),
                "bounce_points": [list(q) for q in p.bounce_points],
                "cos_incidences": list(p.cos_incidences),
            }
            for p in pathset.paths
        ],
    }
