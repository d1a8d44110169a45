"""Error taxonomy shared by the workbench.

Split along the exit-code contract: configuration problems (bad files,
invalid parameters, impossible geometry requests) versus numerical
failures discovered while computing (divergence, rank deficiency).
"""


class ConfigError(ValueError):
    """Invalid configuration, scene, or request data."""


class SceneError(ConfigError):
    """Scene fails geometric validation (zero-length wall, unknown material)."""


class GeometryError(ValueError):
    """Geometrically invalid quantity (e.g. non-positive incidence cosine)."""


class NumericalError(RuntimeError):
    """A computation failed numerically."""


class DivergenceError(NumericalError):
    """Optimizer left the finite domain; carries the last finite iterate."""

    def __init__(self, message, last_theta=None, last_loss=None):
        super().__init__(message)
        self.last_theta = last_theta
        self.last_loss = last_loss


class RankDeficiencyError(NumericalError):
    """Path-signature matrix lost full column rank for some observation."""
