"""raycal: ray-tracing digital-twin calibration workbench."""

__version__ = "0.1.0"
