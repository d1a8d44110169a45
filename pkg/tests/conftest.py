import numpy as np
import pytest

from raycal.channel import ArrayGeometry, RadioConfig
from raycal.raytracer import V_LIGHT, DevicePair, MaterialParams, Scene, Wall

F_C = 6.0e9
LAM = V_LIGHT / F_C

EPS_TRUE = 5.31
SIGMA_TRUE = 0.139


def make_toy_scene(lower_y=-180.0, eps=EPS_TRUE, sigma=SIGMA_TRUE):
    """Two horizontal walls above and below the device axis, shared material."""
    walls = (
        Wall(a=(-400 * LAM, 100 * LAM), b=(400 * LAM, 100 * LAM), material="wall"),
        Wall(a=(-400 * LAM, lower_y * LAM), b=(400 * LAM, lower_y * LAM), material="wall"),
    )
    return Scene(walls=walls, materials={"wall": MaterialParams(eps=eps, sigma=sigma)})


def make_radio(bandwidth, delta_f=30.0e3, f_c=F_C, rx=None, tx=None):
    """SISO radio centered at f_c with S = floor(bandwidth / delta_f) subcarriers."""
    s_count = max(1, int(np.floor(bandwidth / delta_f)))
    f_min = f_c - (s_count - 1) * delta_f / 2.0
    siso = ArrayGeometry(offsets=((0.0, 0.0),))
    return RadioConfig(
        f_min=f_min,
        delta_f=delta_f,
        s_count=s_count,
        rx_array=rx or siso,
        tx_array=tx or siso,
    )


@pytest.fixture
def toy_truth():
    return make_toy_scene()


@pytest.fixture
def toy_dt():
    return make_toy_scene(lower_y=-180.4)


@pytest.fixture
def toy_pair():
    return DevicePair(rx=(240 * LAM, 0.0), tx=(-240 * LAM, 0.0))
