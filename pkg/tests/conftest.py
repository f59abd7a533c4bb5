# tests/conftest.py
import numpy as np
import pytest

from markerforge.dvl_standin import procedural_texture
from markerforge.imaging import Image, save_png


def make_texture(seed: int, width: int, height: int, channels: int = 3) -> Image:
    """8位量化的程序纹理，与写盘后读回的图像一致"""
    rng = np.random.default_rng(seed)
    return Image.from_uint8(procedural_texture(rng, width, height, channels).to_uint8())


@pytest.fixture
def texture():
    return make_texture


@pytest.fixture
def image_dirs(tmp_path):
    """三张标记图和三张背景图"""
    markers = tmp_path / 'markers'
    backgrounds = tmp_path / 'backgrounds'
    markers.mkdir()
    backgrounds.mkdir()
    for i in range(3):
        save_png(str(markers / f'marker_{i}.png'), make_texture(i, 48, 36))
        save_png(str(backgrounds / f'background_{i}.png'), make_texture(100 + i, 160, 120))
    return str(markers), str(backgrounds)
