import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_image(width: int, height: int, seed: int = 0) -> Image.Image:
    """Deterministic RGB test image with enough texture to hash distinctly."""
    r = np.random.default_rng(seed)
    arr = r.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return Image.fromarray(arr, "RGB")


def save_png(img: Image.Image, path) -> str:
    img.save(path, "PNG")
    return str(path)
