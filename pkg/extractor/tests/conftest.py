import numpy as np
import pytest
from PIL import Image


def synthetic_image(seed: int, size: int = 400, base: int = 0) -> Image.Image:
    """Structured random image; images sharing `base` look alike."""
    rng = np.random.default_rng([base, 77])
    coarse = rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)
    img = np.asarray(Image.fromarray(coarse).resize((size, size), Image.BILINEAR), dtype=np.int16)
    jitter = np.random.default_rng(seed).integers(-12, 13, img.shape, dtype=np.int16)
    return Image.fromarray(np.clip(img + jitter, 0, 255).astype(np.uint8))


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    for place in range(3):
        for view in range(2):
            synthetic_image(seed=place * 10 + view, base=place).save(
                root / f"place{place}_view{view}.png"
            )
    return root
