import json

import numpy as np
from PIL import Image

from shapefuse.tensor_io import MultispectralPair, write_tensor


def random_pair(rng: np.random.Generator, height: int, width: int) -> MultispectralPair:
    return MultispectralPair(
        rgb=rng.random((3, height, width), dtype=np.float32),
        thermal=rng.random((height, width), dtype=np.float32),
    )


def write_image_pair(directory, stem: str, height: int, width: int, rng: np.random.Generator):
    """Write a random 8-bit RGB/thermal PNG pair; returns their paths."""
    rgb = (rng.random((height, width, 3)) * 255).astype(np.uint8)
    thermal = (rng.random((height, width)) * 255).astype(np.uint8)
    rgb_path = directory / f"{stem}_rgb.png"
    thermal_path = directory / f"{stem}_thermal.png"
    Image.fromarray(rgb, "RGB").save(rgb_path)
    Image.fromarray(thermal, "L").save(thermal_path)
    return rgb_path, thermal_path


def write_batch_dir(root, stems, height, width, rng: np.random.Generator):
    """Lay out root/rgb/<stem>.png + root/thermal/<stem>.png."""
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "thermal").mkdir(parents=True, exist_ok=True)
    for stem in stems:
        rgb = (rng.random((height, width, 3)) * 255).astype(np.uint8)
        thermal = (rng.random((height, width)) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "rgb" / f"{stem}.png")
        Image.fromarray(thermal, "L").save(root / "thermal" / f"{stem}.png")
    return root


def write_kd_manifest(directory, x_s, x_t, w_t, name="manifest.json"):
    """Write one-level KD fixtures plus the manifest pointing at them."""
    write_tensor(x_s, directory / "x_s.zten")
    write_tensor(x_t, directory / "x_t.zten")
    write_tensor(w_t, directory / "w_t.zten")
    manifest = directory / name
    manifest.write_text(
        json.dumps({"levels": [{"x_s": "x_s.zten", "x_t": "x_t.zten", "w_t": "w_t.zten"}]})
    )
    return manifest
