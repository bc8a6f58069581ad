from PIL import Image
import os
import hashlib
from typing import Sequence, Tuple

import numpy as np

from ctphys import hu_denormalize
from errors import InvalidArgument


class ImageProcessor:
    @staticmethod
    def window(image: np.ndarray, window: Tuple[float, float] = (-300.0, 300.0)) -> np.ndarray:
        """Map a normalized image to uint8 grey levels inside an HU display window"""
        low, high = window
        if high <= low:
            raise InvalidArgument(f"display window [{low}, {high}] is empty")
        hu = hu_denormalize(np.asarray(image, dtype=np.float64))
        scaled = (np.clip(hu, low, high) - low) / (high - low)
        return np.round(scaled * 255).astype(np.uint8)

    @staticmethod
    def save_preview(path: str, images: Sequence[np.ndarray], window: Tuple[float, float] = (-300.0, 300.0),
                     gap: int = 2) -> None:
        """Side-by-side strip (e.g. input | output | ground truth) written as PNG"""
        tiles = [ImageProcessor.window(np.squeeze(im), window) for im in images]
        if not tiles:
            raise InvalidArgument("preview needs at least one image")
        h = max(t.shape[0] for t in tiles)
        strip = Image.new("L", (sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1), h), color=0)
        x = 0
        for tile in tiles:
            strip.paste(Image.fromarray(tile, mode="L"), (x, 0))
            x += tile.shape[1] + gap
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        strip.save(path, format="PNG")

    @staticmethod
    def calculate_file_hash(path: str) -> str:
        """Hash for checking that runs share one checkpoint"""
        digest = hashlib.md5()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()
