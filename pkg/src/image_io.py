"""
Image files: binary PPM (P6) always, PNG as well when Pillow is installed.
"""

import logging
import os
from typing import List, Optional, Sequence

import numpy as np

try:
    from PIL import Image
except ImportError:
    Image = None

logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) or (H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"Expected an (H, W, 3) or (H, W) image, got {image.shape}")
    return np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    pixels = to_uint8(image)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Inverse of encode_ppm for the header layout it writes; returns uint8 (H, W, 3)."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError("Not a binary PPM (P6) image")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"Unsupported PPM max value {parts[2]!r}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError(f"PPM payload has {pixels.size} bytes, expected {w * h * 3}")
    return pixels.reshape(h, w, 3)


def depth_to_image(depth: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Gray image of a depth map, near = bright, min-max stretched over the mask."""
    depth = np.asarray(depth, dtype=np.float64)
    region = depth[mask] if mask is not None and np.any(mask) else depth
    lo, hi = region.min(), region.max()
    scaled = (hi - depth) / (hi - lo) if hi > lo else np.full_like(depth, 0.5)
    return np.clip(scaled, 0.0, 1.0)


def normals_to_image(normals: np.ndarray) -> np.ndarray:
    return 0.5 * (np.asarray(normals, dtype=np.float64) + 1.0)


def strip(images: Sequence[np.ndarray], gap: int = 0) -> np.ndarray:
    """Concatenate equally sized images left to right."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    images = [np.repeat(im[..., None], 3, axis=2) if im.ndim == 2 else im for im in images]
    if gap:
        spacer = np.ones((images[0].shape[0], gap, 3))
        images = [part for im in images for part in (im, spacer)][:-1]
    return np.concatenate(images, axis=1)


def grid(rows: Sequence[Sequence[np.ndarray]], gap: int = 0) -> np.ndarray:
    lines = [strip(row, gap) for row in rows]
    if gap:
        spacer = np.ones((gap, lines[0].shape[1], 3))
        lines = [part for line in lines for part in (line, spacer)][:-1]
    return np.concatenate(lines, axis=0)


def save_image(path_stem: str, image: np.ndarray) -> List[str]:
    """Write `<stem>.ppm` and, with Pillow available, `<stem>.png`."""
    directory = os.path.dirname(path_stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    written = []
    with open(f"{path_stem}.ppm", "wb") as f:
        f.write(encode_ppm(image))
    written.append(f"{path_stem}.ppm")
    if Image is not None:
        Image.fromarray(to_uint8(image)).save(f"{path_stem}.png")
        written.append(f"{path_stem}.png")
    logger.info(f"[RENDER] Saved {', '.join(os.path.basename(p) for p in written)}")
    return written
