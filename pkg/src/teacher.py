"""
Procedural stand-in for the frozen 2D generator.

A style code w decodes into a shaded, textured head: w[0] drives yaw
(20 degrees per unit), w[1] pitch (10 degrees per unit), w[2] the light's
x direction (0.4 per unit); the remaining coordinates pass through a fixed
seeded matrix into appearance parameters (skin color, head radii, eye and
mouth placement, nose height). The scene is drawn by the shared soft
rasterizer, so generate(w) is smooth and differentiable in w.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import ContractViolation, Tensor
from geometry import Camera, border_mask
from losses import LatentPrior
from rasterizer import RasterSettings, render

logger = logging.getLogger(__name__)

YAW_PER_UNIT = 20.0
PITCH_PER_UNIT = 10.0
LIGHT_X_PER_UNIT = 0.4
FIXED_LIGHT = (0.0, 0.5, 0.5)  # ly, ka, kd
BACKGROUND = (0.35, 0.4, 0.45)
MOUTH_COLOR = (0.6, 0.15, 0.15)
SKIN_COLOR = (0.75, 0.55, 0.45)
NUM_APPEARANCE = 11


def _as_rows(x) -> np.ndarray:
    """Viewpoint / Light / Tensor / array -> (B, k) array."""
    if hasattr(x, "values") and isinstance(x.values, Tensor):
        x = x.values
    if isinstance(x, Tensor):
        x = x.data
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


@dataclass
class TeacherScene:
    """Ground truth of a generated batch. Only evaluation code receives this."""
    depth: np.ndarray  # (B, H, W)
    albedo: np.ndarray  # (B, H, W, 3)
    transform: np.ndarray  # (B, H, W)
    yaw: np.ndarray
    pitch: np.ndarray
    roll: np.ndarray
    light: np.ndarray  # (B, 4)
    coverage: np.ndarray  # (B, H, W)


class ProceduralTeacher:
    """Frozen generator: deterministic, smooth in w, with a latent edit for every pose and light-x."""

    def __init__(self, latent_dim: int = 64, image_size: int = 32, seed: int = 0, fov: float = 10.0,
                 settings: Optional[RasterSettings] = None, prior_samples: int = 10000):
        if latent_dim < 4:
            raise ContractViolation(f"teacher latent_dim must be >= 4, got {latent_dim}")
        self.latent_dim = latent_dim
        self.camera = Camera(image_size, image_size, fov)
        self.settings = settings or RasterSettings()
        rng = np.random.default_rng([seed, 0x7E])
        self.appearance = rng.standard_normal((latent_dim - 3, NUM_APPEARANCE)) / np.sqrt(latent_dim - 3)
        self.appearance.flags.writeable = False
        self.mask = border_mask(image_size, image_size)
        self.mask.flags.writeable = False

        draws = self.sample_latent(np.random.default_rng([seed, 0x9A]), prior_samples)
        self.mu_w = draws.mean(axis=0)
        self.sigma_per_dim = draws.std(axis=0)
        self.sigma_w = float(self.sigma_per_dim.mean())
        logger.info(f"[TEACHER] d_w={latent_dim} size={image_size} prior from {prior_samples} draws: "
                    f"|mu|max={np.abs(self.mu_w).max():.4f} sigma={self.sigma_w:.4f}")

    def sample_latent(self, rng: np.random.Generator, batch: Optional[int] = None) -> np.ndarray:
        if batch is None:
            return rng.standard_normal(self.latent_dim)
        return rng.standard_normal((batch, self.latent_dim))

    def prior(self, per_dim: bool = False) -> LatentPrior:
        sigma = self.sigma_per_dim.copy() if per_dim else np.asarray(self.sigma_w)
        return LatentPrior(mu=self.mu_w.copy(), sigma=sigma)

    def _scene(self, w: Tensor):
        b = w.shape[0]
        dtype = w.dtype
        a = (w[:, 3:] @ dc.constant(self.appearance, dtype=dtype)).tanh()

        def param(index: int, base: float, spread: float) -> Tensor:
            return (base + spread * a[:, index]).reshape(b, 1, 1)

        uu, vv = self.camera.pixel_grid()
        u = dc.constant(uu[None], dtype=dtype)
        v = dc.constant(vv[None], dtype=dtype)

        rx, ry = param(3, 0.55, 0.08), param(4, 0.72, 0.08)
        r2 = (u / rx) * (u / rx) + (v / ry) * (v / ry)
        head = (-(r2 * r2)).exp()
        nose_shape = np.exp(-((uu / 0.1) ** 2 + ((vv - 0.05) / 0.15) ** 2))[None]
        nose = param(10, 1.0, 0.5) * dc.constant(nose_shape, dtype=dtype)
        depth = 1.06 - 0.1 * head - 0.03 * nose * head

        mask = ((1.0 - r2) * 8.0).sigmoid()
        spacing, eye_y, eye_size = param(5, 0.28, 0.05), param(6, -0.18, 0.05), param(7, 0.09, 0.02)
        eye_r2 = eye_size * eye_size
        dv_eye = (v - eye_y) * (v - eye_y)
        eyes = (-((u - spacing) * (u - spacing) + dv_eye) / eye_r2).exp() \
            + (-((u + spacing) * (u + spacing) + dv_eye) / eye_r2).exp()
        mouth_y, mouth_w = param(8, 0.38, 0.05), param(9, 0.2, 0.05)
        mu2 = (u / mouth_w) * (u / mouth_w)
        mouth = (-(mu2 * mu2) - ((v - mouth_y) * (1.0 / 0.05)) * ((v - mouth_y) * (1.0 / 0.05))).exp()

        channels = []
        for c in range(3):
            skin = (SKIN_COLOR[c] + 0.15 * a[:, c]).reshape(b, 1, 1)
            face = skin * (1.0 - 0.85 * eyes) * (1.0 - mouth) + MOUTH_COLOR[c] * mouth
            channels.append(face * mask + BACKGROUND[c] * (1.0 - mask))
        albedo = dc.stack(channels, axis=-1)
        transform = mask * dc.constant(self.mask, dtype=dtype)

        zero = dc.constant(np.zeros(b), dtype=dtype)
        view = dc.stack([PITCH_PER_UNIT * w[:, 1], YAW_PER_UNIT * w[:, 0], zero, zero, zero, zero], axis=1)
        ly, ka, kd = (dc.constant(np.full(b, x), dtype=dtype) for x in FIXED_LIGHT)
        light = dc.stack([LIGHT_X_PER_UNIT * w[:, 2], ly, ka, kd], axis=1)
        return albedo, depth, transform, view, light

    def _render(self, w: Tensor):
        if w.ndim != 2 or w.shape[1] != self.latent_dim:
            raise ContractViolation(f"teacher expects (B, {self.latent_dim}) style codes, got {w.shape}")
        albedo, depth, transform, view, light = self._scene(w)
        background = dc.constant(np.array(BACKGROUND), dtype=w.dtype)
        out = render(albedo, depth, transform, view, light, self.camera, background, self.settings)
        return out, (albedo, depth, transform, view, light)

    def generate(self, w) -> Tensor:
        """Image batch (B, H, W, 3) for style codes w (B, d_w); differentiable when w is a tracked Tensor."""
        if not isinstance(w, Tensor):
            w = dc.constant(np.atleast_2d(w))
        return self._render(w)[0].image

    def generate_with_scene(self, w: np.ndarray) -> Tuple[np.ndarray, TeacherScene]:
        """Evaluation-only: image plus exact scene ground truth."""
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        out, (albedo, depth, transform, view, light) = self._render(dc.constant(w))
        scene = TeacherScene(
            depth=depth.data.copy(), albedo=albedo.data.copy(), transform=transform.data.copy(),
            yaw=view.data[:, 1].copy(), pitch=view.data[:, 0].copy(), roll=view.data[:, 2].copy(),
            light=light.data.copy(), coverage=out.coverage.data.copy(),
        )
        return out.image.data, scene

    def oracle_manipulate(self, w: np.ndarray, view: np.ndarray, light: np.ndarray) -> np.ndarray:
        """Overwrite the pose and light-x coordinates so that generate() shows (yaw, pitch, lx).

        Roll, translation and the remaining light terms are fixed in the teacher's scene family.
        """
        w = np.array(np.atleast_2d(w), dtype=np.float64)
        view, light = _as_rows(view), _as_rows(light)
        w[:, 0] = view[:, 1] / YAW_PER_UNIT
        w[:, 1] = view[:, 0] / PITCH_PER_UNIT
        w[:, 2] = light[:, 0] / LIGHT_X_PER_UNIT
        return w

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for array in (self.appearance, self.mask, self.mu_w, self.sigma_per_dim):
            h.update(np.ascontiguousarray(array).tobytes())
        h.update(repr((YAW_PER_UNIT, PITCH_PER_UNIT, LIGHT_X_PER_UNIT, FIXED_LIGHT, BACKGROUND)).encode("utf-8"))
        return h.hexdigest()
