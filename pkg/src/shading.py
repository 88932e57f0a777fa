"""Lambertian lighting: shading maps, delighting and relighting."""

import logging
from dataclasses import dataclass

import numpy as np

import diffcore as dc
from diffcore import ContractViolation, Tensor

logger = logging.getLogger(__name__)

SHADING_FLOOR = 1e-4


@dataclass
class Light:
    """Batch of lights: columns lx, ly (direction), ka (ambient), kd (diffuse)."""
    values: Tensor

    @classmethod
    def neutral(cls, batch: int) -> "Light":
        """L0: ka = 1, kd = 0, so shading is identically one."""
        values = np.zeros((batch, 4))
        values[:, 2] = 1.0
        return cls(dc.constant(values))

    @classmethod
    def from_direction(cls, lx: float, ly: float, ka: float, kd: float, batch: int = 1) -> "Light":
        return cls(dc.constant(np.tile([lx, ly, ka, kd], (batch, 1))))

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    def detach(self) -> "Light":
        return Light(self.values.detach())

    def validate(self) -> None:
        v = self.values.data
        if not (np.all(np.abs(v[:, :2]) <= 1.0) and np.all((v[:, 2:] > 0.0) & (v[:, 2:] < 1.0))):
            raise ContractViolation(f"Light outside lx, ly in [-1, 1] / ka, kd in (0, 1): {v}")


def light_direction(light: Tensor) -> Tensor:
    """normalize(lx, ly, 1), pointing from the light toward the surface. (B, 3)"""
    ones = dc.constant(np.ones((light.shape[0], 1)), dtype=light.dtype)
    d = dc.concat([light[:, 0:2], ones], axis=1)
    return d / (d * d).sum(axis=1, keepdims=True).sqrt()


def compute_shading(normals: Tensor, light: Tensor) -> Tensor:
    """ka + kd * max(0, -n . l) for camera-facing normals (B, H, W, 3); returns (B, H, W)."""
    if normals.shape[0] != light.shape[0] or light.shape[1:] != (4,):
        raise ContractViolation(f"normals {normals.shape} and light {light.shape} do not conform")
    b = light.shape[0]
    direction = light_direction(light).reshape(b, 1, 1, 3)
    cosine = (-(normals * direction).sum(axis=-1)).relu()
    ka = light[:, 2].reshape(b, 1, 1)
    kd = light[:, 3].reshape(b, 1, 1)
    return ka + kd * cosine


def delight(texture: Tensor, normals: Tensor, light: Tensor, floor: float = SHADING_FLOOR) -> Tensor:
    """Albedo = texture / max(shading, floor)."""
    shading = dc.maximum(compute_shading(normals, light), floor)
    return texture / shading.reshape(shading.shape + (1,))


def relight(albedo: Tensor, normals: Tensor, light: Tensor) -> Tensor:
    shading = compute_shading(normals, light)
    return albedo * shading.reshape(shading.shape + (1,))
