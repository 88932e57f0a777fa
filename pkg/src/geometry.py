"""
Depth-grid geometry: pinhole projection, normals, rigid view transforms,
the transformation-map warp and horizontal map flipping.

Conventions: x points right, y points down, z points away from the camera.
Grids are batched: depth (B, H, W), points (B, H, W, 3), views (B, 6).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import ContractViolation, Tensor

logger = logging.getLogger(__name__)

ROTATION_RANGE = 60.0
TRANSLATION_RANGE = 0.1
DEPTH_RANGE = (0.9, 1.1)
VIEW_SCALE = np.array([ROTATION_RANGE] * 3 + [TRANSLATION_RANGE] * 3)


@dataclass(frozen=True)
class Camera:
    """Perspective camera, principal point at the image center."""
    height: int
    width: int
    fov: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.fov < 90.0:
            raise ContractViolation(f"Camera fov must be in (0, 90) degrees, got {self.fov}")
        if self.height < 2 or self.width < 2:
            raise ContractViolation(f"Camera grid must be at least 2x2, got {self.height}x{self.width}")

    @property
    def tan_half_fov(self) -> float:
        return float(np.tan(np.deg2rad(self.fov) / 2.0))

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized device coordinates (u over columns, v over rows), each (H, W)."""
        u = np.linspace(-1.0, 1.0, self.width)
        v = np.linspace(-1.0, 1.0, self.height)
        uu, vv = np.meshgrid(u, v)
        return uu, vv


@dataclass
class Viewpoint:
    """Batch of viewpoints: columns rx, ry, rz (degrees: pitch, yaw, roll), tx, ty, tz."""
    values: Tensor

    @classmethod
    def neutral(cls, batch: int) -> "Viewpoint":
        return cls(dc.constant(np.zeros((batch, 6))))

    @classmethod
    def from_angles(cls, yaw: np.ndarray, pitch: Optional[np.ndarray] = None,
                    roll: Optional[np.ndarray] = None) -> "Viewpoint":
        yaw = np.atleast_1d(np.asarray(yaw, dtype=dc.get_default_dtype()))
        values = np.zeros((yaw.shape[0], 6), dtype=yaw.dtype)
        values[:, 1] = yaw
        if pitch is not None:
            values[:, 0] = pitch
        if roll is not None:
            values[:, 2] = roll
        return cls(dc.constant(values))

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def yaw(self) -> np.ndarray:
        return self.values.data[:, 1]

    @property
    def pitch(self) -> np.ndarray:
        return self.values.data[:, 0]

    @property
    def roll(self) -> np.ndarray:
        return self.values.data[:, 2]

    def detach(self) -> "Viewpoint":
        return Viewpoint(self.values.detach())

    def validate(self) -> None:
        limits = VIEW_SCALE * (1.0 + 1e-12)
        if not np.all(np.abs(self.values.data) <= limits):
            raise ContractViolation(f"Viewpoint outside [-60, 60] deg / [-0.1, 0.1]: {self.values.data}")


def border_width(height: int) -> int:
    """Width of the transformation-map border band: 2 pixels at 32x32, scaled proportionally."""
    return max(1, int(round(2.0 * height / 32.0)))


def border_mask(height: int, width: int, band: Optional[int] = None) -> np.ndarray:
    """1 inside, exactly 0 on a band of `band` pixels along every edge."""
    band = border_width(height) if band is None else band
    mask = np.zeros((height, width), dtype=dc.get_default_dtype())
    mask[band:height - band, band:width - band] = 1.0
    return mask


def depth_to_points(depth: Tensor, camera: Camera) -> Tensor:
    if depth.shape[-2:] != (camera.height, camera.width):
        raise ContractViolation(f"depth grid {depth.shape} does not match camera {camera.height}x{camera.width}")
    uu, vv = camera.pixel_grid()
    t = camera.tan_half_fov
    x = depth * dc.constant(uu * t, dtype=depth.dtype)
    y = depth * dc.constant(vv * t, dtype=depth.dtype)
    return dc.stack([x, y, depth], axis=-1)


def _axis_slice(ndim: int, axis: int, start: int, stop: int) -> tuple:
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _grid_difference(points: Tensor, axis: int) -> Tensor:
    """Central differences along a grid axis, one-sided at the two ends."""
    n = points.shape[axis]
    nd = points.ndim
    first = points[_axis_slice(nd, axis, 1, 2)] - points[_axis_slice(nd, axis, 0, 1)]
    last = points[_axis_slice(nd, axis, n - 1, n)] - points[_axis_slice(nd, axis, n - 2, n - 1)]
    if n == 2:
        return dc.concat([first, last], axis=axis)
    middle = (points[_axis_slice(nd, axis, 2, n)] - points[_axis_slice(nd, axis, 0, n - 2)]) * 0.5
    return dc.concat([first, middle, last], axis=axis)


def cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return dc.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def compute_normals(points: Tensor) -> Tensor:
    """Unit normals facing the camera (n_z <= 0); (0, 0, -1) where a cell is degenerate."""
    if points.ndim != 4 or points.shape[1] < 2 or points.shape[2] < 2:
        raise ContractViolation(f"compute_normals needs a (B, H>=2, W>=2, 3) grid, got {points.shape}")
    t_u = _grid_difference(points, axis=2)
    t_v = _grid_difference(points, axis=1)
    n = cross(t_v, t_u)
    sq = (n * n).sum(axis=-1, keepdims=True)
    # orientation and fallback masks are piecewise constant
    facing = np.where(n.data[..., 2:3] > 0, -1.0, 1.0).astype(n.dtype)
    degenerate = (sq.data < 1e-24).astype(n.dtype)
    unit = n * dc.constant(facing, dtype=n.dtype) / (sq + 1e-30).sqrt()
    fallback = np.zeros(n.shape, dtype=n.dtype)
    fallback[..., 2] = -1.0
    return unit * dc.constant(1.0 - degenerate, dtype=n.dtype) + dc.constant(fallback * degenerate, dtype=n.dtype)


def rotation_matrix(view: Tensor) -> Tensor:
    """R = Rz . Rx . Ry per batch row, from the degree angles in view[:, :3]."""
    rad = view[:, 0:3] * (np.pi / 180.0)
    c, s = rad.cos(), rad.sin()
    cx, cy, cz = c[:, 0], c[:, 1], c[:, 2]
    sx, sy, sz = s[:, 0], s[:, 1], s[:, 2]
    one = dc.constant(np.ones(view.shape[0]), dtype=view.dtype)
    zero = dc.constant(np.zeros(view.shape[0]), dtype=view.dtype)

    def matrix(rows):
        return dc.stack([dc.stack(row, axis=-1) for row in rows], axis=-2)

    rx = matrix([[one, zero, zero], [zero, cx, -sx], [zero, sx, cx]])
    ry = matrix([[cy, zero, sy], [zero, one, zero], [-sy, zero, cy]])
    rz = matrix([[cz, -sz, zero], [sz, cz, zero], [zero, zero, one]])
    return rz @ rx @ ry


def view_displacement(points: Tensor, view: Tensor) -> Tensor:
    """apply_view(points, view) - points, exactly zero for the neutral view."""
    b, h, w, _ = points.shape
    if view.shape != (b, 6):
        raise ContractViolation(f"view must be ({b}, 6), got {view.shape}")
    z = points[..., 2:3]
    centroid = (points * z).sum(axis=(1, 2)) / z.sum(axis=(1, 2))
    centered = (points - centroid.reshape(b, 1, 1, 3)).reshape(b, h * w, 3)
    rotated = centered @ rotation_matrix(view).transpose(0, 2, 1)
    moved = rotated - centered + view[:, 3:6].reshape(b, 1, 3)
    return moved.reshape(b, h, w, 3)


def apply_view(points: Tensor, view: Tensor) -> Tensor:
    """Rotate about the depth-weighted centroid of each grid (Rz . Rx . Ry), then translate."""
    return points + view_displacement(points, view)


def warp_positions(p_old: Tensor, p_tgt: Tensor, transform: Tensor) -> Tensor:
    """p_new = (1 - T) * p_old + T * p_tgt, per pixel."""
    if p_old.shape != p_tgt.shape or p_old.shape[:3] != transform.shape:
        raise ContractViolation(f"warp grids differ: {p_old.shape}, {p_tgt.shape}, T {transform.shape}")
    t = transform.reshape(transform.shape + (1,))
    return (1.0 - t) * p_old + t * p_tgt


def warp_displacement(p_old: Tensor, displacement: Tensor, transform: Tensor) -> Tensor:
    """Same blend as warp_positions with p_tgt = p_old + displacement.

    Written as p_old + T * displacement so that a zero displacement leaves
    p_old bit-exact for any T.
    """
    if p_old.shape != displacement.shape or p_old.shape[:3] != transform.shape:
        raise ContractViolation(f"warp grids differ: {p_old.shape}, {displacement.shape}, T {transform.shape}")
    return p_old + transform.reshape(transform.shape + (1,)) * displacement


def flip_maps(albedo: Tensor, depth: Tensor) -> Tuple[Tensor, Tensor]:
    """Mirror column j to W-1-j."""
    return albedo.flip(axis=2), depth.flip(axis=2)
