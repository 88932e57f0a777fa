"""
Soft mesh rasterization and the full renderer R(A, S, T, V, L).

Every (pixel, triangle) pair within the edge cutoff contributes a soft
coverage term and a depth-softmax weight; pixel colors are the normalized
blend of the triangles' bilinear texture lookups, composited over a
background color by the soft coverage.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import ContractViolation, Tensor
from geometry import Camera, compute_normals, depth_to_points, view_displacement, warp_displacement
from shading import relight

logger = logging.getLogger(__name__)

_LOG2 = float(np.log(2.0))
_MIN_AREA = 1e-12
_INSIDE_FLOOR = 1e-6


@dataclass(frozen=True)
class RasterSettings:
    sigma: Optional[float] = None  # NDC units, 1 / H when unset
    gamma: float = 1e-2
    znear: float = 0.5
    zfar: float = 1.5
    cutoff: float = 4.0  # candidate radius in multiples of sigma

    def sigma_for(self, height: int) -> float:
        return self.sigma if self.sigma is not None else 1.0 / height


@dataclass
class Mesh:
    vertices: Tensor  # (B, N, 3)
    faces: np.ndarray  # (F, 3)
    uv: np.ndarray  # (N, 2)

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]


@dataclass
class RenderOutput:
    image: Tensor  # (B, H, W, 3)
    coverage: Tensor  # (B, H, W)
    zbuffer: Tensor  # (B, H, W)
    weight_total: np.ndarray  # (B, H, W) sum of aggregation weights, 0 where nothing projects


@lru_cache(maxsize=16)
def grid_topology(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Two triangles per cell, (v00, v10, v01) and (v01, v10, v11); uv = (col, row) / (size - 1)."""
    idx = np.arange(height * width).reshape(height, width)
    v00, v01 = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    v10, v11 = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.stack([np.stack([v00, v10, v01], axis=1), np.stack([v01, v10, v11], axis=1)], axis=1).reshape(-1, 3)
    rows, cols = np.divmod(np.arange(height * width), width)
    uv = np.stack([cols / (width - 1), rows / (height - 1)], axis=1)
    faces.flags.writeable = False
    uv.flags.writeable = False
    return faces, uv


def build_mesh(points: Tensor) -> Mesh:
    if points.ndim != 4 or points.shape[1] < 2 or points.shape[2] < 2:
        raise ContractViolation(f"build_mesh needs a (B, H>=2, W>=2, 3) grid, got {points.shape}")
    b, h, w, _ = points.shape
    faces, uv = grid_topology(h, w)
    return Mesh(points.reshape(b, h * w, 3), faces, uv)


def _cross2(ux, uy, vx, vy):
    return ux * vy - uy * vx


def _barycentric(x0, y0, x1, y1, x2, y2, px, py):
    total = _cross2(x1 - x0, y1 - y0, x2 - x0, y2 - y0)
    b0 = _cross2(x1 - px, y1 - py, x2 - px, y2 - py) / total
    b1 = _cross2(x2 - px, y2 - py, x0 - px, y0 - py) / total
    b2 = _cross2(x0 - px, y0 - py, x1 - px, y1 - py) / total
    return b0, b1, b2


def _edge_distance_sq(ax, ay, bx, by, px, py, clip):
    ex, ey = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    t = clip((wx * ex + wy * ey) / (ex * ex + ey * ey + 1e-20))
    dx, dy = wx - t * ex, wy - t * ey
    return dx * dx + dy * dy


def _triangle_distance_sq(corners, px, py, clip, minimum):
    x0, y0, x1, y1, x2, y2 = corners
    d01 = _edge_distance_sq(x0, y0, x1, y1, px, py, clip)
    d12 = _edge_distance_sq(x1, y1, x2, y2, px, py, clip)
    d20 = _edge_distance_sq(x2, y2, x0, y0, px, py, clip)
    return minimum(minimum(d01, d12), d20)


def _candidate_pairs(screen: np.ndarray, faces: np.ndarray, faces_per_image: int, camera: Camera,
                     radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """(face, pixel) index pairs whose pixel center is inside the face or within `radius` of it."""
    h, w = camera.height, camera.width
    grid_u, grid_v = np.linspace(-1.0, 1.0, w), np.linspace(-1.0, 1.0, h)
    tri = screen[faces][..., :2]
    area = _cross2(tri[:, 1, 0] - tri[:, 0, 0], tri[:, 1, 1] - tri[:, 0, 1],
                   tri[:, 2, 0] - tri[:, 0, 0], tri[:, 2, 1] - tri[:, 0, 1])
    step_u, step_v = 2.0 / (w - 1), 2.0 / (h - 1)
    col_lo = np.clip(np.ceil((tri[..., 0].min(axis=1) - radius + 1.0) / step_u), 0, w)
    col_hi = np.clip(np.floor((tri[..., 0].max(axis=1) + radius + 1.0) / step_u), -1, w - 1)
    row_lo = np.clip(np.ceil((tri[..., 1].min(axis=1) - radius + 1.0) / step_v), 0, h)
    row_hi = np.clip(np.floor((tri[..., 1].max(axis=1) + radius + 1.0) / step_v), -1, h - 1)
    ncol = np.maximum(col_hi - col_lo + 1, 0).astype(np.int64)
    nrow = np.maximum(row_hi - row_lo + 1, 0).astype(np.int64)
    count = ncol * nrow * (np.abs(area) > _MIN_AREA)
    face = np.repeat(np.arange(faces.shape[0]), count)
    offset = np.arange(face.shape[0]) - np.repeat(np.cumsum(count) - count, count)
    row = row_lo.astype(np.int64)[face] + offset // np.maximum(ncol[face], 1)
    col = col_lo.astype(np.int64)[face] + offset % np.maximum(ncol[face], 1)
    px, py = grid_u[col], grid_v[row]

    corners = tuple(tri[face, k, a] for k in range(3) for a in range(2))
    with np.errstate(divide="ignore", invalid="ignore"):
        bary = _barycentric(*corners, px, py)
        inside = (bary[0] >= 0) & (bary[1] >= 0) & (bary[2] >= 0)
        d2 = _triangle_distance_sq(corners, px, py, lambda t: np.clip(t, 0.0, 1.0), np.minimum)
    keep = inside | (d2 <= radius * radius)
    image = face[keep] // faces_per_image
    pixel = image * (h * w) + row[keep] * w + col[keep]
    return face[keep], pixel


def rasterize(mesh: Mesh, texture: Tensor, camera: Camera, background: Tensor,
              settings: Optional[RasterSettings] = None) -> RenderOutput:
    """Soft-rasterize a batch of meshes sharing one topology.

    texture is (B, Ht, Wt, 3) and is sampled bilinearly at the interpolated uv,
    restricted to the texture cell each face belongs to.
    """
    settings = settings or RasterSettings()
    verts = mesh.vertices
    b, n, _ = verts.shape
    h, w = camera.height, camera.width
    th, tw = texture.shape[1:3]
    if texture.shape[0] != b or texture.shape[3] != 3:
        raise ContractViolation(f"texture {texture.shape} does not match a batch of {b} meshes")
    if not np.all(verts.data[..., 2] > 0):
        raise ContractViolation("rasterize needs every vertex in front of the camera (z > 0)")

    sigma = settings.sigma_for(h)
    tan = camera.tan_half_fov
    faces_per_image = mesh.num_faces
    z = verts[..., 2]
    screen = dc.stack([verts[..., 0] / (z * tan), verts[..., 1] / (z * tan), z], axis=-1).reshape(b * n, 3)
    global_faces = (mesh.faces[None, :, :] + (np.arange(b) * n)[:, None, None]).reshape(-1, 3)
    pair_face, pair_pixel = _candidate_pairs(screen.data, global_faces, faces_per_image, camera,
                                             settings.cutoff * sigma)
    num_pixels = b * h * w
    count = pair_face.shape[0]
    dtype = verts.dtype

    grid_u, grid_v = np.linspace(-1.0, 1.0, w), np.linspace(-1.0, 1.0, h)
    pix_local = pair_pixel % (h * w)
    px = dc.constant(grid_u[pix_local % w], dtype=dtype)
    py = dc.constant(grid_v[pix_local // w], dtype=dtype)

    tri = dc.take(screen, global_faces[pair_face])
    corners = tuple(tri[:, k, a] for k in range(3) for a in range(2))
    zs = [tri[:, k, 2] for k in range(3)]
    bary = _barycentric(*corners, px, py)
    inside = (bary[0].data >= 0) & (bary[1].data >= 0) & (bary[2].data >= 0)
    d2 = _triangle_distance_sq(corners, px, py, lambda t: t.clip(0.0, 1.0), dc.minimum)
    # squared distance in sigma units, zero for pixels inside the triangle
    x = d2 * dc.constant((~inside).astype(dtype) / (sigma * sigma), dtype=dtype)

    clipped = [dc.maximum(bk, 0.0) for bk in bary]
    norm = clipped[0] + clipped[1] + clipped[2]
    bn = [c / norm for c in clipped]
    z_pair = bn[0] * zs[0] + bn[1] * zs[1] + bn[2] * zs[2]

    zn = (settings.zfar - z_pair) * (1.0 / (settings.zfar - settings.znear))
    logit = (_LOG2 - x.softplus()) + zn * (1.0 / settings.gamma)
    peak = np.full(num_pixels, -np.inf, dtype=dtype)
    np.maximum.at(peak, pair_pixel, logit.data)
    e = (logit - dc.constant(peak[pair_pixel], dtype=dtype)).exp()
    total = dc.scatter_add(e, pair_pixel, num_pixels)
    weight = e / dc.take(total, pair_pixel)

    face_local = pair_face % faces_per_image
    uv = mesh.uv[mesh.faces[face_local]]
    u = bn[0] * dc.constant(uv[:, 0, 0], dtype=dtype) + bn[1] * dc.constant(uv[:, 1, 0], dtype=dtype) \
        + bn[2] * dc.constant(uv[:, 2, 0], dtype=dtype)
    v = bn[0] * dc.constant(uv[:, 0, 1], dtype=dtype) + bn[1] * dc.constant(uv[:, 1, 1], dtype=dtype) \
        + bn[2] * dc.constant(uv[:, 2, 1], dtype=dtype)
    centroid = mesh.uv[mesh.faces].mean(axis=1)
    cell_c = np.clip(np.floor(centroid[:, 0] * (tw - 1)), 0, tw - 2).astype(np.int64)[face_local]
    cell_r = np.clip(np.floor(centroid[:, 1] * (th - 1)), 0, th - 2).astype(np.int64)[face_local]
    fu = (u * float(tw - 1) - dc.constant(cell_c, dtype=dtype)).clip(0.0, 1.0)
    fv = (v * float(th - 1) - dc.constant(cell_r, dtype=dtype)).clip(0.0, 1.0)
    base = (pair_face // faces_per_image) * (th * tw) + cell_r * tw + cell_c
    corner_index = base[:, None] + np.array([0, 1, tw, tw + 1])[None, :]
    texels = dc.take(texture.reshape(b * th * tw, 3), corner_index)
    bilinear = dc.stack([(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv], axis=-1)
    color = (texels * bilinear.reshape(count, 4, 1)).sum(axis=1)

    foreground = dc.scatter_add(color * weight.reshape(count, 1), pair_pixel, num_pixels)
    log_miss = (dc.maximum(x, _INSIDE_FLOOR) * 0.5).tanh().log()
    coverage = 1.0 - dc.scatter_add(log_miss, pair_pixel, num_pixels).exp()
    alpha = coverage.reshape(num_pixels, 1)
    image = alpha * foreground + (1.0 - alpha) * background.reshape(1, 3)

    hit = np.zeros(num_pixels, dtype=bool)
    hit[pair_pixel] = True
    zbuffer = dc.scatter_add(weight * z_pair, pair_pixel, num_pixels) \
        + dc.constant(np.where(hit, 0.0, settings.zfar), dtype=dtype)
    weight_total = np.bincount(pair_pixel, weights=weight.data, minlength=num_pixels)
    return RenderOutput(
        image=image.reshape(b, h, w, 3),
        coverage=coverage.reshape(b, h, w),
        zbuffer=zbuffer.reshape(b, h, w),
        weight_total=weight_total.reshape(b, h, w),
    )


def _values(x) -> Tensor:
    return x.values if hasattr(x, "values") and isinstance(getattr(x, "values"), Tensor) else x


def render(albedo: Tensor, depth: Tensor, transform: Tensor, view, light, camera: Camera,
           background: Tensor, settings: Optional[RasterSettings] = None) -> RenderOutput:
    """R(A, S, T, V, L): project S, move it by V blended through T, relight A by L, rasterize.

    Lighting uses the canonical-frame normals of S.
    """
    view, light = _values(view), _values(light)
    shapes = {albedo.shape[:3], depth.shape, transform.shape}
    if len(shapes) != 1:
        raise ContractViolation(f"render maps differ: A {albedo.shape}, S {depth.shape}, T {transform.shape}")
    points = depth_to_points(depth, camera)
    moved = warp_displacement(points, view_displacement(points, view), transform)
    texture = relight(albedo, compute_normals(points), light)
    return rasterize(build_mesh(moved), texture, camera, background, settings)
