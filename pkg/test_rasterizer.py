import numpy as np
import pytest

import diffcore as dc
from diffcore import ContractViolation
from geometry import Camera, Viewpoint
from rasterizer import Mesh, RasterSettings, build_mesh, grid_topology, rasterize, render
from shading import Light

RED = [1.0, 0.0, 0.0]
BLUE = [0.0, 0.0, 1.0]


def smooth_albedo(size):
    uu, vv = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size))
    base = 0.5 + 0.1 * np.sin(uu) * np.cos(vv)
    return np.stack([base, 0.8 - 0.3 * base, 0.3 + 0.1 * vv], axis=-1)[None]


def neutral_render(albedo, depth, transform=None, view=None, background=(0.1, 0.2, 0.3), size=8):
    camera = Camera(size, size, 10.0)
    transform = np.ones((1, size, size)) if transform is None else transform
    view = Viewpoint.neutral(1) if view is None else view
    return render(dc.constant(albedo), dc.constant(depth), dc.constant(transform), view,
                  Light.neutral(1), camera, dc.constant(background))


def two_layer_mesh(z_red, z_blue, camera):
    """Two screen-filling triangles at different depths; the first samples red, the second blue."""
    tan = camera.tan_half_fov
    ndc = np.array([[-3.0, -3.0], [3.0, -3.0], [0.0, 3.0]])
    verts = []
    for z in (z_red, z_blue):
        verts += [[x * z * tan, y * z * tan, z] for x, y in ndc]
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    uv = np.array([[0.0, 0.0]] * 3 + [[1.0, 1.0]] * 3)
    texture = np.zeros((1, 2, 2, 3))
    texture[0, 0, 0] = RED
    texture[0, 1, 1] = BLUE
    return Mesh(dc.constant(np.array(verts)[None]), faces, uv), dc.constant(texture)


class TestTopology:
    def test_face_count_and_uv_range(self):
        faces, uv = grid_topology(4, 5)
        assert faces.shape == (2 * 3 * 4, 3)
        assert uv.min() == 0.0 and uv.max() == 1.0
        assert faces.max() == 4 * 5 - 1

    def test_build_mesh_rejects_tiny_grid(self):
        with pytest.raises(ContractViolation):
            build_mesh(dc.constant(np.ones((1, 1, 3, 3))))


class TestRasterize:
    def test_geometry_behind_camera(self):
        depth = np.ones((1, 6, 6))
        depth[0, 2, 2] = 0.0
        with pytest.raises(ContractViolation, match="z > 0"):
            neutral_render(smooth_albedo(6), depth, size=6)

    def test_texture_batch_mismatch(self):
        camera = Camera(5, 5)
        mesh, texture = two_layer_mesh(1.0, 1.2, camera)
        with pytest.raises(ContractViolation):
            rasterize(mesh, dc.constant(np.zeros((2, 2, 2, 3))), camera, dc.constant([0.0, 0.0, 0.0]))

    def test_neutral_render_reproduces_albedo(self):
        albedo = smooth_albedo(8)
        out = neutral_render(albedo, np.ones((1, 8, 8)))
        covered = out.coverage.data[0] >= 0.999
        assert covered[1:-1, 1:-1].all()
        err = np.abs(out.image.data[0] - albedo[0])[1:-1, 1:-1]
        assert err.mean() <= 1e-3
        np.testing.assert_allclose(out.zbuffer.data[0][covered], 1.0, atol=1e-9)

    def test_uncovered_pixels_show_background(self):
        view = np.zeros((1, 6))
        view[0, 3] = 0.1  # pushes the grid more than half a frame to the right
        out = neutral_render(smooth_albedo(8), np.ones((1, 8, 8)), view=dc.constant(view))
        empty = out.weight_total[0] == 0
        assert empty[:, 0].all()
        assert np.all(out.coverage.data[0][empty] == 0.0)
        np.testing.assert_array_equal(out.image.data[0][empty], np.broadcast_to([0.1, 0.2, 0.3], (empty.sum(), 3)))
        assert np.all(out.zbuffer.data[0][empty] == RasterSettings().zfar)

    @pytest.mark.parametrize("z_red, z_blue, expected", [(1.0, 1.2, RED), (1.2, 1.0, BLUE)])
    def test_nearer_surface_wins(self, z_red, z_blue, expected):
        camera = Camera(5, 5, 10.0)
        mesh, texture = two_layer_mesh(z_red, z_blue, camera)
        out = rasterize(mesh, texture, camera, dc.constant([0.5, 0.5, 0.5]))
        np.testing.assert_allclose(out.image.data[0, 2, 2], expected, atol=1e-6)
        assert out.zbuffer.data[0, 2, 2] == pytest.approx(1.0, abs=1e-6)

    def test_weights_sum_to_one_where_covered(self):
        out = neutral_render(smooth_albedo(8), np.ones((1, 8, 8)))
        hit = out.weight_total[0] > 0
        np.testing.assert_allclose(out.weight_total[0][hit], 1.0, atol=1e-12)

    def test_rotation_moves_the_image(self):
        albedo = smooth_albedo(8)
        depth = np.ones((1, 8, 8))
        base = neutral_render(albedo, depth).image.data
        turned = neutral_render(albedo, depth, view=Viewpoint.from_angles([20.0])).image.data
        assert np.abs(turned - base).max() > 1e-2

    def test_zero_transform_freezes_the_scene(self):
        albedo = smooth_albedo(8)
        depth = np.ones((1, 8, 8))
        frozen = np.zeros((1, 8, 8))
        base = neutral_render(albedo, depth, transform=frozen).image.data
        turned = neutral_render(albedo, depth, transform=frozen, view=Viewpoint.from_angles([30.0])).image.data
        np.testing.assert_array_equal(turned, base)

    def test_gradients_reach_every_input(self):
        camera = Camera(6, 6, 10.0)
        inputs = [dc.Tensor(x, requires_grad=True) for x in (
            smooth_albedo(6), np.full((1, 6, 6), 1.0), np.full((1, 6, 6), 0.8),
            np.array([[3.0, 5.0, 1.0, 0.01, 0.0, 0.0]]), np.array([[0.2, -0.1, 0.5, 0.4]]), np.array([0.2, 0.2, 0.2]))]
        with dc.Tape() as tape:
            out = render(*inputs[:5], camera, inputs[5])
            grads = tape.backward(out.image.sum())
        for t in inputs:
            assert np.abs(grads[t]).sum() > 0
