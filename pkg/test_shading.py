import numpy as np
import pytest

import diffcore as dc
from diffcore import ContractViolation
from geometry import Camera, compute_normals, depth_to_points
from shading import Light, compute_shading, delight, light_direction, relight


def flat_normals(h=4, w=4, batch=1):
    n = np.zeros((batch, h, w, 3))
    n[..., 2] = -1.0
    return dc.constant(n)


def curved_normals(rng, batch=2, size=6):
    depth = dc.constant(rng.uniform(0.95, 1.05, (batch, size, size)))
    return compute_normals(depth_to_points(depth, Camera(size, size, 10.0)))


class TestShading:
    def test_ambient_only(self, rng):
        light = Light.from_direction(0.4, -0.3, 0.35, 0.0, batch=2)
        shading = compute_shading(curved_normals(rng), light.values).data
        np.testing.assert_allclose(shading, 0.35)

    def test_normal_facing_the_light(self):
        light = Light.from_direction(0.3, -0.5, 0.2, 0.8)
        direction = light_direction(light.values).data[0]
        normals = dc.constant(np.broadcast_to(-direction, (1, 2, 2, 3)).copy())
        np.testing.assert_allclose(compute_shading(normals, light.values).data, 1.0, atol=1e-15)

    def test_normal_orthogonal_to_light(self):
        light = Light.from_direction(1.0, 0.0, 0.3, 0.6)
        direction = light_direction(light.values).data[0]
        orth = np.cross(direction, [0.0, 1.0, 0.0])
        orth /= np.linalg.norm(orth)
        normals = dc.constant(np.broadcast_to(orth, (1, 2, 2, 3)).copy())
        np.testing.assert_allclose(compute_shading(normals, light.values).data, 0.3, atol=1e-15)

    def test_bounded_by_ambient_and_diffuse(self, rng):
        light = Light.from_direction(-0.6, 0.7, 0.25, 0.6, batch=2)
        shading = compute_shading(curved_normals(rng), light.values).data
        assert shading.min() >= 0.25 and shading.max() <= 0.85 + 1e-12

    def test_batch_mismatch(self):
        with pytest.raises(ContractViolation):
            compute_shading(flat_normals(batch=2), Light.neutral(3).values)

    def test_light_validation(self):
        Light.from_direction(1.0, -1.0, 0.5, 0.5).validate()
        with pytest.raises(ContractViolation):
            Light.from_direction(0.0, 0.0, 1.0, 0.5).validate()


class TestDelightRelight:
    def test_neutral_light_is_identity(self, rng):
        tex = dc.constant(rng.uniform(0, 1, (2, 6, 6, 3)))
        albedo = delight(tex, curved_normals(rng), Light.neutral(2).values).data
        np.testing.assert_array_equal(albedo, tex.data)

    def test_round_trip(self, rng):
        normals = curved_normals(rng)
        light = Light.from_direction(0.3, 0.2, 0.3, 0.6, batch=2).values
        tex = dc.constant(rng.uniform(0, 1, (2, 6, 6, 3)))
        back = relight(delight(tex, normals, light), normals, light).data
        np.testing.assert_allclose(back, tex.data, atol=1e-6)
        albedo = dc.constant(rng.uniform(0, 1, (2, 6, 6, 3)))
        again = delight(relight(albedo, normals, light), normals, light).data
        np.testing.assert_allclose(again, albedo.data, atol=1e-6)

    def test_black_texture_gives_black_albedo(self, rng):
        tex = dc.constant(np.zeros((1, 4, 4, 3)))
        light = Light.from_direction(0.1, 0.1, 0.5, 0.5).values
        assert np.all(delight(tex, flat_normals(), light).data == 0.0)

    def test_floor_prevents_blowup(self):
        tex = dc.constant(np.full((1, 4, 4, 3), 0.5))
        dark = dc.constant([[0.0, 0.0, 0.0, 0.0]])
        assert np.all(np.isfinite(delight(tex, flat_normals(), dark).data))

    def test_relight_is_linear_in_diffuse(self):
        normals = flat_normals()
        albedo = dc.constant(np.full((1, 4, 4, 3), 0.4))
        one = relight(albedo, normals, Light.from_direction(0.0, 0.0, 0.0, 0.3).values).data
        two = relight(albedo, normals, Light.from_direction(0.0, 0.0, 0.0, 0.6).values).data
        np.testing.assert_allclose(two, 2 * one, rtol=1e-14)

    def test_relight_gradient_wrt_light(self, rng):
        normals = curved_normals(rng, batch=1)
        albedo = dc.constant(rng.uniform(0.2, 1.0, (1, 6, 6, 3)))
        weights = dc.constant(rng.standard_normal((1, 6, 6, 3)))
        light = np.array([[0.3, -0.2, 0.4, 0.5]])

        def loss(l):
            return (relight(albedo, normals, l) * weights).sum()

        t = dc.Tensor(light, requires_grad=True)
        with dc.Tape() as tape:
            grad = tape.backward(loss(t))[t]
        eps = 1e-5
        numeric = np.zeros_like(light)
        for idx in np.ndindex(light.shape):
            step = np.zeros_like(light)
            step[idx] = eps
            numeric[idx] = (loss(dc.constant(light + step)).item() - loss(dc.constant(light - step)).item()) / (2 * eps)
        assert np.linalg.norm(grad - numeric) <= 1e-5 * np.linalg.norm(numeric)
