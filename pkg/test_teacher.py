import numpy as np
import pytest

import diffcore as dc
from diffcore import ContractViolation
from geometry import Viewpoint
from shading import Light
from teacher import ProceduralTeacher


@pytest.fixture(scope="module")
def teacher():
    dc.set_default_dtype(np.float64)
    return ProceduralTeacher(latent_dim=8, image_size=16, seed=2)


def _feature_centroid(teacher, images):
    """Column centroid (NDC) of skin and mouth pixels, weighted by red-blue chroma."""
    chroma = (images[..., 0] - images[..., 2]) / np.maximum(images.sum(axis=-1), 1e-6)
    weight = np.clip(chroma, 0.0, None)
    u = teacher.camera.pixel_grid()[0][None]
    return (weight * u).sum(axis=(1, 2)) / weight.sum(axis=(1, 2))


class TestGenerate:
    def test_deterministic_across_instances(self, teacher, rng):
        w = teacher.sample_latent(rng, 3)
        other = ProceduralTeacher(latent_dim=8, image_size=16, seed=2)
        np.testing.assert_array_equal(teacher.generate(w).data, other.generate(w).data)
        assert teacher.parameter_hash() == other.parameter_hash()

    def test_seed_changes_parameters(self, teacher):
        assert ProceduralTeacher(latent_dim=8, image_size=16, seed=3).parameter_hash() != teacher.parameter_hash()

    def test_image_shape_and_range(self, teacher, rng):
        images = teacher.generate(teacher.sample_latent(rng, 4)).data
        assert images.shape == (4, 16, 16, 3)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_single_code_is_promoted_to_a_batch(self, teacher, rng):
        assert teacher.generate(teacher.sample_latent(rng)).shape == (1, 16, 16, 3)

    def test_wrong_latent_width(self, teacher):
        with pytest.raises(ContractViolation):
            teacher.generate(np.zeros((2, 5)))

    def test_too_few_latent_dimensions(self):
        with pytest.raises(ContractViolation):
            ProceduralTeacher(latent_dim=3, image_size=8, prior_samples=10)

    def test_differentiable_in_w(self, teacher, rng):
        w = dc.Tensor(teacher.sample_latent(rng, 2), requires_grad=True)
        with dc.Tape() as tape:
            grad = tape.backward(teacher.generate(w).sum())[w]
        assert np.all(np.isfinite(grad))
        assert np.abs(grad[:, 0]).sum() > 0


class TestScene:
    def test_scene_ground_truth(self, teacher, rng):
        w = teacher.sample_latent(rng, 2)
        image, scene = teacher.generate_with_scene(w)
        np.testing.assert_array_equal(image, teacher.generate(w).data)
        np.testing.assert_allclose(scene.yaw, 20.0 * w[:, 0])
        np.testing.assert_allclose(scene.pitch, 10.0 * w[:, 1])
        assert np.all(scene.roll == 0.0)
        assert scene.depth.min() >= 0.9 and scene.depth.max() <= 1.1
        assert np.all(scene.transform[:, 0] == 0.0)

    def test_oracle_manipulate_sets_pose_and_light(self, teacher, rng):
        w = teacher.sample_latent(rng, 2)
        view = Viewpoint.from_angles([30.0, -15.0], [10.0, -5.0])
        light = Light(dc.constant([[0.2, 0.0, 0.5, 0.5], [-0.3, 0.0, 0.5, 0.5]]))
        moved = teacher.oracle_manipulate(w, view, light)
        np.testing.assert_array_equal(moved[:, 3:], w[:, 3:])
        _, scene = teacher.generate_with_scene(moved)
        np.testing.assert_allclose(scene.yaw, [30.0, -15.0], atol=1e-12)
        np.testing.assert_allclose(scene.pitch, [10.0, -5.0], atol=1e-12)
        np.testing.assert_allclose(scene.light[:, 0], [0.2, -0.3], atol=1e-12)

    def test_oracle_leaves_input_untouched(self, teacher, rng):
        w = teacher.sample_latent(rng, 1)
        before = w.copy()
        teacher.oracle_manipulate(w, np.zeros((1, 6)), np.zeros((1, 4)))
        np.testing.assert_array_equal(w, before)

    def test_zero_code_is_a_frontal_face(self, teacher):
        image, scene = teacher.generate_with_scene(np.zeros((1, 8)))
        assert scene.yaw[0] == 0.0 and scene.pitch[0] == 0.0 and scene.roll[0] == 0.0
        np.testing.assert_allclose(scene.depth, scene.depth[:, :, ::-1], atol=1e-12)
        np.testing.assert_allclose(scene.albedo, scene.albedo[:, :, ::-1], atol=1e-12)
        assert abs(_feature_centroid(teacher, image)[0]) < 0.05

    def test_yaw_coordinate_moves_the_face_sideways(self, teacher):
        w = np.zeros((5, 8))
        w[:, 0] = np.linspace(-1.0, 1.0, 5)
        image, scene = teacher.generate_with_scene(w)
        np.testing.assert_allclose(scene.yaw, np.linspace(-20.0, 20.0, 5))
        steps = np.diff(_feature_centroid(teacher, image))
        assert np.all(steps > 1e-3) or np.all(steps < -1e-3)


class TestPrior:
    def test_statistics_of_standard_normal_codes(self, teacher):
        prior = teacher.prior()
        assert np.abs(prior.mu).max() < 0.05
        assert prior.sigma == pytest.approx(1.0, abs=0.03)

    def test_per_dimension_sigma(self, teacher):
        prior = teacher.prior(per_dim=True)
        assert prior.sigma.shape == (8,)
        assert prior.sigma.mean() == pytest.approx(teacher.sigma_w)
