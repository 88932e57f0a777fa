import numpy as np
import pytest

import diffcore as dc
from config import LossWeights, TrainConfig
from diffcore import ContractViolation
from geometry import Camera, Viewpoint
from losses import (
    LatentPrior,
    LossComponents,
    PerceptualPyramid,
    albedo_regularizer,
    cycle_loss,
    flip_loss,
    identity_distance,
    identity_loss,
    image_distance,
    laplacian_rows,
    perceptual_distance,
    prior_penalty,
    reconstruction_loss,
    total_loss,
)
from rasterizer import render
from shading import Light


def _resize(img, h_out, w_out):
    h_in, w_in = img.shape[:2]
    out = np.zeros((h_out, w_out, img.shape[2]))
    for i in range(h_out):
        sy = max((i + 0.5) * h_in / h_out - 0.5, 0.0)
        y0 = min(int(sy), h_in - 1)
        y1, fy = min(y0 + 1, h_in - 1), sy - y0
        for j in range(w_out):
            sx = max((j + 0.5) * w_in / w_out - 0.5, 0.0)
            x0 = min(int(sx), w_in - 1)
            x1, fx = min(x0 + 1, w_in - 1), sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def _features(img, weights):
    x = img.transpose(2, 0, 1)
    feats = []
    for w, stride in zip(weights, (1, 2, 2)):
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        h = (xp.shape[1] - 3) // stride + 1
        wd = (xp.shape[2] - 3) // stride + 1
        y = np.zeros((w.shape[0], h, wd))
        for o in range(w.shape[0]):
            for i in range(h):
                for j in range(wd):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    y[o, i, j] = max(np.sum(patch * w[o]), 0.0)
        x = y
        feats.append(y / np.sqrt((y * y).sum(axis=0, keepdims=True) + 1e-10))
    return feats


def scripted_perceptual(a, b, weights):
    """Loop-by-loop rendition of the feature pyramid distance."""
    total = 0.0
    for scale in (1, 2, 4):
        fa, fb = [], []
        for img_a, img_b in zip(a, b):
            if scale > 1:
                img_a = _resize(img_a, img_a.shape[0] // scale, img_a.shape[1] // scale)
                img_b = _resize(img_b, img_b.shape[0] // scale, img_b.shape[1] // scale)
            fa.append(_features(img_a, weights))
            fb.append(_features(img_b, weights))
        per_depth = []
        for depth in range(3):
            diff = np.stack([fa[n][depth] - fb[n][depth] for n in range(len(a))])
            per_depth.append(np.mean(diff * diff))
        total += sum(per_depth) / 3.0
    return total / 3.0


@pytest.fixture(scope="module")
def pyramid():
    return PerceptualPyramid(seed=5)


class TestImageDistance:
    def test_identical_images(self, rng, pyramid):
        a = dc.constant(rng.uniform(0, 1, (2, 8, 8, 3)))
        assert image_distance(a, a, pyramid).item() == 0.0

    def test_constant_offset_without_perceptual_term(self, rng):
        a = rng.uniform(0, 0.5, (2, 8, 8, 3))
        d = image_distance(dc.constant(a), dc.constant(a + 0.5), None, lambda_perc=0.0).item()
        assert d == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self, pyramid):
        with pytest.raises(ContractViolation):
            image_distance(dc.constant(np.zeros((1, 8, 8, 3))), dc.constant(np.zeros((1, 4, 8, 3))), pyramid)

    def test_perceptual_is_symmetric(self, rng, pyramid):
        a = dc.constant(rng.uniform(0, 1, (2, 8, 8, 3)))
        b = dc.constant(rng.uniform(0, 1, (2, 8, 8, 3)))
        assert perceptual_distance(a, b, pyramid).item() == pytest.approx(
            perceptual_distance(b, a, pyramid).item(), rel=1e-14)

    def test_perceptual_matches_scripted_loops(self, rng, pyramid):
        a = rng.uniform(0, 1, (2, 8, 8, 3))
        b = rng.uniform(0, 1, (2, 8, 8, 3))
        value = perceptual_distance(dc.constant(a), dc.constant(b), pyramid).item()
        assert abs(value - scripted_perceptual(a, b, pyramid.weights)) <= 1e-10
        assert value > 0


class TestReconstructionAndFlip:
    def setup_method(self):
        self.camera = Camera(8, 8, 10.0)

    def render_fn(self, a, s, t, v, l):
        return render(a, s, t, v, l, self.camera, dc.constant([0.2, 0.2, 0.2]))

    def test_proxy_receives_no_gradient(self, rng, pyramid):
        rendered = dc.Tensor(rng.uniform(0, 1, (1, 8, 8, 3)), requires_grad=True)
        proxy = dc.Tensor(rng.uniform(0, 1, (1, 8, 8, 3)), requires_grad=True)
        with dc.Tape() as tape:
            grads = tape.backward(reconstruction_loss(rendered, proxy, pyramid), wrt=[rendered, proxy])
        assert np.any(grads[rendered])
        assert not np.any(grads[proxy])

    def test_symmetric_maps_make_flip_equal_reconstruction(self, rng, pyramid):
        half = rng.uniform(0.2, 0.8, (1, 8, 4, 3))
        albedo = dc.constant(np.concatenate([half, half[:, :, ::-1]], axis=2))
        depth_half = rng.uniform(0.95, 1.05, (1, 8, 4))
        depth = dc.constant(np.concatenate([depth_half, depth_half[:, :, ::-1]], axis=2))
        transform = dc.constant(np.ones((1, 8, 8)))
        view, light = Viewpoint.neutral(1), Light.from_direction(0.0, 0.2, 0.5, 0.4)
        proxy = dc.constant(rng.uniform(0, 1, (1, 8, 8, 3)))
        rec = reconstruction_loss(self.render_fn(albedo, depth, transform, view, light).image, proxy, pyramid)
        flip = flip_loss(self.render_fn, albedo, depth, transform, view, light, proxy, pyramid)
        assert flip.item() == pytest.approx(rec.item(), abs=1e-6)


class TestPerturbationTerms:
    def test_prior_is_zero_at_the_mean(self, rng):
        prior = LatentPrior(mu=rng.standard_normal(6), sigma=np.array(0.7))
        assert prior_penalty(dc.constant(np.tile(prior.mu, (3, 1))), prior).item() == 0.0

    def test_prior_reductions(self):
        prior = LatentPrior(mu=np.zeros(4), sigma=np.array(2.0))
        w = dc.constant(np.full((2, 4), 2.0))
        assert prior_penalty(w, prior, "mean").item() == pytest.approx(0.5)
        assert prior_penalty(w, prior, "sum").item() == pytest.approx(2.0)
        with pytest.raises(ContractViolation):
            prior_penalty(w, prior, "max")

    def test_default_prior_is_the_full_gaussian_energy(self, rng):
        config = TrainConfig()
        prior = LatentPrior(mu=np.zeros(config.latent_dim), sigma=np.array(1.0))
        w = rng.standard_normal((4, config.latent_dim))
        expected = np.mean(np.sum(w ** 2, axis=1) / 2)
        assert prior_penalty(dc.constant(w), prior, config.prior_reduction).item() == pytest.approx(expected)
        assert prior_penalty(dc.constant(w), prior).item() == pytest.approx(expected)

    def test_prior_sigma_must_be_positive(self):
        with pytest.raises(ContractViolation):
            LatentPrior(mu=np.zeros(3), sigma=np.array([1.0, 0.0, 1.0]))

    def test_cycle_is_zero_at_equality(self, rng):
        view = dc.constant(rng.uniform(-30, 30, (3, 6)))
        light = dc.constant(rng.uniform(0, 1, (3, 4)))
        assert cycle_loss(view, view, light, light).item() == 0.0

    def test_cycle_uses_normalized_view_units(self):
        view_re = dc.constant([[60.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
        zero = dc.constant(np.zeros((1, 6)))
        light = dc.constant(np.zeros((1, 4)))
        assert cycle_loss(view_re, zero, light, light).item() == pytest.approx(1.0)


class TestIdentity:
    def test_orthogonal_unit_embeddings(self):
        a = dc.constant([[1.0, 0.0, 0.0]])
        b = dc.constant([[0.0, 1.0, 0.0]])
        assert identity_distance(a, b, np.array([10.0])).item() == pytest.approx(2.0)

    def test_gate_zeroes_wide_yaw(self):
        a = dc.constant([[1.0, 0.0], [1.0, 0.0]])
        b = dc.constant([[0.0, 1.0], [0.0, 1.0]])
        assert identity_distance(a, b, np.array([30.0, -30.0])).item() == 0.0
        assert identity_distance(a, b, np.array([25.0, 30.0])).item() == pytest.approx(1.0)

    def test_identical_images(self, rng):
        images = dc.constant(rng.uniform(0, 1, (2, 8, 8, 3)))
        embed = lambda x: x.reshape(2, -1) * (1.0 / np.sqrt(192.0))  # noqa: E731
        assert identity_loss(images, images, np.zeros(2), embed).item() == 0.0


class TestAlbedoRegularizer:
    def test_constant_albedos(self):
        assert albedo_regularizer(dc.constant(np.full((3, 6, 6, 3), 0.4))).item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_albedos_scale_with_sqrt_batch(self, rng):
        one = rng.uniform(0, 1, (1, 6, 6, 3))
        v = laplacian_rows(dc.constant(one)).data[0]
        batch = dc.constant(np.repeat(one, 4, axis=0))
        assert albedo_regularizer(batch).item() == pytest.approx(2.0 * np.linalg.norm(v), rel=1e-10)

    def test_laplacian_of_a_spike(self):
        albedo = np.zeros((1, 5, 5, 3))
        albedo[0, 2, 2] = 3.0
        rows = laplacian_rows(dc.constant(albedo)).data
        assert rows.shape == (1, 25)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = [[0.0, 3.0, 0.0], [3.0, -12.0, 3.0], [0.0, 3.0, 0.0]]
        rows = rows.reshape(5, 5)
        np.testing.assert_allclose(rows, expected)

    def test_border_rows_use_replicated_edges(self):
        ramp = np.tile(np.arange(4.0), (4, 1))
        albedo = np.repeat(ramp[None, :, :, None], 3, axis=3)
        rows = laplacian_rows(dc.constant(albedo)).data.reshape(4, 4)
        np.testing.assert_allclose(rows[:, 1:3], 0.0, atol=1e-12)
        np.testing.assert_allclose(rows[:, 0], 1.0)
        np.testing.assert_allclose(rows[:, 3], -1.0)

    def test_rejects_bad_shape(self):
        with pytest.raises(ContractViolation):
            albedo_regularizer(dc.constant(np.zeros((6, 6, 3))))


class TestTotalLoss:
    def test_fixture_sums_to_hand_computed_value(self):
        components = LossComponents(rec=1.0, flip=1.0, perturb_a=0.5, perturb_b=0.5, idt=1.0, regA=1.0)
        assert total_loss(components, LossWeights()) == pytest.approx(8.81, abs=1e-12)

    def test_all_zero(self):
        assert total_loss(LossComponents(), LossWeights()) == 0.0

    def test_linear_in_each_component(self):
        weights = LossWeights()
        base = LossComponents(rec=0.3, flip=0.2, perturb_a=0.1, perturb_b=0.4, idt=0.05, regA=2.0)
        for name in ("rec", "flip", "perturb_a", "perturb_b", "idt", "regA"):
            scaled = LossComponents(**{**base.values(), name: 3 * getattr(base, name)})
            delta = total_loss(scaled, weights) - total_loss(base, weights)
            unit = LossComponents(**{k: (getattr(base, name) if k == name else 0.0) for k in base.values()})
            assert delta == pytest.approx(2 * total_loss(unit, weights), rel=1e-12)

    def test_values_converts_tensors(self):
        components = LossComponents(rec=dc.constant(np.array(0.25)))
        assert components.values()["rec"] == 0.25
