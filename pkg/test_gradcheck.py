import numpy as np
import pytest

import diffcore as dc
from geometry import Viewpoint
from gradcheck import (
    OP_TOLERANCE,
    PARAM_TOLERANCE,
    CheckResult,
    check_gradient,
    check_parameters,
    format_results,
    numerical_gradient,
    run_suite,
)
from losses import (
    LatentPrior,
    PerceptualPyramid,
    albedo_regularizer,
    cycle_loss,
    identity_distance,
    image_distance,
    perceptual_distance,
    prior_penalty,
)
from nets import LiftedNets, NetConfig
from shading import Light

LOSS_TOLERANCE = 1e-3


def test_numerical_gradient_of_a_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(numerical_gradient(lambda v: float(np.sum(v ** 2)), x), 2 * x, atol=1e-8)


def test_wrong_gradient_is_caught():
    result = check_gradient("half_gradient", lambda t: (t * dc.stop_gradient(t)).sum(), [np.array([1.0, 2.0])])
    assert not result.passed
    assert result.rel_error == pytest.approx(0.5, rel=1e-6)


def test_directional_mode_for_large_inputs(rng):
    weights = rng.standard_normal((20, 20))
    result = check_gradient("tanh_large", lambda t: (t.tanh() * dc.constant(weights)).sum(),
                            [rng.standard_normal((20, 20))], directions=4, rng=rng)
    assert result.passed


def test_full_suite_passes():
    results = run_suite(seed=0, threads=2)
    failed = [f"{r.name}: {r.rel_error:.2e}" for r in results if not r.passed]
    assert not failed
    names = [r.name for r in results]
    assert "nuclear_norm" in names and "render_8x8/view" in names
    assert {"params/view", "params/light", "params/shape", "params/transform", "params/manipulator"} <= set(names)
    assert all(r.tolerance == PARAM_TOLERANCE for r in results if r.name.startswith("params"))
    assert all(r.tolerance == OP_TOLERANCE for r in results if not r.name.startswith(("render", "params")))


def test_format_results_marks_failures():
    table = format_results([CheckResult("a", 1e-7, 1e-5, True), CheckResult("bb", 0.1, 1e-5, False)])
    lines = table.splitlines()
    assert lines[1].endswith("PASS") and lines[2].endswith("FAIL")


class TestParameterGradients:
    @pytest.fixture
    def nets(self):
        return LiftedNets(NetConfig(latent_dim=8, image_size=8, width=0.03125, embed_dim=8,
                                    manipulator_residual=False), seed=3)

    @pytest.mark.parametrize("prefix, head", [
        ("view.", lambda n, w: n.decode_view(w).values.sum()),
        ("light.", lambda n, w: n.decode_light(w).values.sum()),
        ("shape.", lambda n, w: n.decode_shape(w).sum()),
        ("transform.", lambda n, w: n.decode_transform(w).sum()),
        ("manip.", lambda n, w: (n.manipulate_style(w, Viewpoint.neutral(2), Light.neutral(2)) ** 2).sum()),
    ])
    def test_twenty_random_parameters(self, nets, rng, prefix, head):
        w = dc.constant(rng.standard_normal((2, 8)))
        result = check_parameters(prefix, lambda: head(nets, w), nets, [prefix], rng, samples=20)
        assert result.passed, result.rel_error

    def test_parameters_are_restored(self, nets, rng):
        before = {k: p.data.copy() for k, p in nets.parameters().items()}
        w = dc.constant(rng.standard_normal((2, 8)))
        check_parameters("view", lambda: nets.decode_view(w).values.sum(), nets, ["view."], rng)
        for key, p in nets.parameters().items():
            np.testing.assert_array_equal(p.data, before[key])

    def test_a_broken_parameter_gradient_fails(self, nets, rng):
        w = dc.constant(rng.standard_normal((2, 8)))

        def head():
            out = nets.decode_view(w).values
            return (out * dc.stop_gradient(out)).sum()

        assert not check_parameters("broken", head, nets, ["view."], rng).passed

class TestLossGradients:
    def test_l1_image_distance(self, rng):
        target = dc.constant(rng.uniform(0, 1, (1, 6, 6, 3)))
        image = target.data + rng.choice([-0.2, 0.2], target.shape)
        result = check_gradient("l1", lambda x: image_distance(x, target, None, 0.0), [image])
        assert result.rel_error <= LOSS_TOLERANCE

    def test_perceptual_distance(self, rng):
        pyramid = PerceptualPyramid(seed=1)
        target = dc.constant(rng.uniform(0, 1, (1, 8, 8, 3)))
        result = check_gradient("perceptual", lambda x: perceptual_distance(x, target, pyramid),
                                [rng.uniform(0, 1, (1, 8, 8, 3))], eps=1e-6, directions=3, rng=rng)
        assert result.rel_error <= LOSS_TOLERANCE

    def test_prior_and_cycle(self, rng):
        prior = LatentPrior(mu=rng.standard_normal(5), sigma=rng.uniform(0.5, 1.5, 5))
        assert check_gradient("prior", lambda w: prior_penalty(w, prior, "sum"),
                              [rng.standard_normal((3, 5))]).rel_error <= LOSS_TOLERANCE
        view_p = dc.constant(rng.uniform(-30, 30, (2, 6)))
        light_p = dc.constant(rng.uniform(0, 1, (2, 4)))
        result = check_gradient("cycle", lambda v, l: cycle_loss(v, view_p, l, light_p),
                                [rng.uniform(-30, 30, (2, 6)), rng.uniform(0, 1, (2, 4))])
        assert result.rel_error <= LOSS_TOLERANCE

    def test_identity_distance(self, rng):
        other = dc.constant(rng.standard_normal((3, 4)))
        result = check_gradient("identity", lambda e: identity_distance(e, other, np.array([5.0, 40.0, -20.0])),
                                [rng.standard_normal((3, 4))])
        assert result.rel_error <= LOSS_TOLERANCE

    def test_albedo_regularizer(self, rng):
        result = check_gradient("regA", albedo_regularizer, [rng.uniform(0, 1, (3, 5, 5, 3))])
        assert result.rel_error <= LOSS_TOLERANCE
