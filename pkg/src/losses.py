"""
Training objectives: image distance (L1 + perceptual), reconstruction and
flip losses, the two-part perturbation loss with its latent prior and
light/view cycle terms, the gated identity loss, the albedo low-rank
regularizer and the weighted total.
"""

import logging
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Union

import numpy as np

import diffcore as dc
from config import LossWeights
from diffcore import ContractViolation, Tensor
from geometry import VIEW_SCALE, flip_maps

logger = logging.getLogger(__name__)

IDENTITY_YAW_GATE = 25.0
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
PYRAMID_CHANNELS = (8, 16, 32)
PYRAMID_SCALES = (1, 2, 4)
FEATURE_EPS = 1e-10

Number = Union[float, Tensor]


class PerceptualPyramid:
    """Fixed random conv feature pyramid standing in for a pre-trained perceptual network.

    Features are taken after each of three conv + ReLU blocks (the later two
    strided) and L2-normalized per pixel across channels.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng([seed, 0x50])
        self.weights: List[np.ndarray] = []
        self.strides = (1, 2, 2)
        cin = 3
        for cout in PYRAMID_CHANNELS:
            bound = 1.0 / np.sqrt(cin * 9)
            self.weights.append(rng.uniform(-bound, bound, (cout, cin, 3, 3)))
            cin = cout

    def features(self, images: Tensor) -> List[Tensor]:
        x = images.transpose(0, 3, 1, 2)
        out = []
        for weight, stride in zip(self.weights, self.strides):
            x = dc.conv2d(x, dc.constant(weight, dtype=images.dtype), stride=stride, padding=1).relu()
            norm = ((x * x).sum(axis=1, keepdims=True) + FEATURE_EPS).sqrt()
            out.append(x / norm)
        return out

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ContractViolation(f"perceptual_distance: image shapes {a.shape} and {b.shape} differ")
        h, w = a.shape[1:3]
        per_scale = []
        for scale in PYRAMID_SCALES:
            if scale == 1:
                sa, sb = a, b
            else:
                size = (max(1, h // scale), max(1, w // scale))
                sa = dc.resize_bilinear(a.transpose(0, 3, 1, 2), size).transpose(0, 2, 3, 1)
                sb = dc.resize_bilinear(b.transpose(0, 3, 1, 2), size).transpose(0, 2, 3, 1)
            depths = []
            for fa, fb in zip(self.features(sa), self.features(sb)):
                diff = fa - fb
                depths.append((diff * diff).mean())
            per_scale.append((depths[0] + depths[1] + depths[2]) * (1.0 / 3.0))
        return (per_scale[0] + per_scale[1] + per_scale[2]) * (1.0 / 3.0)


def perceptual_distance(a: Tensor, b: Tensor, pyramid: PerceptualPyramid) -> Tensor:
    return pyramid.distance(a, b)


def image_distance(a: Tensor, b: Tensor, pyramid: Optional[PerceptualPyramid], lambda_perc: float = 1.0) -> Tensor:
    """d(I, J) = mean |I - J| + lambda_perc * perceptual(I, J)."""
    if a.shape != b.shape:
        raise ContractViolation(f"image_distance: image shapes {a.shape} and {b.shape} differ")
    l1 = (a - b).abs().mean()
    if lambda_perc == 0.0 or pyramid is None:
        return l1
    return l1 + lambda_perc * pyramid.distance(a, b)


def reconstruction_loss(rendered: Tensor, proxy: Tensor, pyramid: PerceptualPyramid, lambda_perc: float = 1.0) -> Tensor:
    return image_distance(rendered, proxy.detach(), pyramid, lambda_perc)


def flip_loss(render_fn: Callable, albedo: Tensor, depth: Tensor, transform: Tensor, view, light,
              proxy: Tensor, pyramid: PerceptualPyramid, lambda_perc: float = 1.0) -> Tensor:
    """Distance between the render of the mirrored albedo and depth and the proxy image."""
    flipped_albedo, flipped_depth = flip_maps(albedo, depth)
    image = render_fn(flipped_albedo, flipped_depth, transform, view, light).image
    return image_distance(image, proxy.detach(), pyramid, lambda_perc)


@dataclass
class LatentPrior:
    """Empirical Gaussian statistics of the teacher's style codes."""
    mu: np.ndarray
    sigma: np.ndarray  # scalar array or one entry per latent dimension

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma) > 0):
            raise ContractViolation("LatentPrior sigma must be positive")


def prior_penalty(w: Tensor, prior: LatentPrior, reduction: str = "sum") -> Tensor:
    """|w - mu|^2 / (2 sigma^2), reduced over latent dimensions, averaged over the batch."""
    sigma = np.asarray(prior.sigma, dtype=w.dtype)
    diff = (w - dc.constant(prior.mu, dtype=w.dtype)) * dc.constant(1.0 / sigma, dtype=w.dtype)
    per_dim = 0.5 * diff * diff
    if reduction == "sum":
        return per_dim.sum(axis=1).mean()
    if reduction == "mean":
        return per_dim.mean()
    raise ContractViolation(f"prior reduction must be 'mean' or 'sum', got {reduction!r}")


def cycle_loss(view_re: Tensor, view_prime: Tensor, light_re: Tensor, light_prime: Tensor) -> Tensor:
    """Squared distance of re-estimated to sampled view (normalized units) and light, batch mean."""
    scale = dc.constant(1.0 / VIEW_SCALE, dtype=view_re.dtype)
    dv = (view_re - view_prime.detach()) * scale
    dl = light_re - light_prime.detach()
    return (dv * dv).sum(axis=1).mean() + (dl * dl).sum(axis=1).mean()


@dataclass
class PerturbationState:
    """Everything one perturbation branch produced for a batch."""
    perturbed_image: Tensor  # I'_w = R(A, S, T, V', L')
    w_prime: Tensor  # M(w_hat, V', L')
    proxy: Tensor  # teacher(w'), still attached to w'
    re_rendered: Tensor  # R(A, S, T, V~', L~')
    view_prime: Tensor
    light_prime: Tensor
    view_re: Tensor  # D_V(w')
    light_re: Tensor  # D_L(w')


def perturbation_loss(state: PerturbationState, weights: LossWeights, prior: LatentPrior,
                      pyramid: PerceptualPyramid, perceptual: bool = True, prior_reduction: str = "sum"):
    """Returns (part_a, part_b).

    part_a trains M through w' against the detached perturbed render; part_b
    trains the 3D components through the re-estimated view and light against
    the detached proxy.
    """
    lam = weights.lambda_perc if perceptual else 0.0
    part_a = image_distance(state.perturbed_image.detach(), state.proxy, pyramid, lam) \
        + weights.beta * prior_penalty(state.w_prime, prior, prior_reduction)
    part_b = image_distance(state.re_rendered, state.proxy.detach(), pyramid, lam) \
        + weights.lambda_lvcyc * cycle_loss(state.view_re, state.view_prime, state.light_re, state.light_prime)
    return part_a, part_b


def identity_distance(embed_a: Tensor, embed_b: Tensor, yaw: np.ndarray, gate: float = IDENTITY_YAW_GATE) -> Tensor:
    """Batch mean of |f(a) - f(b)|^2, zeroed for samples whose |yaw| exceeds the gate."""
    mask = (np.abs(np.asarray(yaw)) <= gate).astype(embed_a.dtype)
    d = embed_a - embed_b
    return ((d * d).sum(axis=1) * dc.constant(mask, dtype=embed_a.dtype)).mean()


def identity_loss(image_a: Tensor, image_b: Tensor, yaw: np.ndarray, embed: Callable[[Tensor], Tensor],
                  gate: float = IDENTITY_YAW_GATE) -> Tensor:
    return identity_distance(embed(image_a), embed(image_b), yaw, gate)


def laplacian_rows(albedos: Tensor) -> Tensor:
    """Gray-scale (channel mean), 4-neighbor Laplacian with edge-replicated borders; K_A is B x HW."""
    gray = albedos.mean(axis=3)
    b, h, w = gray.shape
    gray = dc.concat([gray[:, :1], gray, gray[:, -1:]], axis=1)
    gray = dc.concat([gray[:, :, :1], gray, gray[:, :, -1:]], axis=2)
    kernel = dc.constant(LAPLACIAN.reshape(1, 1, 3, 3), dtype=albedos.dtype)
    filtered = dc.conv2d(gray.reshape(b, 1, h + 2, w + 2), kernel)
    return filtered.reshape(b, h * w)


def albedo_regularizer(albedos: Tensor) -> Tensor:
    """Nuclear norm of the batch's filtered albedo rows."""
    if albedos.ndim != 4 or albedos.shape[0] < 1:
        raise ContractViolation(f"albedo_regularizer needs (B>=1, H, W, 3), got {albedos.shape}")
    return dc.nuclear_norm(laplacian_rows(albedos))


@dataclass
class LossComponents:
    rec: Number = 0.0
    flip: Number = 0.0
    perturb_a: Number = 0.0
    perturb_b: Number = 0.0
    idt: Number = 0.0
    regA: Number = 0.0

    def values(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).data if isinstance(getattr(self, f.name), Tensor)
                              else getattr(self, f.name)) for f in fields(self)}


def total_loss(components: LossComponents, weights: LossWeights) -> Number:
    return (weights.lambda_rec * components.rec
            + weights.lambda_flip * components.flip
            + weights.lambda_perturb * (components.perturb_a + components.perturb_b)
            + weights.lambda_idt * components.idt
            + weights.lambda_regA * components.regA)
