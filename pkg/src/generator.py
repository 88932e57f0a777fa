"""
The assembled 3D generator G_3D: networks, camera, trainable background and
the forward pass from a style code to texture, albedo, depth, transform,
view, light and the rendered image.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import diffcore as dc
from config import TrainConfig
from diffcore import Tensor
from geometry import Camera, Viewpoint, compute_normals, depth_to_points
from nets import LiftedNets, NetConfig
from rasterizer import RasterSettings, RenderOutput, render
from shading import Light, delight
from teacher import ProceduralTeacher

logger = logging.getLogger(__name__)


@dataclass
class GeneratorOutput:
    w0: Tensor
    texture: Tensor
    albedo: Tensor
    depth: Tensor
    transform: Tensor
    view: Viewpoint
    light: Light
    normals: Tensor
    render: RenderOutput


class LiftedGenerator:
    """G_3D(w) = R(A, S, T, V, L) with every map decoded from the teacher's style code."""

    def __init__(self, config: TrainConfig, teacher: ProceduralTeacher):
        self.config = config
        self.teacher = teacher
        self.nets = LiftedNets(NetConfig(
            latent_dim=config.latent_dim,
            image_size=config.image_size,
            width=config.width,
            embed_dim=config.embed_dim,
            manipulator_residual=config.manipulator_residual,
            inject_conv=config.inject_conv,
        ), seed=config.seed)
        self.camera = Camera(config.image_size, config.image_size, config.fov)
        self.settings = RasterSettings(sigma=config.raster_sigma, gamma=config.raster_gamma)
        self.background = Tensor(np.full(3, 0.5, dtype=dc.get_default_dtype()), requires_grad=True,
                                 name="background")

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict(self.nets.parameters())
        params["background"] = self.background
        return params

    def assign(self, values: Dict[str, Tensor]) -> None:
        self.nets.assign(values)
        if "background" in values:
            self.background = values["background"]

    def neutral_code(self, w_hat: Tensor) -> Tensor:
        """w0 = M(w_hat, V0, L0)."""
        b = w_hat.shape[0]
        return self.nets.manipulate_style(w_hat, Viewpoint.neutral(b), Light.neutral(b))

    def render_maps(self, albedo: Tensor, depth: Tensor, transform: Tensor, view, light) -> RenderOutput:
        return render(albedo, depth, transform, view, light, self.camera, self.background, self.settings)

    def lift(self, w_hat: Tensor, view: Optional[Viewpoint] = None, light: Optional[Light] = None) -> GeneratorOutput:
        """Full forward pass; D_S and D_T see w0 with its gradient stopped."""
        b = w_hat.shape[0]
        w0 = self.neutral_code(w_hat)
        texture = self.teacher.generate(w0)
        w0_fixed = w0.detach()
        depth = self.nets.decode_shape(w0_fixed)
        transform = self.nets.decode_transform(w0_fixed)
        normals = compute_normals(depth_to_points(depth, self.camera))
        albedo = delight(texture, normals, Light.neutral(b).values)
        view = view if view is not None else self.nets.decode_view(w_hat)
        light = light if light is not None else self.nets.decode_light(w_hat)
        output = self.render_maps(albedo, depth, transform, view, light)
        return GeneratorOutput(w0=w0, texture=texture, albedo=albedo, depth=depth, transform=transform,
                               view=view, light=light, normals=normals, render=output)
