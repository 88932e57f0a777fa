"""
Learnable decoders D_V, D_L, D_S, D_T, the style manipulation network M,
and the fixed identity embedding.

Networks are plain layer lists (LayerSpec) over an ordered parameter dict,
so the optimizer and the checkpoint writer can address every tensor by name.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import ContractViolation, Tensor
from geometry import VIEW_SCALE, Viewpoint, border_mask
from shading import Light

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
# channel / group-norm pattern of the stride-2 decoder stages at width 1
DECODER_STAGES = [(512, 256, 64), (256, 128, 32), (128, 64, 16), (64, 32, 8), (32, 16, 4)]
EMBED_CHANNELS = (8, 16, 32)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cin: int = 0
    cout: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 0
    shape: Tuple[int, ...] = ()


class Network:
    """Sequential network over an ordered name -> Tensor parameter dict."""

    def __init__(self, name: str, layers: List[LayerSpec], rng: np.random.Generator, trainable: bool = True):
        self.name = name
        self.layers = list(layers)
        self.params: Dict[str, Tensor] = OrderedDict()
        dtype = dc.get_default_dtype()
        for index, spec in enumerate(self.layers):
            key = f"{name}.{index}"
            if spec.kind == "linear":
                bound = 1.0 / np.sqrt(spec.cin)
                self._add(f"{key}.weight", rng.uniform(-bound, bound, (spec.cin, spec.cout)), dtype, trainable)
                self._add(f"{key}.bias", rng.uniform(-bound, bound, (spec.cout,)), dtype, trainable)
            elif spec.kind == "conv":
                bound = 1.0 / np.sqrt(spec.cin * spec.kernel ** 2)
                shape = (spec.cout, spec.cin, spec.kernel, spec.kernel)
                self._add(f"{key}.weight", rng.uniform(-bound, bound, shape), dtype, trainable)
            elif spec.kind == "deconv":
                # each output pixel sees cin * (k / stride)^2 inputs
                bound = 1.0 / np.sqrt(spec.cin * (spec.kernel / spec.stride) ** 2)
                shape = (spec.cin, spec.cout, spec.kernel, spec.kernel)
                self._add(f"{key}.weight", rng.uniform(-bound, bound, shape), dtype, trainable)
            elif spec.kind == "group_norm":
                self._add(f"{key}.gamma", np.ones(spec.cout), dtype, trainable)
                self._add(f"{key}.beta", np.zeros(spec.cout), dtype, trainable)

    def _add(self, name: str, value: np.ndarray, dtype, trainable: bool) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=trainable, name=name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __call__(self, x: Tensor) -> Tensor:
        for index, spec in enumerate(self.layers):
            key = f"{self.name}.{index}"
            kind = spec.kind
            if kind == "linear":
                x = dc.linear(x, self.params[f"{key}.weight"], self.params[f"{key}.bias"])
            elif kind == "leaky_relu":
                x = x.leaky_relu(LEAKY_SLOPE)
            elif kind == "relu":
                x = x.relu()
            elif kind == "conv":
                x = dc.conv2d(x, self.params[f"{key}.weight"], stride=spec.stride, padding=spec.padding)
            elif kind == "deconv":
                x = dc.conv_transpose2d(x, self.params[f"{key}.weight"], stride=spec.stride, padding=spec.padding)
            elif kind == "group_norm":
                x = dc.group_norm(x, spec.groups, self.params[f"{key}.gamma"], self.params[f"{key}.beta"])
            elif kind == "upsample":
                b, c, h, w = x.shape
                x = dc.broadcast_to(x.reshape(b, c, h, 1, w, 1), (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)
            elif kind == "reshape":
                x = x.reshape((x.shape[0],) + spec.shape)
            else:
                raise ContractViolation(f"Unknown layer kind {kind!r} in {self.name}")
        return x


def mlp_layers(d_in: int, hidden: int, d_out: int, depth: int = 4) -> List[LayerSpec]:
    """depth linear layers with leaky activations between them."""
    layers: List[LayerSpec] = []
    width = d_in
    for _ in range(depth - 1):
        layers += [LayerSpec("linear", width, hidden), LayerSpec("leaky_relu")]
        width = hidden
    layers.append(LayerSpec("linear", width, d_out))
    return layers


def count_parameters(layers: List[LayerSpec]) -> int:
    """Parameter count of a layer list without allocating it."""
    total = 0
    for spec in layers:
        if spec.kind == "linear":
            total += spec.cin * spec.cout + spec.cout
        elif spec.kind in ("conv", "deconv"):
            total += spec.cin * spec.cout * spec.kernel ** 2
        elif spec.kind == "group_norm":
            total += 2 * spec.cout
    return total


def _scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def _groups(groups: int, channels: int, width: float) -> int:
    g = min(_scaled(groups, width), channels)
    while channels % g:
        g -= 1
    return g


def _stage_count(size: int) -> int:
    stages = int(round(np.log2(size))) - 3
    if size < 8 or 2 ** (stages + 3) != size or stages > len(DECODER_STAGES):
        raise ContractViolation(f"Decoder output size must be a power of two in [8, 256], got {size}")
    return stages


def _conv_block(cin: int, cout: int, kernel: int, groups: int) -> List[LayerSpec]:
    return [LayerSpec("conv", cin, cout, kernel, 1, kernel // 2),
            LayerSpec("group_norm", cout=cout, groups=groups), LayerSpec("relu")]


def decoder_layers(d_w: int, size: int, width: float, with_stage_convs: bool) -> List[LayerSpec]:
    """Shape (with_stage_convs) or transformation-map decoder stack for one output channel."""
    stages = _stage_count(size)
    top = _scaled(DECODER_STAGES[0][0], width)
    layers = mlp_layers(d_w, d_w, d_w) + [
        LayerSpec("reshape", shape=(d_w, 1, 1)),
        LayerSpec("deconv", d_w, top, 4, 1, 0),
        LayerSpec("relu"),
    ]
    if with_stage_convs:
        layers += [LayerSpec("conv", top, top, 3, 1, 1), LayerSpec("relu")]
    channels, groups = top, _groups(DECODER_STAGES[0][2], top, width)
    for cin, cout, g in DECODER_STAGES[:stages]:
        cin, cout = _scaled(cin, width), _scaled(cout, width)
        groups = _groups(g, cout, width)
        layers += [LayerSpec("deconv", cin, cout, 4, 2, 1),
                   LayerSpec("group_norm", cout=cout, groups=groups), LayerSpec("relu")]
        if with_stage_convs:
            layers += _conv_block(cout, cout, 3, groups)
        channels = cout
    layers.append(LayerSpec("upsample"))
    layers += _conv_block(channels, channels, 3, groups)
    if with_stage_convs:
        layers += _conv_block(channels, channels, 5, groups)
    layers.append(LayerSpec("conv", channels, 1, 5, 1, 2))
    return layers


def squash_view(raw: Tensor) -> Tensor:
    """tanh, scaled to +-60 degrees and +-0.1 translation."""
    return raw.tanh() * dc.constant(VIEW_SCALE, dtype=raw.dtype)


def squash_light(raw: Tensor) -> Tensor:
    return dc.concat([raw[:, 0:2].tanh(), raw[:, 2:4].sigmoid()], axis=1)


def squash_depth(raw: Tensor) -> Tensor:
    return 0.9 + 0.2 * raw.sigmoid()


def squash_transform(raw: Tensor, mask: np.ndarray) -> Tensor:
    return raw.sigmoid() * dc.constant(mask, dtype=raw.dtype)


class IdentityEmbedding:
    """Fixed, seed-pinned strided conv pyramid mapping images to unit vectors. Never trained."""

    def __init__(self, size: int, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng([seed, 0x1D])
        layers: List[LayerSpec] = []
        cin, spatial = 3, size
        for cout in EMBED_CHANNELS:
            layers += [LayerSpec("conv", cin, cout, 4, 2, 1), LayerSpec("leaky_relu")]
            cin, spatial = cout, spatial // 2
        layers += [LayerSpec("reshape", shape=(cin * spatial * spatial,)),
                   LayerSpec("linear", cin * spatial * spatial, dim)]
        self.net = Network("embed", layers, rng, trainable=False)
        self.dim = dim

    def __call__(self, images: Tensor) -> Tensor:
        e = self.net(images.transpose(0, 3, 1, 2))
        return e / ((e * e).sum(axis=1, keepdims=True) + 1e-30).sqrt()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of unit vectors, as 1 - |a - b|^2 / 2."""
    d = a - b
    return 1.0 - 0.5 * (d * d).sum(axis=1)


@dataclass
class NetConfig:
    latent_dim: int = 64
    image_size: int = 32
    width: float = 0.125
    embed_dim: int = 64
    manipulator_residual: bool = True
    inject_conv: bool = False


class LiftedNets:
    """The five trainable networks plus the frozen identity embedding."""

    def __init__(self, config: NetConfig, seed: int = 0):
        if config.inject_conv:
            raise ContractViolation("inject_conv needs a teacher feature map, which the procedural teacher does not expose")
        self.config = config
        d = config.latent_dim
        rng = np.random.default_rng([seed, 0x4E])
        self.view_net = Network("view", mlp_layers(d, d, 6), rng)
        self.light_net = Network("light", mlp_layers(d, d, 4), rng)
        self.shape_net = Network("shape", decoder_layers(d, config.image_size, config.width, True), rng)
        self.transform_net = Network("transform", decoder_layers(d, config.image_size, config.width, False), rng)
        self.encode_w = Network("manip.w", mlp_layers(d, d, d), rng)
        self.encode_view = Network("manip.view", mlp_layers(6, d, d), rng)
        self.encode_light = Network("manip.light", mlp_layers(4, d, d), rng)
        self.manip_head = Network("manip.head", mlp_layers(d, d, d), rng)
        if config.manipulator_residual:
            # residual M starts as the identity map
            last = len(self.manip_head.layers) - 1
            for suffix in ("weight", "bias"):
                key = f"manip.head.{last}.{suffix}"
                p = self.manip_head.params[key]
                self.manip_head.params[key] = Tensor(np.zeros_like(p.data), requires_grad=True, name=key)
        self.embedding = IdentityEmbedding(config.image_size, config.embed_dim, seed)
        self.mask = border_mask(config.image_size, config.image_size)

    @property
    def trainable(self) -> List[Network]:
        return [self.view_net, self.light_net, self.shape_net, self.transform_net,
                self.encode_w, self.encode_view, self.encode_light, self.manip_head]

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = OrderedDict()
        for net in self.trainable:
            params.update(net.params)
        return params

    def assign(self, values: Dict[str, Tensor]) -> None:
        """Swap in new parameter tensors by name (tensors are immutable)."""
        for net in self.trainable:
            for name in net.params:
                if name in values:
                    net.params[name] = values[name]

    def decode_view(self, w: Tensor) -> Viewpoint:
        return Viewpoint(squash_view(self.view_net(w)))

    def decode_light(self, w: Tensor) -> Light:
        return Light(squash_light(self.light_net(w)))

    def decode_shape(self, w0: Tensor) -> Tensor:
        raw = self.shape_net(w0)
        return squash_depth(raw.reshape(raw.shape[0], raw.shape[2], raw.shape[3]))

    def decode_transform(self, w0: Tensor) -> Tensor:
        raw = self.transform_net(w0)
        return squash_transform(raw.reshape(raw.shape[0], raw.shape[2], raw.shape[3]), self.mask)

    def manipulate_style(self, w: Tensor, view: Viewpoint, light: Light) -> Tensor:
        view_in = view.values * dc.constant(1.0 / VIEW_SCALE, dtype=view.values.dtype)
        h = self.encode_w(w) + self.encode_view(view_in) + self.encode_light(light.values)
        out = self.manip_head(h)
        return w + out if self.config.manipulator_residual else out

    def embed_identity(self, images: Tensor) -> Tensor:
        return self.embedding(images)
