"""
Finite-difference checks of the analytic gradients.

Small inputs are compared element by element; large ones along random
directions. Everything runs in float64.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

import diffcore as dc
from diffcore import Tensor
from geometry import Camera, Viewpoint, compute_normals, depth_to_points, rotation_matrix, view_displacement
from nets import LiftedNets, NetConfig
from rasterizer import RasterSettings, render
from shading import Light, compute_shading, delight

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-5
RENDER_TOLERANCE = 1e-2
PARAM_TOLERANCE = 1e-4
PARAM_SAMPLES = 24
PARAM_STEP = 1e-6
FD_STEP = 1e-4
ELEMENTWISE_LIMIT = 256


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    passed: bool


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + eps
        plus = f(x)
        x[idx] = original - eps
        minus = f(x)
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def _relative(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-8)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(n))) / scale


def check_gradient(name: str, f: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   tolerance: float = OP_TOLERANCE, eps: float = FD_STEP, directions: int = 0,
                   rng: Optional[np.random.Generator] = None) -> CheckResult:
    """Compare backward() of the scalar f(*inputs) with central differences.

    directions=0 checks every element (inputs up to ELEMENTWISE_LIMIT elements);
    otherwise each input is checked along that many random unit directions.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in arrays]
    with dc.Tape() as tape:
        loss = f(*tensors)
        grads = tape.backward(loss, wrt=tensors)
    analytic = [grads[t] for t in tensors]

    def value(values: List[np.ndarray]) -> float:
        return float(f(*[dc.constant(v, dtype=np.float64) for v in values]).data)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i, x in enumerate(arrays):
        if directions == 0 and x.size <= ELEMENTWISE_LIMIT:
            def single(xi: np.ndarray, i=i) -> float:
                values = list(arrays)
                values[i] = xi
                return value(values)
            worst = max(worst, _relative(analytic[i], numerical_gradient(single, x, eps)))
            continue
        for _ in range(max(1, directions)):
            d = rng.standard_normal(x.shape)
            d /= np.linalg.norm(d)
            plus, minus = list(arrays), list(arrays)
            plus[i], minus[i] = x + eps * d, x - eps * d
            numeric = (value(plus) - value(minus)) / (2.0 * eps)
            exact = float(np.sum(analytic[i] * d))
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))
    return CheckResult(name, worst, tolerance, bool(worst <= tolerance))


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5) -> np.ndarray:
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * dc.constant(weights, dtype=np.float64)).sum()


def _op_cases(rng: np.random.Generator) -> List[tuple]:
    """(name, f, inputs) for every differentiable primitive."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    row = rng.standard_normal((4,))
    r34 = rng.standard_normal((3, 4))
    img = rng.standard_normal((2, 3, 6, 6))
    small = rng.standard_normal((2, 2, 3, 3))
    index = np.array([2, 0, 2, 1])

    def w(shape):
        return rng.standard_normal(shape)

    w34, w66 = w((3, 4)), w((6, 6))
    w_conv = w((2, 4, 3, 3))
    w_deconv = w((2, 3, 6, 6))
    w_resize = w((2, 3, 4, 4))
    w_gn = w((2, 4, 3, 3))
    w_stack = w((2, 3, 4))
    w_take = w((4, 4))
    w_scatter = w((3, 4))
    w_mm = w((2, 3, 5))
    return [
        ("add_broadcast", lambda x, y: _weighted(x + y, w34), [a, row]),
        ("sub", lambda x, y: _weighted(x - y, w34), [a, b]),
        ("mul_broadcast", lambda x, y: _weighted(x * y, w34), [a, row]),
        ("div", lambda x, y: _weighted(x / y, w34), [a, pos]),
        ("power", lambda x: _weighted(x ** 3, w34), [a]),
        ("exp", lambda x: _weighted(x.exp(), w34), [a]),
        ("log", lambda x: _weighted(x.log(), w34), [pos]),
        ("sqrt", lambda x: _weighted(x.sqrt(), w34), [pos]),
        ("abs", lambda x: _weighted(x.abs(), w34), [_away_from_zero(rng, (3, 4))]),
        ("sin_cos", lambda x: _weighted(x.sin() * x.cos(), w34), [a]),
        ("sigmoid", lambda x: _weighted(x.sigmoid(), w34), [3.0 * a]),
        ("tanh", lambda x: _weighted(x.tanh(), w34), [a]),
        ("relu", lambda x: _weighted(x.relu(), w34), [_away_from_zero(rng, (3, 4))]),
        ("leaky_relu", lambda x: _weighted(x.leaky_relu(0.2), w34), [_away_from_zero(rng, (3, 4))]),
        ("softplus", lambda x: _weighted(x.softplus(), w34), [3.0 * a]),
        ("clip", lambda x: _weighted(x.clip(-0.5, 0.5), w34),
         [np.where(np.abs(a - 0.5) < 0.05, a + 0.2, np.where(np.abs(a + 0.5) < 0.05, a - 0.2, a))]),
        ("maximum_minimum", lambda x, y: _weighted(dc.maximum(x, y) + 2.0 * dc.minimum(x, y), w34),
         [a, a + _away_from_zero(rng, (3, 4))]),
        ("sum_axis", lambda x: _weighted(x.sum(axis=0, keepdims=True), w34[:1]), [a]),
        ("mean", lambda x: _weighted(x.mean(axis=1), w34[:, 0]), [a]),
        ("reshape_transpose", lambda x: _weighted(x.reshape(4, 3).transpose(1, 0), w34), [a]),
        ("getitem", lambda x: _weighted(x[:, 1:3], w34[:, :2]) + _weighted(x[np.array([0, 2, 0])], w34), [a]),
        ("concat", lambda x, y: _weighted(dc.concat([x, y], axis=1), np.concatenate([w34, w34], 1)), [a, b]),
        ("stack", lambda x, y: _weighted(dc.stack([x, y], axis=0), w_stack), [a, b]),
        ("flip", lambda x: _weighted(dc.flip(x, 1), w34), [a]),
        ("pad", lambda x: _weighted(dc.pad(x, [(1, 2), (0, 2)]), w66), [a]),
        ("broadcast_to", lambda x: _weighted(dc.broadcast_to(x, (3, 4)), w34), [row]),
        ("matmul_batched", lambda x, y: _weighted(dc.matmul(x, y), w_mm),
         [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]),
        ("linear", lambda x, m, c: _weighted(dc.linear(x, m, c), w34), [r34, w((4, 4)), w((4,))]),
        ("take", lambda x: _weighted(dc.take(x, index), w_take), [a]),
        ("scatter_add", lambda x: _weighted(dc.scatter_add(x, index, 3), w_scatter), [w((4, 4))]),
        ("conv2d", lambda x, k: _weighted(dc.conv2d(x, k, stride=2, padding=1), w_conv),
         [img, rng.standard_normal((4, 3, 3, 3))]),
        ("conv_transpose2d", lambda x, k: _weighted(dc.conv_transpose2d(x, k, stride=2, padding=1), w_deconv),
         [small, rng.standard_normal((2, 3, 4, 4))]),
        ("group_norm", lambda x, g, c: _weighted(dc.group_norm(x, 2, g, c), w_gn),
         [rng.standard_normal((2, 4, 3, 3)), w((4,)), w((4,))]),
        ("resize_bilinear", lambda x: _weighted(dc.resize_bilinear(x, (4, 4)), w_resize), [img]),
        ("nuclear_norm", lambda x: dc.nuclear_norm(x), [np.diag([3.0, 2.0, 1.0, 0.5]) @ rng.standard_normal((4, 6))]),
    ]


def _geometry_cases(rng: np.random.Generator) -> List[tuple]:
    camera = Camera(6, 6, 10.0)
    depth = 1.0 + 0.03 * rng.standard_normal((2, 6, 6))
    view = np.array([[4.0, -6.0, 3.0, 0.02, -0.01, 0.03], [-3.0, 8.0, -2.0, -0.02, 0.01, 0.0]])
    light = np.array([[0.3, -0.4, 0.5, 0.4], [-0.2, 0.1, 0.3, 0.6]])
    texture = rng.uniform(0.2, 0.9, (2, 6, 6, 3))
    w_pts = rng.standard_normal((2, 6, 6, 3))
    w_img = rng.standard_normal((2, 6, 6))
    w_rot = rng.standard_normal((2, 3, 3))

    def normals_of(d: Tensor) -> Tensor:
        return compute_normals(depth_to_points(d, camera))

    return [
        ("depth_to_points", lambda d: _weighted(depth_to_points(d, camera), w_pts), [depth]),
        ("compute_normals", lambda d: _weighted(normals_of(d), w_pts), [depth]),
        ("rotation_matrix", lambda v: _weighted(rotation_matrix(v), w_rot), [view]),
        ("view_displacement", lambda d, v: _weighted(view_displacement(depth_to_points(d, camera), v), w_pts),
         [depth, view]),
        ("compute_shading", lambda d, l: _weighted(compute_shading(normals_of(d), l), w_img), [depth, light]),
        ("delight", lambda t, d, l: _weighted(delight(t, normals_of(d), l), w_pts), [texture, depth, light]),
    ]


def render_fixture(seed: int = 0, size: int = 8):
    """Random A, S, T, V, L on a small grid, a far-away target and the pixel mask the render check uses."""
    rng = np.random.default_rng([seed, 0x6C])
    camera = Camera(size, size, 10.0)
    settings = RasterSettings()
    uu, vv = camera.pixel_grid()
    albedo = rng.uniform(0.2, 0.8, (1, size, size, 3))
    depth = (1.0 + 0.02 * np.sin(2.0 * uu + 1.0) * np.cos(1.5 * vv) + 0.005 * rng.standard_normal((size, size)))[None]
    transform = rng.uniform(0.4, 1.0, (1, size, size))
    view = np.array([[3.0, 5.0, 2.0, 0.01, -0.01, 0.005]])
    light = np.array([[0.3, -0.2, 0.5, 0.4]])
    background = np.array([0.2, 0.3, 0.4])

    def forward(a, s, t, v, l, bg):
        return render(a, s, t, v, l, camera, bg, settings)

    base = forward(*(dc.constant(x, dtype=np.float64) for x in (albedo, depth, transform, view, light, background)))
    mask = base.coverage.data >= 0.999
    mask[:, 0, :] = mask[:, -1, :] = False
    mask[:, :, 0] = mask[:, :, -1] = False
    target = base.image.data + 0.2 * rng.choice([-1.0, 1.0], base.image.shape)
    weights = np.repeat(mask[..., None], 3, axis=-1) / max(1, 3 * int(mask.sum()))

    def loss(a, s, t, v, l, bg):
        diff = (forward(a, s, t, v, l, bg).image - dc.constant(target, dtype=np.float64)).abs()
        return (diff * dc.constant(weights, dtype=np.float64)).sum()

    return loss, [albedo, depth, transform, view, light, background]


def _render_cases(seed: int) -> List[tuple]:
    loss, inputs = render_fixture(seed)
    names = ["albedo", "depth", "transform", "view", "light", "background"]
    cases = []
    for i, name in enumerate(names):
        def only(x: Tensor, i=i) -> Tensor:
            full = [dc.constant(v, dtype=np.float64) for v in inputs]
            full[i] = x
            return loss(*full)
        cases.append((f"render_8x8/{name}", only, [inputs[i]]))
    return cases

def check_parameters(name: str, loss_fn: Callable[[], Tensor], nets: LiftedNets, prefixes: Sequence[str],
                     rng: np.random.Generator, samples: int = PARAM_SAMPLES,
                     tolerance: float = PARAM_TOLERANCE, eps: float = PARAM_STEP) -> CheckResult:
    """Spot-check d loss / d theta for `samples` random entries of the parameters under `prefixes`."""
    params = [(key, p) for key, p in nets.parameters().items() if key.startswith(tuple(prefixes))]
    with dc.Tape() as tape:
        grads = tape.backward(loss_fn(), wrt=[p for _, p in params])
    sizes = np.array([p.size for _, p in params])
    picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    analytic, numeric = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        key, p = params[i]
        idx = np.unravel_index(int(flat - offsets[i]), p.shape)
        analytic.append(grads[p][idx])
        values = []
        for sign in (1.0, -1.0):
            data = p.data.copy()
            data[idx] += sign * eps
            nets.assign({key: Tensor(data, requires_grad=True, name=key)})
            values.append(float(loss_fn().data))
        nets.assign({key: p})
        numeric.append((values[0] - values[1]) / (2.0 * eps))
    worst = _relative(np.array(analytic), np.array(numeric))
    return CheckResult(name, worst, tolerance, bool(worst <= tolerance))


def _parameter_cases(seed: int) -> List[tuple]:
    """(name, prefixes, loss factory) for every trainable network on an 8x8 grid."""
    rng = np.random.default_rng([seed, 0x70])
    config = NetConfig(latent_dim=8, image_size=8, width=0.03125, embed_dim=8, manipulator_residual=False)
    w = dc.constant(rng.standard_normal((2, 8)), dtype=np.float64)
    view = Viewpoint(dc.constant(rng.uniform(-0.5, 0.5, (2, 6)) * np.array([60, 60, 60, 0.1, 0.1, 0.1]),
                                 dtype=np.float64))
    light = Light(dc.constant(rng.uniform(0.1, 0.9, (2, 4)), dtype=np.float64))
    w_view, w_light = rng.standard_normal((2, 6)), rng.standard_normal((2, 4))
    w_map, w_style = rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8))

    heads = [
        ("view", ("view.",), lambda n: _weighted(n.decode_view(w).values, w_view)),
        ("light", ("light.",), lambda n: _weighted(n.decode_light(w).values, w_light)),
        ("shape", ("shape.",), lambda n: _weighted(n.decode_shape(w), w_map)),
        ("transform", ("transform.",), lambda n: _weighted(n.decode_transform(w), w_map)),
        ("manipulator", ("manip.",), lambda n: _weighted(n.manipulate_style(w, view, light), w_style)),
    ]
    return [(f"params/{name}", prefixes, head, config) for name, prefixes, head in heads]


def run_suite(seed: int = 0, threads: int = 1) -> List[CheckResult]:
    """Every op, the geometry and shading paths, network parameters and the 8x8 render; results in suite order."""
    previous = dc.get_default_dtype()
    dc.set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng([seed, 0x6A])
        jobs: List[Callable[[np.random.Generator], CheckResult]] = []
        for name, f, inputs in _op_cases(rng) + _geometry_cases(rng):
            jobs.append(lambda r, name=name, f=f, inputs=inputs: check_gradient(name, f, inputs, OP_TOLERANCE, rng=r))
        for name, prefixes, head, config in _parameter_cases(seed):
            def params_job(r, name=name, prefixes=prefixes, head=head, config=config):
                nets = LiftedNets(config, seed)
                return check_parameters(name, lambda: head(nets), nets, prefixes, r)
            jobs.append(params_job)
        for name, f, inputs in _render_cases(seed):
            jobs.append(lambda r, name=name, f=f, inputs=inputs:
                        check_gradient(name, f, inputs, RENDER_TOLERANCE, directions=3, rng=r))

        def run(job_index: int) -> CheckResult:
            return jobs[job_index](np.random.default_rng([seed, job_index]))

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(run, range(len(jobs))))
    finally:
        dc.set_default_dtype(previous)
    failed = [r for r in results if not r.passed]
    logger.info(f"[GRADCHECK] {len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        logger.warning(f"[GRADCHECK] FAIL {r.name}: rel error {r.rel_error:.2e} > {r.tolerance:.0e}")
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'rel error':>10}  {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.rel_error:>10.2e}  {r.tolerance:>9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
