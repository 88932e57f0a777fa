"""
Evaluation against the procedural teacher's exact scene ground truth:
normalized depth error, mean-centred angle errors, yaw correlation, the
manipulator's distance to the teacher's latent edit and the identity
similarity curve over yaw.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

import diffcore as dc
from diffcore import ContractViolation
from generator import LiftedGenerator
from geometry import Viewpoint
from nets import cosine_similarity
from shading import Light
from teacher import ProceduralTeacher

logger = logging.getLogger(__name__)

DEFAULT_CURVE_ANGLES = (-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0)
COVERAGE_THRESHOLD = 0.5


def depth_error(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> Optional[float]:
    """RMS difference of the two depth maps after standardizing each over the mask.

    Returns None when either map is constant over the mask.
    """
    pred, truth, mask = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64), np.asarray(mask, bool)
    if pred.shape != truth.shape or mask.shape != pred.shape:
        raise ContractViolation(f"depth_error shapes differ: {pred.shape}, {truth.shape}, mask {mask.shape}")
    if not mask.any():
        raise ContractViolation("depth_error needs a nonempty overlap mask")
    p, t = pred[mask], truth[mask]
    p_std, t_std = p.std(), t.std()
    if p_std <= 1e-12 * max(1.0, abs(p.mean())) or t_std <= 1e-12 * max(1.0, abs(t.mean())):
        return None
    zp = (p - p.mean()) / p_std
    zt = (t - t.mean()) / t_std
    return float(np.sqrt(np.mean((zp - zt) ** 2)))


def angle_error(pred_angles: Sequence[float], truth_angles: Sequence[float]) -> float:
    """Mean absolute difference after subtracting each list's own mean (degrees)."""
    pred, truth = np.asarray(pred_angles, dtype=np.float64), np.asarray(truth_angles, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractViolation(f"angle_error lengths differ: {pred.shape} vs {truth.shape}")
    if pred.ndim != 1 or pred.shape[0] < 2:
        raise ContractViolation(f"angle_error needs two equal-length lists of at least 2 angles, got {pred.shape}")
    return float(np.mean(np.abs((pred - pred.mean()) - (truth - truth.mean()))))


def pearson(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _batches(count: int, size: int):
    for start in range(0, count, size):
        yield slice(start, min(count, start + size))


def identity_curve(generator: LiftedGenerator, w_hat: np.ndarray,
                   angles: Sequence[float] = DEFAULT_CURVE_ANGLES, batch_size: int = 8) -> List[Tuple[float, float]]:
    """Mean cosine similarity between the frontal render and the render at each yaw."""
    angles = [float(a) for a in angles]
    if 0.0 not in angles:
        raise ContractViolation("identity_curve needs 0 among the angles")
    w_hat = np.atleast_2d(w_hat)
    sums = {a: 0.0 for a in angles}
    for part in _batches(w_hat.shape[0], batch_size):
        w = dc.constant(w_hat[part])
        b = w.shape[0]
        out = generator.lift(w, view=Viewpoint.neutral(b))
        embed = generator.nets.embed_identity

        def render_at(yaw: float):
            view = Viewpoint.from_angles(np.full(b, yaw))
            return generator.render_maps(out.albedo, out.depth, out.transform, view, out.light).image

        frontal = embed(render_at(0.0))
        for angle in angles:
            rotated = frontal if angle == 0.0 else embed(render_at(angle))
            sums[angle] += float(cosine_similarity(frontal, rotated).data.sum())
    return [(a, sums[a] / w_hat.shape[0]) for a in angles]


@dataclass
class EvalReport:
    depth_error: Optional[float]
    yaw_error: float
    pitch_error: float
    roll_error: float
    identity_curve: List[Tuple[float, float]] = field(default_factory=list)
    yaw_correlation: Optional[float] = None
    manipulator_distance: Optional[float] = None
    n_samples: int = 0

    def rows(self) -> List[Tuple[str, str]]:
        def fmt(x):
            return "missing" if x is None else f"{x:.6f}"
        return [
            ("depth_error", fmt(self.depth_error)),
            ("yaw_error_deg", fmt(self.yaw_error)),
            ("pitch_error_deg", fmt(self.pitch_error)),
            ("roll_error_deg", fmt(self.roll_error)),
            ("yaw_correlation", fmt(self.yaw_correlation)),
            ("manipulator_distance", fmt(self.manipulator_distance)),
            ("n_samples", str(self.n_samples)),
        ]

    def to_table(self) -> str:
        """Text table in the Depth | Yaw | Pitch | Row column order; Row is roll."""
        def cell(x):
            return "n/a" if x is None else f"{x:.3f}"
        header = f"{'Depth':>8} | {'Yaw':>8} | {'Pitch':>8} | {'Row (roll)':>10}"
        values = f"{cell(self.depth_error):>8} | {cell(self.yaw_error):>8} | " \
                 f"{cell(self.pitch_error):>8} | {cell(self.roll_error):>10}"
        lines = [header, "-" * len(header), values, "", "identity similarity vs yaw"]
        lines += [f"{angle:>8.1f} | {cos:.4f}" for angle, cos in self.identity_curve]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        report_path = os.path.join(out_dir, "eval_report.csv")
        curve_path = os.path.join(out_dir, "identity_curve.csv")
        table_path = os.path.join(out_dir, "eval_report.txt")
        with open(report_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerows(self.rows())
        with open(curve_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["angle", "mean_cosine"])
            writer.writerows([(f"{a:g}", f"{c:.6f}") for a, c in self.identity_curve])
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(self.to_table())
        logger.info(f"[EVAL] Wrote {report_path}, {curve_path}, {table_path}")
        return [report_path, curve_path, table_path]


def evaluate(generator: LiftedGenerator, teacher: ProceduralTeacher, n_samples: int = 200, seed: int = 0,
             angles: Sequence[float] = DEFAULT_CURVE_ANGLES, batch_size: int = 8,
             yaw_range: float = 45.0, pitch_range: float = 10.0) -> EvalReport:
    """Score a generator on held-out latents the training stream never draws."""
    if n_samples < 2:
        raise ContractViolation(f"evaluate needs at least 2 samples, got {n_samples}")
    rng = np.random.default_rng([seed, 0xE1])
    w_all = teacher.sample_latent(rng, n_samples)

    depth_errors: List[float] = []
    undefined = 0
    pred_view, true_view = [], []
    manip_dist = []
    for part in _batches(n_samples, batch_size):
        w_np = w_all[part]
        b = w_np.shape[0]
        _, scene = teacher.generate_with_scene(w_np)
        w = dc.constant(w_np)
        out = generator.lift(w)
        pred_view.append(out.view.values.data[:, :3].astype(np.float64))
        true_view.append(np.stack([scene.pitch, scene.yaw, scene.roll], axis=1))

        overlap = (scene.coverage > COVERAGE_THRESHOLD) & (out.render.coverage.data > COVERAGE_THRESHOLD)
        for i in range(b):
            if not overlap[i].any():
                undefined += 1
                continue
            err = depth_error(out.depth.data[i], scene.depth[i], overlap[i])
            if err is None:
                undefined += 1
            else:
                depth_errors.append(err)

        target_view = Viewpoint.from_angles(rng.uniform(-yaw_range, yaw_range, b),
                                            rng.uniform(-pitch_range, pitch_range, b), np.zeros(b))
        target_light = out.light.values.data[rng.permutation(b)]
        w_prime = generator.nets.manipulate_style(w, target_view, Light(dc.constant(target_light))).data
        oracle = teacher.oracle_manipulate(w_np, target_view.values.data, target_light)
        manip_dist.extend(np.linalg.norm(w_prime - oracle, axis=1).tolist())

    pred = np.concatenate(pred_view)
    true = np.concatenate(true_view)
    if undefined:
        logger.warning(f"[EVAL] depth error undefined for {undefined}/{n_samples} samples")
    report = EvalReport(
        depth_error=float(np.mean(depth_errors)) if depth_errors else None,
        pitch_error=angle_error(pred[:, 0], true[:, 0]),
        yaw_error=angle_error(pred[:, 1], true[:, 1]),
        roll_error=angle_error(pred[:, 2], true[:, 2]),
        identity_curve=identity_curve(generator, w_all, angles, batch_size),
        yaw_correlation=pearson(pred[:, 1], true[:, 1]),
        manipulator_distance=float(np.mean(manip_dist)),
        n_samples=n_samples,
    )
    logger.info(f"[EVAL] depth={report.depth_error} yaw={report.yaw_error:.3f} pitch={report.pitch_error:.3f} "
                f"roll={report.roll_error:.3f} corr={report.yaw_correlation}")
    return report
