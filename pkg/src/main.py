import argparse
import logging
import os
import sys
import traceback
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

import diffcore as dc
from checkpoint import CheckpointFormatError, load_checkpoint
from checkpoint_registry import CheckpointRegistry
from config import ConfigError, config_keys, load_config, thread_count
from evaluation import evaluate
from geometry import Viewpoint
from gradcheck import format_results, run_suite
from image_io import depth_to_image, grid, normals_to_image, save_image, strip
from shading import Light
from trainer import Trainer, restore_trainer, run_training

logger = logging.getLogger("lifted3d")

COMMANDS = ["train", "render", "sweep-yaw", "sweep-pitch", "relight", "interpolate", "gradcheck", "eval"]
INFERENCE_COMMANDS = {"render", "sweep-yaw", "sweep-pitch", "relight", "interpolate", "eval"}
DEFAULT_YAW_ANGLES = [-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0]
DEFAULT_PITCH_ANGLES = [-20.0, -10.0, 0.0, 10.0, 20.0]
# light travels from the named side toward the face; image x grows rightward, y downward
RELIGHT_DIRECTIONS = {"left": (0.8, 0.0), "top": (0.0, 0.8), "right": (-0.8, 0.0), "bottom": (0.0, -0.8)}
RELIGHT_KA, RELIGHT_KD = 0.4, 0.6
INTERPOLATION_STEPS = 6
INTERPOLATION_YAW = 30.0


class UsageError(Exception):
    """Bad command line: reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lifted3d", description="Lift a frozen 2D generator into a 3D-controllable one.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="key = value training config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--checkpoint", metavar="PATH", help="checkpoint file; train also accepts a run directory")
    parser.add_argument("--out", metavar="DIR", default="out")
    parser.add_argument("--angles", metavar="CSV", help="comma-separated angles in degrees")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--size", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--samples", type=int, default=None, help="number of latents for render/eval commands")
    parser.add_argument("--preset", default="desk")
    return parser


def resolve_resume(path: Optional[str]) -> Optional[str]:
    """A run directory resumes from its newest complete checkpoint."""
    if not path or not os.path.isdir(path):
        return path
    entry = CheckpointRegistry(path).latest()
    if entry is None:
        raise UsageError(f"no complete checkpoint registered in {path}")
    logger.info(f"[TRAIN] Resuming from {entry['path']} (step {entry['step']})")
    return entry["path"]


def parse_angles(text: Optional[str], default: Sequence[float]) -> List[float]:
    if not text:
        return list(default)
    try:
        angles = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--angles must be a comma-separated list of numbers, got {text!r}")
    if not angles:
        raise UsageError("--angles is empty")
    if any(abs(a) > 60.0 for a in angles):
        raise UsageError("--angles must lie within [-60, 60] degrees")
    return angles


def setup_logging(out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    log_file = os.getenv("LIFTED3D_LOG_FILE") or os.path.join(out_dir, "lifted3d.log")
    level = getattr(logging, os.getenv("LIFTED3D_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True
    )
    return log_file


def blend_latents(a: np.ndarray, b: np.ndarray, ts: Sequence[float]) -> np.ndarray:
    """(1 - t) * a + t * b for each t; t = 0 gives a bit-exactly."""
    return np.stack([(1.0 - t) * a + t * b for t in ts])


def _latents(trainer: Trainer, seed: int, count: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC1])
    return trainer.teacher.sample_latent(rng, count)


def cmd_render(trainer: Trainer, args, out_dir: str) -> List[str]:
    gen = trainer.generator
    w = _latents(trainer, args.seed, args.samples or 4)
    out = gen.lift(dc.constant(w))
    written = []
    for i in range(w.shape[0]):
        mask = out.transform.data[i] > 0.5
        panels = {
            "texture": out.texture.data[i],
            "albedo": out.albedo.data[i],
            "depth": depth_to_image(out.depth.data[i], mask),
            "normals": normals_to_image(out.normals.data[i]),
            "transform": out.transform.data[i],
            "render": out.render.image.data[i],
        }
        for kind, image in panels.items():
            written += save_image(os.path.join(out_dir, f"sample_{i:02d}_{kind}"), image)
        written += save_image(os.path.join(out_dir, f"sample_{i:02d}_panel"), strip(list(panels.values()), gap=1))
    return written


def sweep_rows(trainer: Trainer, w: np.ndarray, angles: Sequence[float], axis: str) -> List[List[np.ndarray]]:
    """One row per latent, one column per angle; yaw or pitch, other angles zero."""
    gen = trainer.generator
    b = w.shape[0]
    out = gen.lift(dc.constant(w))
    columns = []
    for angle in angles:
        values = np.full(b, angle)
        view = Viewpoint.from_angles(values) if axis == "yaw" else Viewpoint.from_angles(np.zeros(b), values)
        columns.append(gen.render_maps(out.albedo, out.depth, out.transform, view, out.light).image.data)
    return [[column[i] for column in columns] for i in range(b)]


def cmd_sweep(trainer: Trainer, args, out_dir: str, axis: str) -> List[str]:
    angles = parse_angles(args.angles, DEFAULT_YAW_ANGLES if axis == "yaw" else DEFAULT_PITCH_ANGLES)
    w = _latents(trainer, args.seed, args.samples or 4)
    rows = sweep_rows(trainer, w, angles, axis)
    logger.info(f"[RENDER] {axis} sweep over {', '.join(f'{a:g}' for a in angles)}")
    return save_image(os.path.join(out_dir, f"sweep_{axis}"), grid(rows, gap=1))


def cmd_relight(trainer: Trainer, args, out_dir: str) -> List[str]:
    gen = trainer.generator
    w = _latents(trainer, args.seed, args.samples or 4)
    b = w.shape[0]
    out = gen.lift(dc.constant(w))
    columns = [out.render.image.data]
    for lx, ly in RELIGHT_DIRECTIONS.values():
        light = Light.from_direction(lx, ly, RELIGHT_KA, RELIGHT_KD, batch=b)
        columns.append(gen.render_maps(out.albedo, out.depth, out.transform, out.view, light).image.data)
    logger.info(f"[RENDER] relit from {', '.join(RELIGHT_DIRECTIONS)}")
    return save_image(os.path.join(out_dir, "relight"), grid([[c[i] for c in columns] for i in range(b)], gap=1))


def interpolation_rows(trainer: Trainer, a: np.ndarray, b: np.ndarray, ts: Sequence[float],
                       yaw: float = INTERPOLATION_YAW) -> List[List[np.ndarray]]:
    """Frontal row then rotated row across the latent blends."""
    gen = trainer.generator
    w = blend_latents(a, b, ts)
    n = w.shape[0]
    out = gen.lift(dc.constant(w), view=Viewpoint.neutral(n))
    rotated = gen.render_maps(out.albedo, out.depth, out.transform, Viewpoint.from_angles(np.full(n, yaw)), out.light)
    return [list(out.render.image.data), list(rotated.image.data)]


def cmd_interpolate(trainer: Trainer, args, out_dir: str) -> List[str]:
    w = _latents(trainer, args.seed, 2)
    ts = np.linspace(0.0, 1.0, INTERPOLATION_STEPS)
    yaw = parse_angles(args.angles, [INTERPOLATION_YAW])[0]
    rows = interpolation_rows(trainer, w[0], w[1], ts, yaw)
    return save_image(os.path.join(out_dir, "interpolate"), grid(rows, gap=1))


def cmd_eval(trainer: Trainer, args, out_dir: str) -> List[str]:
    angles = parse_angles(args.angles, DEFAULT_YAW_ANGLES)
    if 0.0 not in angles:
        raise UsageError("eval --angles must include 0")
    cfg = trainer.config
    report = evaluate(trainer.generator, trainer.teacher, n_samples=args.samples or 200, seed=args.seed,
                      angles=angles, batch_size=args.batch or cfg.batch_size,
                      yaw_range=cfg.yaw_range, pitch_range=cfg.pitch_range)
    print(report.to_table())
    return report.write(out_dir)


def _overrides(args) -> Dict[str, Optional[int]]:
    return {"steps": args.steps, "image_size": args.size, "batch_size": args.batch, "seed": args.seed}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command; 0 on success, 1 on runtime failure, 2 on usage error."""
    load_dotenv()
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(f"lifted3d: usage error: {e}", file=sys.stderr)
        print(f"config keys: {', '.join(config_keys())}", file=sys.stderr)
        return 2

    out_dir = args.out
    setup_logging(out_dir)
    try:
        if args.command in INFERENCE_COMMANDS:
            if not args.checkpoint:
                raise UsageError(f"{args.command} needs --checkpoint PATH")
            if not os.path.isfile(args.checkpoint):
                raise UsageError(f"checkpoint not found: {args.checkpoint}")

        if args.command == "train":
            config = load_config(args.config, args.preset, _overrides(args))
            final = run_training(config, out_dir, resume=resolve_resume(args.checkpoint))
            logger.info(f"[TRAIN] Final checkpoint at step {final.step}")
            return 0

        if args.command == "gradcheck":
            results = run_suite(args.seed or 0, thread_count())
            table = format_results(results)
            print(table)
            with open(os.path.join(out_dir, "gradcheck.txt"), "w", encoding="utf-8") as f:
                f.write(table + "\n")
            return 0 if all(r.passed for r in results) else 1

        ckpt = load_checkpoint(args.checkpoint)
        trainer = restore_trainer(ckpt)
        if args.seed is None:
            args.seed = trainer.config.seed
        logger.info(f"[RENDER] {args.command} from {args.checkpoint} (step {ckpt.step})")
        if args.command == "render":
            written = cmd_render(trainer, args, out_dir)
        elif args.command == "sweep-yaw":
            written = cmd_sweep(trainer, args, out_dir, "yaw")
        elif args.command == "sweep-pitch":
            written = cmd_sweep(trainer, args, out_dir, "pitch")
        elif args.command == "relight":
            written = cmd_relight(trainer, args, out_dir)
        elif args.command == "interpolate":
            written = cmd_interpolate(trainer, args, out_dir)
        else:
            written = cmd_eval(trainer, args, out_dir)
        logger.info(f"[RENDER] {len(written)} files written to {out_dir}")
        return 0

    except ConfigError as e:
        logger.error(f"[USAGE] {e}")
        logger.error(f"[USAGE] config keys: {', '.join(config_keys())}")
        return 2
    except UsageError as e:
        logger.error(f"[USAGE] {e}")
        return 2
    except CheckpointFormatError as e:
        logger.error(f"[CHECKPOINT] {e}")
        return 1
    except Exception as e:
        logger.error(f"[ERROR] {args.command} failed: {e}")
        logger.error(traceback.format_exc())
        return 1


def main():
    if sys.platform == 'win32':
        import codecs
        sys.stdout = codecs.getwriter('utf-8')(sys.stdout.buffer, 'replace')
        sys.stderr = codecs.getwriter('utf-8')(sys.stderr.buffer, 'replace')
    sys.exit(run())


if __name__ == "__main__":
    main()
