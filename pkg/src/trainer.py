"""
Training loop for the lifted generator: latent sampling, the perturbation
branch, the weighted objective, Adam updates, loss curve and checkpoints.
"""

import csv
import logging
import os
import time
from collections import OrderedDict
from dataclasses import replace
from typing import Dict, Optional, Tuple

import numpy as np

import diffcore as dc
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from checkpoint_registry import CheckpointRegistry
from config import TrainConfig, build_config
from diffcore import ContractViolation, NonFiniteLossError, Tensor
from generator import LiftedGenerator
from geometry import Viewpoint
from losses import (
    LossComponents,
    PerceptualPyramid,
    PerturbationState,
    albedo_regularizer,
    flip_loss,
    identity_loss,
    perturbation_loss,
    reconstruction_loss,
    total_loss,
)
from rasterizer import RasterSettings
from shading import Light, delight
from teacher import ProceduralTeacher

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "rec", "flip", "perturb_a", "perturb_b", "idt", "regA", "total"]


class Adam:
    """Adam over an ordered name -> Tensor map; parameters are replaced, never mutated."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = OrderedDict()
        self.v: Dict[str, np.ndarray] = OrderedDict()

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        updated: Dict[str, Tensor] = OrderedDict()
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                updated[name] = p
                continue
            dtype = p.dtype
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = (self.beta1 * m + (1.0 - self.beta1) * g).astype(dtype)
            v = (self.beta2 * v + (1.0 - self.beta2) * g * g).astype(dtype)
            self.m[name], self.v[name] = m, v
            step = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            updated[name] = Tensor((p.data - step).astype(dtype), requires_grad=True, name=name)
        return updated

    def state_dict(self) -> Tuple[int, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        return self.t, OrderedDict(self.m), OrderedDict(self.v)

    def load_state(self, t: int, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray], dtype) -> None:
        self.t = int(t)
        self.m = OrderedDict((k, np.asarray(a, dtype=dtype)) for k, a in m.items())
        self.v = OrderedDict((k, np.asarray(a, dtype=dtype)) for k, a in v.items())


def sample_perturbation(rng: np.random.Generator, batch: int, lights: np.ndarray,
                        yaw_range: float = 45.0, pitch_range: float = 10.0) -> Tuple[Viewpoint, Light]:
    """V' with yaw ~ U[-yaw_range, yaw_range], pitch ~ U[-pitch_range, pitch_range], roll 0;
    L' is a seeded permutation of the batch's lights."""
    if batch < 1:
        raise ContractViolation(f"sample_perturbation needs batch >= 1, got {batch}")
    lights = np.asarray(lights)
    if lights.shape != (batch, 4):
        raise ContractViolation(f"expected lights of shape ({batch}, 4), got {lights.shape}")
    yaw = rng.uniform(-yaw_range, yaw_range, batch)
    pitch = rng.uniform(-pitch_range, pitch_range, batch)
    order = rng.permutation(batch)
    view = Viewpoint.from_angles(yaw, pitch, np.zeros(batch))
    light = Light(dc.constant(lights[order].copy()))
    return view, light


class Trainer:
    """Owns the generator, the frozen teacher and the optimizer state of one run."""

    def __init__(self, config: TrainConfig, teacher: ProceduralTeacher):
        self.config = config
        self.teacher = teacher
        self.generator = LiftedGenerator(config, teacher)
        self.pyramid = PerceptualPyramid(config.seed)
        self.prior = teacher.prior(per_dim=config.prior_per_dim)
        self.weights = config.effective_weights()
        self.optimizer = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.rng = np.random.default_rng([config.seed, 0x7A])
        self.step = 0

    def sample_batch(self) -> np.ndarray:
        return self.teacher.sample_latent(self.rng, self.config.batch_size)

    def compute_losses(self, w_hat: np.ndarray) -> Tuple[LossComponents, Tensor]:
        """One forward pass of every term for the batch; call inside an active Tape."""
        cfg, weights, gen = self.config, self.weights, self.generator
        lam_perc = weights.lambda_perc
        w = dc.constant(w_hat)
        b = w.shape[0]

        out = gen.lift(w)
        proxy = self.teacher.generate(w)
        components = LossComponents()
        components.rec = reconstruction_loss(out.render.image, proxy, self.pyramid, lam_perc)
        if weights.lambda_flip > 0:
            components.flip = flip_loss(gen.render_maps, out.albedo, out.depth, out.transform,
                                        out.view, out.light, proxy, self.pyramid, lam_perc)

        # sampled every step so the RNG stream does not depend on the ablation switches
        view_p, light_p = sample_perturbation(self.rng, b, out.light.values.data,
                                              cfg.yaw_range, cfg.pitch_range)
        need_perturbed = weights.lambda_perturb > 0 or weights.lambda_idt > 0
        perturbed = None
        if need_perturbed:
            perturbed = gen.render_maps(out.albedo, out.depth, out.transform, view_p, light_p).image

        if weights.lambda_perturb > 0:
            w_prime = gen.nets.manipulate_style(w, view_p, light_p)
            proxy_prime = self.teacher.generate(w_prime)
            fixed = w_prime.detach()
            view_re = gen.nets.decode_view(fixed)
            light_re = gen.nets.decode_light(fixed)
            # part (b) must not reach M through the texture
            albedo_b = delight(out.texture.detach(), out.normals, Light.neutral(b).values)
            re_rendered = gen.render_maps(albedo_b, out.depth, out.transform, view_re, light_re).image
            state = PerturbationState(
                perturbed_image=perturbed, w_prime=w_prime, proxy=proxy_prime, re_rendered=re_rendered,
                view_prime=view_p.values, light_prime=light_p.values,
                view_re=view_re.values, light_re=light_re.values,
            )
            components.perturb_a, components.perturb_b = perturbation_loss(
                state, weights, self.prior, self.pyramid, cfg.perturb_perceptual, cfg.prior_reduction)

        if weights.lambda_idt > 0:
            components.idt = identity_loss(out.texture, perturbed, view_p.yaw, gen.nets.embed_identity,
                                           cfg.identity_gate)
        if weights.lambda_regA > 0:
            components.regA = albedo_regularizer(out.albedo)
        return components, total_loss(components, weights)

    def train_step(self, w_hat: Optional[np.ndarray] = None) -> Dict[str, float]:
        """Forward, backward and one Adam update; returns every loss term and the total."""
        if w_hat is None:
            w_hat = self.sample_batch()
        params = self.generator.parameters()
        with dc.Tape() as tape:
            components, total = self.compute_losses(w_hat)
            if not np.isfinite(total.data):
                culprit = tape.first_nonfinite() or "total loss"
                raise NonFiniteLossError(f"Non-finite loss at step {self.step + 1}: first non-finite tensor is {culprit}")
            grads = tape.backward(total, wrt=list(params.values()))
        named = OrderedDict((name, grads[p]) for name, p in params.items())
        self.generator.assign(self.optimizer.step(params, named))
        self.step += 1
        values = components.values()
        values["total"] = float(total.data)
        return values

    def state(self) -> Checkpoint:
        t, m, v = self.optimizer.state_dict()
        params = OrderedDict((name, p.data) for name, p in self.generator.parameters().items())
        return Checkpoint(params=params, adam_step=t, adam_m=m, adam_v=v,
                          rng_state=self.rng.bit_generator.state, step=self.step,
                          config_hash=self.config.config_hash(), config=self.config.to_flat())

    def load_state(self, ckpt: Checkpoint) -> None:
        dtype = dc.get_default_dtype()
        current = self.generator.parameters()
        missing = [name for name in current if name not in ckpt.params]
        if missing:
            raise ContractViolation(f"Checkpoint lacks {len(missing)} parameters, e.g. {missing[:3]}")
        restored = OrderedDict()
        for name, p in current.items():
            array = ckpt.params[name]
            if array.shape != p.shape:
                raise ContractViolation(f"Checkpoint parameter {name} has shape {array.shape}, model expects {p.shape}")
            restored[name] = Tensor(np.asarray(array, dtype=dtype), requires_grad=True, name=name)
        self.generator.assign(restored)
        self.optimizer.load_state(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v, dtype)
        if ckpt.rng_state:
            self.rng.bit_generator.state = ckpt.rng_state
        self.step = ckpt.step


def restore_trainer(ckpt: Checkpoint) -> Trainer:
    """Rebuild config, teacher and generator exactly as they were when `ckpt` was written."""
    config = build_config(ckpt.config)
    dc.set_default_dtype(config.dtype)
    teacher = ProceduralTeacher(config.latent_dim, config.image_size, config.seed, config.fov,
                                RasterSettings(sigma=config.raster_sigma, gamma=config.raster_gamma),
                                config.prior_samples)
    trainer = Trainer(config, teacher)
    trainer.load_state(ckpt)
    return trainer


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"checkpoint_{step:06d}.l3dg")


def write_checkpoint(trainer: Trainer, out_dir: str, registry: CheckpointRegistry) -> Checkpoint:
    ckpt = trainer.state()
    path = checkpoint_path(out_dir, ckpt.step)
    registry.begin(ckpt.step, path, ckpt.config_hash)
    try:
        save_checkpoint(path, ckpt)
    except OSError:
        registry.mark_failed(path)
        raise
    registry.mark_complete(path)
    return ckpt


def _format_losses(values: Dict[str, float]) -> str:
    return " | ".join(f"{k}={values[k]:.4f}" for k in LOSS_COLUMNS[1:])


def run_training(config: TrainConfig, out_dir: str, resume: Optional[str] = None) -> Checkpoint:
    """Train for config.steps steps, writing loss.csv and periodic checkpoints into out_dir."""
    dc.set_default_dtype(config.dtype)
    os.makedirs(out_dir, exist_ok=True)
    registry = CheckpointRegistry(out_dir)

    if resume:
        previous = load_checkpoint(resume)
        trainer = restore_trainer(previous)
        # the step target comes from the caller so a run can be extended
        resumed = replace(trainer.config, steps=config.steps)
        if resumed.config_hash() != config.config_hash():
            logger.warning(f"[TRAIN] Resuming {resume} written with a different config "
                           f"({previous.config_hash[:12]} vs {config.config_hash()[:12]}); using its config")
        trainer.config = resumed
        config = resumed
    else:
        teacher = ProceduralTeacher(config.latent_dim, config.image_size, config.seed, config.fov,
                                    RasterSettings(sigma=config.raster_sigma, gamma=config.raster_gamma),
                                    config.prior_samples)
        trainer = Trainer(config, teacher)

    teacher_hash = trainer.teacher.parameter_hash()
    num_params = sum(p.size for p in trainer.generator.parameters().values())

    logger.info("=" * 60)
    logger.info(f"[TRAIN] {config.image_size}x{config.image_size} d_w={config.latent_dim} batch={config.batch_size} "
                f"steps={config.steps} lr={config.learning_rate} seed={config.seed} dtype={config.dtype}")
    logger.info(f"[TRAIN] {num_params} trainable parameters | config {config.config_hash()[:12]} | "
                f"starting at step {trainer.step}")
    logger.info("=" * 60)

    csv_path = os.path.join(out_dir, "loss.csv")
    fresh = trainer.step == 0 or not os.path.exists(csv_path)
    start = time.time()
    final: Optional[Checkpoint] = None

    with open(csv_path, "w" if fresh else "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(LOSS_COLUMNS)
        try:
            while trainer.step < config.steps:
                values = trainer.train_step()
                writer.writerow([trainer.step] + [repr(values[k]) for k in LOSS_COLUMNS[1:]])
                if trainer.step % config.log_interval == 0 or trainer.step == 1:
                    f.flush()
                    logger.info(f"[STEP {trainer.step}] {_format_losses(values)}")
                if trainer.step % config.checkpoint_interval == 0:
                    f.flush()
                    final = write_checkpoint(trainer, out_dir, registry)
                    elapsed = (time.time() - start) / 60
                    logger.info("=" * 60)
                    logger.info(f"[CHECKPOINT] step {trainer.step}/{config.steps} | total={values['total']:.4f} "
                                f"| {elapsed:.1f} min")
                    logger.info("=" * 60)
        except KeyboardInterrupt:
            logger.info(f"[SHUTDOWN] Interrupted at step {trainer.step}; writing checkpoint")
            f.flush()
            return write_checkpoint(trainer, out_dir, registry)

    if final is None or final.step != trainer.step:
        final = write_checkpoint(trainer, out_dir, registry)
    if trainer.teacher.parameter_hash() != teacher_hash:
        raise ContractViolation("Teacher parameters changed during training")
    logger.info(f"[TRAIN] Finished {trainer.step} steps in {(time.time() - start) / 60:.1f} min")
    return final
