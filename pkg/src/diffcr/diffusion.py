"""Forward noising, the joint training step, and the CFG ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .model import ModelConfig, model_forward
from .ratio import RatioTable, batch_mean_ratio, project_ratios, ratio_mse_loss, region_of_timestep
from .tensor import Tape, Tensor


class NonFiniteLossError(FloatingPointError):
    def __init__(self, op: Optional[str]):
        self.op = op
        super().__init__(f"non-finite loss; first op producing NaN/Inf: {op or 'unknown'}")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def default_betas(T: int) -> tuple[float, float]:
    """Linear-schedule endpoints rescaled so any T ends near the 1000-step noise level."""
    s = 1000.0 / T
    return min(1e-4 * s, 0.5), min(0.02 * s, 0.999)


def make_schedule(T: int, beta_start: Optional[float] = None, beta_end: Optional[float] = None) -> NoiseSchedule:
    if beta_start is None or beta_end is None:
        ds, de = default_betas(T)
        beta_start = ds if beta_start is None else beta_start
        beta_end = de if beta_end is None else beta_end
    if T < 1:
        raise ValueError("T must be positive")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start], dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    ab = schedule.alpha_bars[t].reshape(np.shape(t) + (1,) * (x0.ndim - np.ndim(t)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


@dataclass
class TrainBatch:
    x0: np.ndarray
    classes: np.ndarray
    t: np.ndarray
    noise: np.ndarray


@dataclass
class StepResult:
    total: float
    diffusion: float
    ratio: float
    batch_mean_ratio: float


def draw_batch(images: np.ndarray, classes: np.ndarray, rng: tc.Rng, step: int, batch_size: int,
               T: int, null_class: int, uncond_prob: float = 0.1) -> TrainBatch:
    """Seeded minibatch for one step; every stream is keyed by the step index."""
    idx = rng.generator("batch", step).integers(0, len(images), size=batch_size)
    t = rng.generator("timestep", step).integers(0, T, size=batch_size)
    noise = rng.generator("noise", step).standard_normal((batch_size,) + images.shape[1:])
    y = classes[idx].copy()
    drop = rng.generator("cfg", step).random(batch_size) < uncond_prob
    y[drop] = null_class
    return TrainBatch(images[idx], y, t, noise)


def training_step(params: dict, table: Optional[RatioTable], opt_state: dict, batch: TrainBatch,
                  config: ModelConfig, schedule: NoiseSchedule, lr: float = 1e-3,
                  weight_decay: float = 3e-2, ratio_coeff: Optional[float] = None,
                  decay_mask: Optional[dict] = None) -> StepResult:
    """Joint diffusion + ratio loss, backward, AdamW, then clamp the ratios.

    ``table=None`` trains the dense model without routing.
    """
    coeff = config.ratio_loss_coeff if ratio_coeff is None else ratio_coeff
    x_t = q_sample(batch.x0, batch.t, batch.noise, schedule)
    with Tape() as tape:
        eps_hat = model_forward(params, config, x_t, batch.t, batch.classes, ratios=table, mode="train")
        diff = tc.mse_mean(eps_hat, Tensor(batch.noise))
        if table is not None:
            rl = ratio_mse_loss(table, batch.t, config.target_ratio, coeff, config.train_timesteps)
            total = diff + rl
        else:
            rl = None
            total = diff
    if not np.isfinite(total.data):
        raise NonFiniteLossError(tape.first_nonfinite())
    tc.backward(total)

    named = dict(params)
    if table is not None:
        named["ratio_table"] = table.values
    grads = {k: v.grad for k, v in named.items() if v.grad is not None}
    tc.adamw_step(named, grads, opt_state, lr=lr, weight_decay=weight_decay, decay_mask=decay_mask)
    for v in named.values():
        v.grad = None
    bmr = 0.0
    if table is not None:
        project_ratios(table)
        bmr = batch_mean_ratio(table, batch.t, config.train_timesteps)
    return StepResult(float(total.data), float(diff.data),
                      0.0 if rl is None else float(rl.data), bmr)


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced training timesteps, descending, first T-1 and last 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"need 1 <= steps <= T, got {steps}, {T}")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, steps)).astype(int)


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, cfg_scale: float) -> np.ndarray:
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond)


def sample(params: dict, config: ModelConfig, table: Optional[RatioTable], classes, *,
           steps: Optional[int] = None, cfg_scale: Optional[float] = None, seed: int = 0,
           schedule: Optional[NoiseSchedule] = None, rescale: bool = True) -> np.ndarray:
    """Ancestral DDPM sampling over a strided timestep subset with CFG.

    ``table`` must already be snapped; ``None`` samples the dense model.
    Returns images in [-1, 1].
    """
    if table is not None and not table.is_snapped():
        raise ValueError("sampling needs a snapped ratio table (see snap_for_inference)")
    steps = config.sample_steps if steps is None else steps
    cfg = config.cfg_scale if cfg_scale is None else cfg_scale
    schedule = schedule or make_schedule(config.train_timesteps)
    classes = np.atleast_1d(np.asarray(classes))
    n = classes.size
    null = np.full(n, config.classes)
    ys = np.concatenate([classes, null])
    gen = tc.Rng(seed).generator("sample")
    side = config.image_side
    x = gen.standard_normal((n, side, side))
    ts = sampling_timesteps(config.train_timesteps, steps)
    ab = schedule.alpha_bars
    for i, t in enumerate(ts):
        eps_both = model_forward(params, config, np.concatenate([x, x]), t, ys, ratios=table,
                                 mode="infer", rescale=rescale).data
        eps = guided_noise(eps_both[:n], eps_both[n:], cfg)
        ab_t = ab[t]
        ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = np.clip((x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t), -1.0, 1.0)
        beta = 1.0 - ab_t / ab_prev
        mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 \
            + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        if i + 1 < len(ts):
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            x = mean + np.sqrt(var) * gen.standard_normal(x.shape)
        else:
            x = mean
    return np.clip(x, -1.0, 1.0)


def region_schedule(config: ModelConfig, steps: Optional[int] = None) -> list[int]:
    """Region index used at each sampling step."""
    ts = sampling_timesteps(config.train_timesteps, steps or config.sample_steps)
    return [region_of_timestep(int(t), config.train_timesteps, config.regions) for t in ts]
