"""Diffusion noise schedule and timestep planning.

Owns the precomputed beta / alpha-bar / sigma tables, the closed-form
single-step forward noising, the stochastic reverse step kept as a
reference sampler, the consistency-function boundary coefficients used
by the few-step prediction update, and the spacing of the few inference
timesteps over the training range.

All operations are pure; ``DiffusionSchedule`` and ``TimestepPlan`` are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .util import freeze_array

DEFAULT_NUM_TRAIN_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012

# Boundary parameterization defaults, matching the common latent
# consistency-model convention.
DEFAULT_SIGMA_DATA = 0.5
DEFAULT_TIMESTEP_SCALE = 10.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step schedule tables.

    Attributes:
        num_train_steps: total number of training timesteps T.
        beta:      per-step variances, each in (0, 1).
        alpha_bar: cumulative products of (1 - beta), strictly decreasing.
        sigma:     posterior noise scales for the reference reverse step.
    """

    num_train_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def validate_timestep(self, t: int) -> None:
        if not 0 <= t < self.num_train_steps:
            raise ValueError(
                f"timestep {t} outside schedule range [0, {self.num_train_steps - 1}]"
            )


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing inference timesteps.

    ``strength`` in (0, 1] caps the largest timestep at
    round(strength * (num_train_steps - 1)).
    """

    steps: tuple[int, ...]
    strength: float


def build_schedule(
    num_train_steps: int = DEFAULT_NUM_TRAIN_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Build a scaled-linear schedule with consistent derived tables.

    Betas interpolate sqrt(beta) linearly between the two bounds and
    square the result. ``sigma[t]`` is the standard posterior scale
    sqrt(beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)), with
    alpha_bar_{-1} taken as 1 so sigma[0] = 0.
    """
    if num_train_steps < 1:
        raise ValueError(f"num_train_steps must be >= 1, got {num_train_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"beta bounds must satisfy 0 < beta_start < beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )

    beta = (
        np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_train_steps) ** 2
    )
    alpha_bar = np.cumprod(1.0 - beta)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))

    if not np.all((alpha_bar > 0.0) & (alpha_bar < 1.0)):
        raise ValueError("alpha_bar left (0, 1); beta bounds too aggressive")

    return DiffusionSchedule(
        num_train_steps=num_train_steps,
        beta=freeze_array(beta),
        alpha_bar=freeze_array(alpha_bar),
        sigma=freeze_array(sigma),
    )


def forward_noise(
    z0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Single-step forward noising: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    schedule.validate_timestep(t)
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddpm_reverse_step(
    zt: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    noise: np.ndarray,
    schedule: DiffusionSchedule,
) -> np.ndarray:
    """Stochastic reverse step, kept as a reference/probe sampler.

    The production loop uses re-noise plus direct clean-latent prediction
    instead; this path exists for cross-checks.
    """
    if t < 1:
        raise ValueError("reverse step undefined at t=0 (no posterior)")
    schedule.validate_timestep(t)
    zt = np.asarray(zt, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if zt.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: zt {zt.shape} vs eps_pred {eps_pred.shape}")
    if zt.shape != noise.shape:
        raise ValueError(f"shape mismatch: zt {zt.shape} vs noise {noise.shape}")
    beta = schedule.beta[t]
    ab = schedule.alpha_bar[t]
    mean = (zt - beta / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(1.0 - beta)
    return mean + schedule.sigma[t] * noise


def consistency_boundary(
    t: int,
    sigma_data: float = DEFAULT_SIGMA_DATA,
    timestep_scale: float = DEFAULT_TIMESTEP_SCALE,
) -> tuple[float, float]:
    """Skip/out coefficients of the consistency combine at timestep t.

    c_skip(t) = sigma_data^2 / ((scale*t)^2 + sigma_data^2)
    c_out(t)  = (scale*t) / sqrt((scale*t)^2 + sigma_data^2)

    At t=0 this is exactly (1, 0), so the combine returns its input
    unchanged. c_skip decreases strictly in t and c_skip + c_out^2 = 1.
    """
    if sigma_data <= 0:
        raise ValueError(f"sigma_data must be > 0, got {sigma_data}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    scaled = timestep_scale * t
    denom = scaled * scaled + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / denom
    c_out = scaled / math.sqrt(denom)
    return c_skip, c_out


def plan_timesteps(
    num_steps: int, strength: float, schedule: DiffusionSchedule
) -> TimestepPlan:
    """Evenly spaced, strictly decreasing timesteps ending at 0.

    The largest timestep is round(strength * (num_train_steps - 1)); the
    smallest is 0, where the final prediction is made.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < strength <= 1.0):
        raise ValueError(f"strength must be in (0, 1], got {strength}")

    t_max = round(strength * (schedule.num_train_steps - 1))
    if num_steps > t_max + 1:
        raise ValueError(
            f"num_steps={num_steps} exceeds the {t_max + 1} distinct "
            f"timesteps available at strength={strength}"
        )
    raw = np.linspace(t_max, 0, num_steps)
    steps = tuple(int(round(v)) for v in raw)
    if len(set(steps)) != len(steps):
        raise ValueError(f"timestep plan has duplicates after rounding: {steps}")
    return TimestepPlan(steps=steps, strength=strength)
