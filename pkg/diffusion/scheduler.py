"""
Noise schedule, deterministic DDIM sampling and DDIM inversion

Conventions:
    - linear betas over T train timesteps, alpha_bar = cumprod(1 - beta)
    - inference timesteps use trailing spacing, so the first (largest) is T-1
    - t = -1 denotes the fully denoised end point; its alpha_bar is alpha_bar[0],
      so sampling ends where inversion starts
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from app.config import ScheduleConfig
from app.exceptions import ScheduleError

logger = logging.getLogger(__name__)

EpsilonModel = Callable[[torch.Tensor, int], torch.Tensor]
FINAL_TIMESTEP = -1


def trailing_timesteps(T: int, steps: int) -> List[int]:
    """Strictly decreasing inference timesteps starting at T-1"""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must lie in [1, {T}], got {steps}")
    ts = np.round(np.arange(T, 0, -T / steps)).astype(np.int64) - 1
    return [int(t) for t in ts[:steps]]


@dataclass(frozen=True)
class NoiseSchedule:
    config: ScheduleConfig
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor
    inference_timesteps: Tuple[int, ...]

    @classmethod
    def from_config(cls, config: Optional[ScheduleConfig] = None, steps: Optional[int] = None) -> "NoiseSchedule":
        config = config or ScheduleConfig()
        if steps is not None and steps != config.steps:
            try:
                config = config.model_copy(update={"steps": steps})
                ScheduleConfig(**config.model_dump())
            except ValueError as e:
                raise ScheduleError(f"invalid step count {steps}: {e}") from e
        betas = torch.linspace(config.beta_start, config.beta_end, config.T, dtype=torch.float64)
        alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
        return cls(
            config=config,
            betas=betas,
            alphas_cumprod=alphas_cumprod,
            inference_timesteps=tuple(trailing_timesteps(config.T, config.steps)),
        )

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def steps(self) -> int:
        return len(self.inference_timesteps)

    @property
    def t_max(self) -> int:
        return self.inference_timesteps[0]

    def with_steps(self, steps: int) -> "NoiseSchedule":
        return NoiseSchedule.from_config(self.config, steps)

    def alpha_bar(self, t: int) -> float:
        if t == FINAL_TIMESTEP:
            return float(self.alphas_cumprod[0])
        if not 0 <= t < self.T:
            raise ScheduleError(f"timestep {t} out of range [0, {self.T})")
        return float(self.alphas_cumprod[t])

    def step_pairs(self) -> List[Tuple[int, int]]:
        """(t, t_prev) in denoising order, ending at t_prev = -1"""
        ts = list(self.inference_timesteps)
        return list(zip(ts, ts[1:] + [FINAL_TIMESTEP]))


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; `t` may be an int or a per-frame tensor"""
    if x0.shape != eps.shape:
        raise ScheduleError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    if isinstance(t, torch.Tensor) and t.numel() > 1:
        if t.min() < 0 or t.max() >= schedule.T:
            raise ScheduleError(f"timesteps out of range [0, {schedule.T})")
        ab = schedule.alphas_cumprod.to(x0.device)[t.long()].to(x0.dtype)
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    t = int(t)
    if not 0 <= t < schedule.T:
        raise ScheduleError(f"timestep {t} out of range [0, {schedule.T})")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _check_pair(t: int, t_prev: int):
    if not (t > t_prev and t_prev >= FINAL_TIMESTEP):
        raise ScheduleError(f"timestep pair must satisfy t > t_prev >= -1, got ({t}, {t_prev})")


def ddim_step(schedule: NoiseSchedule, x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update x_t -> x_{t_prev}"""
    _check_pair(t, t_prev)
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred


def ddim_inverse_step(
    schedule: NoiseSchedule, x_prev: torch.Tensor, eps: torch.Tensor, t_prev: int, t: int
) -> torch.Tensor:
    """Exact algebraic inverse of ddim_step for a given epsilon: x_{t_prev} -> x_t"""
    _check_pair(t, t_prev)
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    x0_hat = (x_prev - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
    return math.sqrt(ab_t) * x0_hat + math.sqrt(1.0 - ab_t) * eps


def _model_timestep(t: int) -> int:
    return max(t, 0)


def _predict(model: EpsilonModel, x: torch.Tensor, t: int) -> torch.Tensor:
    eps = model(x, _model_timestep(t))
    if eps.shape != x.shape:
        raise ScheduleError(f"model returned {tuple(eps.shape)} for input {tuple(x.shape)}")
    return eps


def ddim_invert(
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    model: EpsilonModel,
    steps: Optional[int] = None,
    refine_iters: int = 0,
    refine_tol: float = 1e-12,
    return_trajectory: bool = False,
) -> Union[torch.Tensor, Tuple[torch.Tensor, Dict[int, torch.Tensor]]]:
    """
    Map a clean latent to the largest inference timestep by running the DDIM
    recurrence in increasing-t order. Each step evaluates the model at the
    current (lower) timestep; `refine_iters` > 0 additionally re-solves each
    step by fixed-point iteration so epsilon is taken at the upper timestep,
    which makes inversion the exact inverse of ddim_sample.
    """
    if steps is not None:
        if steps < 1:
            raise ScheduleError(f"steps must be >= 1, got {steps}")
        schedule = schedule.with_steps(steps)

    ascending = list(reversed(schedule.inference_timesteps))
    lows = [FINAL_TIMESTEP] + ascending[:-1]
    trajectory: Dict[int, torch.Tensor] = {}
    x = x0
    for t_low, t_high in zip(lows, ascending):
        eps = _predict(model, x, t_low)
        x_next = ddim_inverse_step(schedule, x, eps, t_low, t_high)
        for _ in range(refine_iters):
            eps = _predict(model, x_next, t_high)
            x_new = ddim_inverse_step(schedule, x, eps, t_low, t_high)
            delta = float((x_new - x_next).abs().max()) if x_new.numel() else 0.0
            x_next = x_new
            if delta < refine_tol:
                break
        x = x_next
        trajectory[t_high] = x

    if return_trajectory:
        return x, trajectory
    return x


def ddim_sample(schedule: NoiseSchedule, x_T: torch.Tensor, model: EpsilonModel) -> torch.Tensor:
    """Run the full deterministic sampling chain from the largest inference timestep"""
    x = x_T
    for t, t_prev in schedule.step_pairs():
        x = ddim_step(schedule, x, _predict(model, x, t), t, t_prev)
    return x
