"""Noise schedules, the closed-form forward process and the DDIM sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# index used for "one step before the first plan timestep", where alpha_bar = 1
CLEAN_BOUNDARY = -1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at ``t``; the clean boundary ``-1`` maps to 1."""
        if t == CLEAN_BOUNDARY:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 2:
        raise ValueError("need at least two betas")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.empty_like(alphas)
    running = 1.0
    for i, a in enumerate(alphas):
        running = running * a
        alpha_bars[i] = running
    return NoiseSchedule(betas, alphas, alpha_bars)


def build_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return schedule_from_betas(np.linspace(beta_min, beta_max, T))


@dataclass
class LatentState:
    x: np.ndarray
    t: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError(f"latent batch must be (n >= 1, D), got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("latent state has non-finite entries")


def forward_diffuse(x0: LatentState | np.ndarray, t: int, noise: np.ndarray,
                    schedule: NoiseSchedule) -> LatentState:
    x = x0.x if isinstance(x0, LatentState) else np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x.shape:
        raise ValueError(f"noise shape {noise.shape} != data shape {x.shape}")
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    return LatentState(math.sqrt(ab) * x + math.sqrt(1.0 - ab) * noise, t)


@dataclass(frozen=True)
class StepPlan:
    S: int
    stride: int
    timesteps: tuple[int, ...]


def make_step_plan(T: int, S: int) -> StepPlan:
    """Timesteps ``j * ceil(T/S)`` for ``j < S``, clipped below ``T``."""
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    stride = -(-T // S)
    steps = [min(j * stride, T - 1) for j in range(S)]
    # Clipping can only collide at the top end; walk it back down so the
    # sequence stays strictly increasing (never happens for S dividing T).
    for j in range(S - 2, -1, -1):
        if steps[j] >= steps[j + 1]:
            steps[j] = steps[j + 1] - 1
    return StepPlan(S, stride, tuple(steps))


@dataclass(frozen=True)
class DdimConfig:
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


def ddim_sigma(t: int, t_prev: int, eta: float, schedule: NoiseSchedule) -> float:
    """sigma_t with the plan predecessor standing in for ``t - 1``."""
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    beta_eff = 1.0 - ab_t / ab_prev
    return math.sqrt(eta * beta_eff * (1.0 - ab_prev) / (1.0 - ab_t))


def ddim_step(x_t: LatentState | np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0,
              rng: np.random.Generator | None = None,
              plan: StepPlan | None = None) -> LatentState:
    """One DDIM update from ``t`` to the plan predecessor ``t_prev``."""
    if t_prev >= t:
        raise ValueError(f"DDIM steps run backwards in time: got t={t}, t_prev={t_prev}")
    if plan is not None:
        allowed = set(plan.timesteps)
        if t not in allowed or (t_prev != CLEAN_BOUNDARY and t_prev not in allowed):
            raise ValueError(f"timesteps ({t}, {t_prev}) are not in the step plan")
    x = x_t.x if isinstance(x_t, LatentState) else np.asarray(x_t, dtype=np.float64)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    sigma = ddim_sigma(t, t_prev, eta, schedule) if eta > 0.0 else 0.0
    direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + direction * eps_pred
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 needs a seeded generator")
        out = out + sigma * rng.standard_normal(x.shape)
    return LatentState(out, max(t_prev, 0))


NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


def initial_noise(seed: int, n: int, dim: int) -> np.ndarray:
    """z_T for a given seed; shared by every step count and prompt."""
    return np.random.default_rng([seed, 0]).standard_normal((n, dim))


def run_sampler(predict: NoisePredictor, z_T: np.ndarray, S: int, schedule: NoiseSchedule,
                cfg: DdimConfig = DdimConfig()) -> np.ndarray:
    """Iterate DDIM over the reversed step plan starting from ``z_T``.

    ``predict(x, t)`` returns the noise estimate for the whole batch.
    """
    plan = make_step_plan(schedule.T, S)
    rng = np.random.default_rng([cfg.seed, 1]) if cfg.eta > 0.0 else None
    x = np.asarray(z_T, dtype=np.float64)
    rev = plan.timesteps[::-1]
    for i, t in enumerate(rev):
        t_prev = rev[i + 1] if i + 1 < len(rev) else CLEAN_BOUNDARY
        eps = predict(x, t)
        x = ddim_step(x, eps, t, t_prev, schedule, cfg.eta, rng).x
    return x


def sample(denoiser, cond_embed: np.ndarray, S: int, cfg: DdimConfig = DdimConfig(),
           n: int = 256, schedule: NoiseSchedule | None = None) -> LatentState:
    """Draw ``n`` samples for one condition; the decoder is the identity.

    ``denoiser`` must expose ``predict(x, t, cond)``, ``data_dim`` and
    ``schedule`` (see :class:`adastep.denoiser.Denoiser`).
    """
    schedule = schedule or denoiser.schedule
    cond = np.asarray(cond_embed, dtype=np.float64)
    z_T = initial_noise(cfg.seed, n, denoiser.data_dim)
    conds = np.broadcast_to(cond, (n, cond.shape[-1]))
    x = run_sampler(lambda x, t: denoiser.predict(x, t, conds), z_T, S, schedule, cfg)
    return LatentState(x, 0)


def sample_many(denoiser, cond_embeds: np.ndarray, S: int, cfg: DdimConfig = DdimConfig(),
                n: int = 256, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Batched :func:`sample` over P conditions sharing z_T; returns ``(P, n, D)``."""
    schedule = schedule or denoiser.schedule
    conds = np.asarray(cond_embeds, dtype=np.float64)
    P = conds.shape[0]
    z_T = initial_noise(cfg.seed, n, denoiser.data_dim)
    big_z = np.tile(z_T, (P, 1))
    big_c = np.repeat(conds, n, axis=0)
    predict = denoiser.predictor(big_c) if hasattr(denoiser, "predictor") else (
        lambda x, t: denoiser.predict(x, t, big_c))
    x = run_sampler(predict, big_z, S, schedule, cfg)
    return x.reshape(P, n, -1)
