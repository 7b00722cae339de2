"""Conditional noise predictor and its regression training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, build_linear_schedule
from .numeric import AdamState, ParameterSet, adam_step, value_and_grad
from .numeric.autodiff import d_concat, d_silu
from .numeric.layers import init_dense
from .prompts import PromptDataset, PromptSpec, Universe, bag_of_tokens, target_distribution

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def embed_timestep(t, dim: int, T: int = 1000) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at geometrically spaced frequencies.

    Returns ``(dim,)`` for a scalar ``t`` or ``(n, dim)`` for an array; the
    first half are sines, the second half cosines.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise ValueError(f"timestep outside [0, {T})")
    freqs = T * np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = (t_arr[..., None] / T) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass(frozen=True)
class DenoiserArch:
    data_dim: int = 2
    temb_dim: int = 32
    cond_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)
    vocab_size: int = 24
    M: int = 8


def init_denoiser_params(arch: DenoiserArch, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    params.add("embed", rng.standard_normal((arch.vocab_size, arch.cond_dim)))
    width = arch.data_dim + arch.temb_dim + arch.cond_dim
    for i, h in enumerate(arch.hidden):
        params.add(f"l{i}.w", init_dense(rng, width, h))
        params.add(f"l{i}.b", np.zeros(h))
        width = h
    params.add("out.w", init_dense(rng, width, arch.data_dim, gain=0.1))
    params.add("out.b", np.zeros(arch.data_dim))
    return params


def mlp_forward(params, x, temb, cond, n_hidden: int):
    """Shared forward pass; works on arrays or autodiff leaves."""
    h = d_concat([x, temb, cond], axis=-1)
    for i in range(n_hidden):
        h = d_silu(h @ params[f"l{i}.w"] + params[f"l{i}.b"])
    return h @ params["out.w"] + params["out.b"]


@dataclass
class Denoiser:
    """Frozen epsilon-predictor bundled with its schedule and vocabulary."""

    params: ParameterSet
    arch: DenoiserArch = field(default_factory=DenoiserArch)
    schedule: NoiseSchedule = field(default_factory=build_linear_schedule)
    universe: Universe = field(default_factory=Universe)

    @property
    def data_dim(self) -> int:
        return self.arch.data_dim

    def cond_embed(self, prompt: PromptSpec) -> np.ndarray:
        ids = prompt.tokens(self.arch.M)
        if max(ids) >= self.arch.vocab_size:
            raise ValueError(f"token ids {ids} outside vocabulary of {self.arch.vocab_size}")
        return self.params["embed"][ids].mean(axis=0)

    def cond_embeds(self, prompts) -> np.ndarray:
        return bag_of_tokens(prompts, self.arch.vocab_size, self.arch.M) @ self.params["embed"]

    def predict(self, x: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        return predict_noise(self.params, x, t, cond, self.arch, self.schedule.T)

    def predictor(self, conds: np.ndarray):
        """``predict(x, t)`` for fixed per-row conditions, as used by the sampler.

        The condition's share of the first layer is computed once instead of
        at every step; the result matches :meth:`predict` up to rounding.
        """
        arch, p = self.arch, self.params
        conds = np.asarray(conds, dtype=np.float64)
        if conds.ndim != 2 or conds.shape[1] != arch.cond_dim:
            raise ValueError(f"conditions must be (n, {arch.cond_dim}), got {conds.shape}")
        d, e = arch.data_dim, arch.temb_dim
        w0 = p["l0.w"]
        cond_part = conds @ w0[d + e:] + p["l0.b"]
        n_hidden = len(arch.hidden)

        def predict(x, t):
            x = np.asarray(x, dtype=np.float64)
            if x.shape != (conds.shape[0], d):
                raise ValueError(f"x_t must be ({conds.shape[0]}, {d}), got {x.shape}")
            h = x @ w0[:d]
            h += cond_part
            h += embed_timestep(t, e, self.schedule.T) @ w0[d:d + e]
            h = d_silu(h)
            for i in range(1, n_hidden):
                h = h @ p[f"l{i}.w"]
                h += p[f"l{i}.b"]
                h = d_silu(h)
            return h @ p["out.w"] + p["out.b"]

        return predict


def predict_noise(params: ParameterSet, x_t, t, cond_embed, arch: DenoiserArch = DenoiserArch(),
                  T: int = 1000) -> np.ndarray:
    x = x_t.x if hasattr(x_t, "x") else np.asarray(x_t, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.data_dim:
        raise ValueError(f"x_t must be (n, {arch.data_dim}), got {x.shape}")
    n = x.shape[0]
    cond = np.asarray(cond_embed, dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (n, cond.shape[0]))
    if cond.shape != (n, arch.cond_dim):
        raise ValueError(f"condition must be ({n}, {arch.cond_dim}), got {cond.shape}")
    temb = embed_timestep(t, arch.temb_dim, T)
    temb = np.broadcast_to(temb, (n, arch.temb_dim))
    return mlp_forward(params, x, temb, cond, len(arch.hidden))


def mse_loss(leaves, x_t, temb, bag, eps, n_hidden: int):
    cond = bag @ leaves["embed"]
    pred = mlp_forward(leaves, x_t, temb, cond, n_hidden)
    diff = pred - eps
    return (diff * diff).mean()


@dataclass(frozen=True)
class DenoiserTrainConfig:
    epochs: int = 60
    steps_per_epoch: int = 100
    batch_size: int = 512
    lr: float = 2e-3
    final_lr_fraction: float = 0.05
    seed: int = 0
    temb_dim: int = 32

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "temb_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class _TargetSampler:
    """Vectorised draws of x0 from many prompts' target mixtures."""

    def __init__(self, prompts, universe: Universe):
        self.centers = universe.centers
        K = max(len(p.components) for p in prompts)
        self.comp = np.zeros((len(prompts), K), dtype=np.int64)
        self.var = np.ones((len(prompts), K))
        self.count = np.zeros(len(prompts), dtype=np.int64)
        for i, p in enumerate(prompts):
            mix = target_distribution(p, universe)
            k = len(p.components)
            self.comp[i, :k] = p.components
            self.var[i, :k] = mix.variances
            self.count[i] = k

    def draw(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        pick = np.floor(rng.random(len(idx)) * self.count[idx]).astype(np.int64)
        comp = self.comp[idx, pick]
        std = np.sqrt(self.var[idx, pick])
        return self.centers[comp] + std[:, None] * rng.standard_normal((len(idx), self.centers.shape[1]))


def train_denoiser(corpus: PromptDataset, cfg: DenoiserTrainConfig = DenoiserTrainConfig(),
                   schedule: NoiseSchedule | None = None, universe: Universe | None = None,
                   hidden: tuple[int, ...] = (128, 128, 128), cond_dim: int = 32,
                   history: list | None = None) -> Denoiser:
    """Fit the noise predictor by MSE regression on fresh (x0, t, eps) draws.

    Every step draws prompts uniformly from ``corpus``, ``x0`` from the
    prompt's target mixture, ``t`` uniformly and standard-normal noise. The
    learning rate follows a cosine decay to ``final_lr_fraction``. Per-epoch
    mean losses are appended to ``history`` when given.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    schedule = schedule or build_linear_schedule()
    universe = universe or Universe(M=corpus.M)
    arch = DenoiserArch(data_dim=universe.dim, temb_dim=cfg.temb_dim, cond_dim=cond_dim,
                        hidden=tuple(hidden), vocab_size=universe.vocab_size, M=universe.M)
    params = init_denoiser_params(arch, cfg.seed)
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    prompts = list(corpus.prompts)
    bags = bag_of_tokens(prompts, arch.vocab_size, arch.M)
    targets = _TargetSampler(prompts, universe)
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)
    total = cfg.epochs * cfg.steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            idx = rng.integers(len(prompts), size=cfg.batch_size)
            x0 = targets.draw(idx, rng)
            t = rng.integers(schedule.T, size=cfg.batch_size)
            eps = rng.standard_normal(x0.shape)
            x_t = sqrt_ab[t, None] * x0 + sqrt_1mab[t, None] * eps
            temb = embed_timestep(t, arch.temb_dim, schedule.T)
            frac = step / max(total - 1, 1)
            lr = cfg.lr * (cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
            try:
                # ParameterSet rejects non-finite gradients and updates
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = value_and_grad(mse_loss, params, x_t, temb, bags[idx], eps, len(arch.hidden))
                if not math.isfinite(loss):
                    raise ValueError(f"loss is {loss}")
                params, state = adam_step(params, grads, state, lr=lr)
            except ValueError as exc:
                raise TrainingDiverged(f"denoiser training diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss)
            step += 1
        mean_loss = float(np.mean(losses))
        log.info("denoiser epoch %d loss %.6f", epoch, mean_loss)
        if history is not None:
            history.append(mean_loss)
    return Denoiser(params, arch, schedule, universe)


def evaluation_loss(denoiser: Denoiser, corpus: PromptDataset, n: int = 4096, seed: int = 0) -> float:
    """MSE of the frozen predictor on a fixed, seeded set of triples."""
    rng = np.random.default_rng([seed, 11])
    prompts = list(corpus.prompts)
    idx = rng.integers(len(prompts), size=n)
    x0 = _TargetSampler(prompts, denoiser.universe).draw(idx, rng)
    t = rng.integers(denoiser.schedule.T, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = denoiser.schedule.alpha_bars[t, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    conds = denoiser.cond_embeds([prompts[i] for i in idx])
    temb = embed_timestep(t, denoiser.arch.temb_dim, denoiser.schedule.T)
    pred = mlp_forward(denoiser.params, x_t, temb, conds, len(denoiser.arch.hidden))
    return float(np.mean((pred - eps) ** 2))
