"""Step-selection network, categorical policy and REINFORCE trainer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric import AdamState, ParameterSet, adam_step, masked_mean, self_attention_block, value_and_grad
from .numeric.autodiff import d_log_softmax, d_take_rows, d_tanh
from .numeric.layers import init_attention, init_dense, softmax
from .prompts import PromptDataset, PromptSpec, pad_tokens
from .quality import DEFAULT_MENU, QualityTable, RewardConfig

log = logging.getLogger(__name__)


class PolicyDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectorArch:
    vocab_size: int = 24
    M: int = 8
    dim: int = 32
    hidden: int = 64
    layers: int = 3
    menu: tuple[int, ...] = DEFAULT_MENU


@dataclass
class Selector:
    params: ParameterSet
    arch: SelectorArch = field(default_factory=SelectorArch)

    @property
    def menu(self) -> tuple[int, ...]:
        return self.arch.menu


def init_selector(arch: SelectorArch = SelectorArch(), seed: int = 0) -> Selector:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    params.add("embed", rng.standard_normal((arch.vocab_size, arch.dim)))
    for i in range(arch.layers):
        for name, value in init_attention(rng, arch.dim, f"attn{i}").items():
            params.add(name, value)
    params.add("head.w1", init_dense(rng, arch.dim, arch.hidden))
    params.add("head.b1", np.zeros(arch.hidden))
    params.add("head.w2", init_dense(rng, arch.hidden, len(arch.menu)))
    params.add("head.b2", np.zeros(len(arch.menu)))
    return Selector(params, arch)


def selector_logits(params, ids: np.ndarray, mask: np.ndarray, arch: SelectorArch):
    """Embed -> attention stack -> masked mean-pool -> MLP; ``(B, N)`` logits."""
    h = d_take_rows(params["embed"], ids)
    for i in range(arch.layers):
        h = self_attention_block(h, params, prefix=f"attn{i}", mask=mask)
    pooled = masked_mean(h, mask)
    hidden = d_tanh(pooled @ params["head.w1"] + params["head.b1"])
    return hidden @ params["head.w2"] + params["head.b2"]


def _encode_batch(prompts: Sequence[PromptSpec], arch: SelectorArch) -> tuple[np.ndarray, np.ndarray]:
    ids, mask = pad_tokens(prompts, arch.M)
    if ids.max() >= arch.vocab_size:
        raise ValueError(f"token id {ids.max()} outside vocabulary of {arch.vocab_size}")
    return ids, mask


def policy_probs(selector: Selector, prompts: Sequence[PromptSpec]) -> np.ndarray:
    ids, mask = _encode_batch(prompts, selector.arch)
    return softmax(selector_logits(selector.params, ids, mask, selector.arch))


def forward_selector(selector: Selector, prompt: PromptSpec) -> np.ndarray:
    return policy_probs(selector, [prompt])[0]


@dataclass(frozen=True)
class Decision:
    probs: np.ndarray
    action: np.ndarray
    step: int
    log_prob: float
    mode: str
    prompt: PromptSpec | None = None

    @property
    def index(self) -> int:
        return int(np.argmax(self.action))


def _check_probs(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0 or not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError(f"not a probability vector: {s!r}")
    if abs(s.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {s.sum()}, not 1")
    return s


def _decision(s: np.ndarray, idx: int, menu, mode: str, prompt) -> Decision:
    action = np.zeros(len(s))
    action[idx] = 1.0
    return Decision(s, action, int(menu[idx]), math.log(s[idx]) if s[idx] > 0 else -math.inf, mode, prompt)


def sample_action(s, rng: np.random.Generator, menu: Sequence[int] = DEFAULT_MENU,
                  prompt: PromptSpec | None = None) -> Decision:
    """Inverse-CDF draw from Categorical(s) using one uniform variate."""
    s = _check_probs(s)
    u = rng.random()
    idx = _inverse_cdf(s, u)
    return _decision(s, idx, menu, "sampled", prompt)


def _inverse_cdf(s: np.ndarray, u: float) -> int:
    cdf = np.cumsum(s)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    idx = min(idx, len(s) - 1)
    # never land on a zero-probability action through rounding at the top
    while s[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx


def greedy_action(s, menu: Sequence[int] = DEFAULT_MENU, prompt: PromptSpec | None = None) -> Decision:
    """Most probable action; ``np.argmax`` returns the first (fewest-steps) tie."""
    s = _check_probs(s)
    return _decision(s, int(np.argmax(s)), menu, "greedy", prompt)


def greedy_steps(selector: Selector, prompts: Sequence[PromptSpec]) -> np.ndarray:
    probs = policy_probs(selector, prompts)
    return np.asarray(selector.menu)[np.argmax(probs, axis=1)]


# REINFORCE -----------------------------------------------------------------------


def _surrogate(leaves, ids, mask, actions, rewards, arch):
    logp = d_log_softmax(selector_logits(leaves, ids, mask, arch), axis=-1)
    B = len(actions)
    picked = logp[np.arange(B), actions]
    return (picked * rewards).sum() * (1.0 / B)


def surrogate_grad(selector: Selector, prompts: Sequence[PromptSpec], actions: np.ndarray,
                   rewards: np.ndarray) -> tuple[float, ParameterSet]:
    """Value and ascent gradient of ``mean_i R_i log pi(a_i | p_i)``."""
    ids, mask = _encode_batch(prompts, selector.arch)
    return value_and_grad(_surrogate, selector.params, ids, mask, np.asarray(actions, dtype=np.int64),
                          np.asarray(rewards, dtype=np.float64), selector.arch)


def reinforce_batch_grad(decisions: Sequence[Decision], rewards: Sequence[float],
                         selector: Selector) -> ParameterSet:
    """Monte-Carlo policy gradient for ascent; rewards are constants."""
    if len(decisions) != len(rewards):
        raise ValueError(f"{len(decisions)} decisions but {len(rewards)} rewards")
    if not decisions:
        raise ValueError("empty batch")
    if any(d.prompt is None for d in decisions):
        raise ValueError("decisions must carry their prompts")
    actions = np.array([d.index for d in decisions])
    return surrogate_grad(selector, [d.prompt for d in decisions], actions, np.asarray(rewards))[1]


def expected_reward(probs: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Per-prompt expectation of the reward matrix under the policy."""
    return (probs * rewards).sum(axis=1)


@dataclass(frozen=True)
class PolicyTrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-5
    seed: int = 0
    baseline: bool = False
    baseline_momentum: float = 0.9
    freeze_embedding: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")


@dataclass
class EpochLog:
    epoch: int
    mean_reward: float
    mean_steps: float
    histogram: tuple[int, ...]


def train_policy(corpus: PromptDataset | Sequence[PromptSpec], table: QualityTable,
                 cfg: PolicyTrainConfig = PolicyTrainConfig(),
                 reward_cfg: RewardConfig = RewardConfig(),
                 arch: SelectorArch | None = None, history: list | None = None,
                 init: Selector | None = None) -> Selector:
    """REINFORCE over seed-shuffled minibatches with rewards read from ``table``."""
    prompts = list(corpus)
    menu = tuple(table.menu)
    if tuple(reward_cfg.menu) != menu:
        raise ValueError("reward menu differs from the table menu")
    table.check_complete([p.id for p in prompts])
    M = corpus.M if isinstance(corpus, PromptDataset) else 8
    arch = arch or SelectorArch(vocab_size=3 * M, M=M, menu=menu)
    selector = init or init_selector(arch, cfg.seed)
    rewards_all = table.reward_matrix([p.id for p in prompts], reward_cfg)
    ids_all, mask_all = _encode_batch(prompts, arch)
    state = AdamState.for_params(selector.params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    running = 0.0
    params = selector.params
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prompts))
        total_r, total_steps, hist = 0.0, 0.0, np.zeros(len(menu), dtype=np.int64)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ids, mask = ids_all[idx], mask_all[idx]
            # trim padding to the longest prompt in this batch
            L = int(mask.sum(axis=1).max())
            ids, mask = ids[:, :L], mask[:, :L]
            drawn = {}

            def sampled_surrogate(leaves):
                # one forward pass serves both the action draw and the gradient
                logits = selector_logits(leaves, ids, mask, arch)
                probs = softmax(logits.value)
                u = rng.random(len(idx))
                acts = np.array([_inverse_cdf(p, ui) for p, ui in zip(probs, u)])
                r = rewards_all[idx, acts]
                drawn.update(actions=acts, r=r)
                logp = d_log_softmax(logits, axis=-1)
                picked = logp[np.arange(len(acts)), acts]
                return (picked * (r - running if cfg.baseline else r)).sum() * (1.0 / len(acts))

            try:
                # ParameterSet rejects non-finite gradients and updates
                with np.errstate(over="ignore", invalid="ignore"):
                    _, g = value_and_grad(sampled_surrogate, params)
                if cfg.freeze_embedding:
                    g["embed"] = np.zeros_like(g["embed"])
                params, state = adam_step(params, g.map(np.negative), state)
            except ValueError as exc:
                raise PolicyDiverged(f"policy update failed at epoch {epoch}: {exc}") from exc
            actions, r = drawn["actions"], drawn["r"]
            if cfg.baseline:
                running = cfg.baseline_momentum * running + (1 - cfg.baseline_momentum) * float(r.mean())
            total_r += float(r.sum())
            total_steps += float(np.asarray(menu)[actions].sum())
            hist += np.bincount(actions, minlength=len(menu))
        entry = EpochLog(epoch, total_r / len(prompts), total_steps / len(prompts), tuple(int(h) for h in hist))
        log.info("policy epoch %d reward %.4f steps %.2f hist %s", epoch, entry.mean_reward,
                 entry.mean_steps, entry.histogram)
        if history is not None:
            history.append(entry)
    return Selector(params, arch)


def optimality_gap(selector: Selector, prompts: Sequence[PromptSpec], table: QualityTable,
                   reward_cfg: RewardConfig) -> tuple[np.ndarray, np.ndarray]:
    """Expected reward of the policy and the brute-force best action reward per prompt."""
    R = table.reward_matrix([p.id for p in prompts], reward_cfg)
    probs = policy_probs(selector, prompts)
    return expected_reward(probs, R), R.max(axis=1)
