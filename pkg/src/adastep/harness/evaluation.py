"""Evaluation arms (fixed, random, adaptive), policy analysis, transfer and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from ..diffusion import DdimConfig, sample_many
from ..policy import PolicyTrainConfig, Selector, SelectorArch, greedy_steps, train_policy
from ..prompts import PromptDataset, PromptSpec
from ..quality import QualityScore, QualityTable, RewardConfig, generate_scores

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("arm", "mean_steps", "mean_seconds", "mean_quality", "std_quality",
                  "mean_alignment", "mean_fidelity", "prompts")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class Evaluator:
    """Scores (prompt content, step, seed) cells on demand and caches them.

    Generations depend only on prompt content, step count and seed, so a
    cached cell is exact; seeding the cache from a quality table built with
    the same sample count and seeds avoids regenerating anything.
    """

    def __init__(self, denoiser, n: int = 256, seeds: Sequence[int] = (0,), w_a: float = 1.0,
                 w_f: float = 0.25):
        self.denoiser = denoiser
        self.n = n
        self.seeds = tuple(seeds)
        self.w_a, self.w_f = w_a, w_f
        self.cache: dict[tuple, QualityScore] = {}
        self.seconds_per_generation: dict[int, float] = {}

    def absorb(self, table: QualityTable, prompts: Sequence[PromptSpec]) -> None:
        if table.n_samples != self.n or tuple(table.seeds) != self.seeds:
            raise ValueError("table was built with a different sample count or seed list")
        for p in prompts:
            for step in table.menu:
                for seed in self.seeds:
                    self.cache[(p.key, step, seed)] = table.cells[(p.id, step, seed)]

    def ensure(self, prompts: Sequence[PromptSpec], steps: Sequence[int]) -> None:
        by_step: dict[int, dict[tuple, PromptSpec]] = {}
        for p, s in zip(prompts, steps):
            if any((p.key, int(s), sd) not in self.cache for sd in self.seeds):
                by_step.setdefault(int(s), {})[p.key] = p
        for s, todo in sorted(by_step.items()):
            self.cache.update(generate_scores(self.denoiser, list(todo.values()), [s], self.seeds,
                                              self.n, self.w_a, self.w_f))

    def score(self, prompt: PromptSpec, step: int) -> tuple[float, float, float]:
        cells = [self.cache[(prompt.key, int(step), sd)] for sd in self.seeds]
        k = len(cells)
        return (math.fsum(c.alignment for c in cells) / k, math.fsum(c.fidelity for c in cells) / k,
                math.fsum(c.combined for c in cells) / k)

    def measure_timing(self, prompts: Sequence[PromptSpec], menu: Sequence[int], seed: int = 0) -> None:
        """Seconds per generation for each step count, timed around the sampler only."""
        conds = self.denoiser.cond_embeds(list(prompts))
        for s in menu:
            tic = time.perf_counter()
            sample_many(self.denoiser, conds, int(s), DdimConfig(eta=0.0, seed=seed), n=self.n)
            self.seconds_per_generation[int(s)] = (time.perf_counter() - tic) / len(prompts)


@dataclass
class EvalRow:
    arm: str
    mean_steps: float
    mean_seconds: float
    mean_quality: float
    std_quality: float
    mean_alignment: float
    mean_fidelity: float
    prompts: int

    def values(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    seeds: tuple[int, ...] = (0,)
    digest: str = ""

    def row(self, arm: str) -> EvalRow:
        for r in self.rows:
            if r.arm == arm:
                return r
        raise KeyError(arm)

    def to_csv(self, timing: bool = False) -> str:
        """Columnar text; wall-clock columns only when ``timing`` is set,
        so the default output is a pure function of config and seeds."""
        cols = [c for c in REPORT_COLUMNS if timing or c != "mean_seconds"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([fmt(getattr(r, c)) for c in cols])
        return buf.getvalue()

    def to_text(self) -> str:
        head = (f"{'arm':<18} {'steps':>7} {'s/gen':>9} {'quality':>11} {'std':>10} {'align':>7} "
                f"{'fidelity':>10} {'n':>6}")
        lines = [f"seeds {list(self.seeds)}  config {self.digest[:12]}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.arm:<18} {r.mean_steps:>7.2f} {r.mean_seconds:>9.5f} {r.mean_quality:>11.4f} "
                         f"{r.std_quality:>10.4f} {r.mean_alignment:>7.4f} {r.mean_fidelity:>10.4f} "
                         f"{r.prompts:>6d}")
        return "\n".join(lines) + "\n"

    def save(self, directory: str | Path, stem: str = "report") -> None:
        d = Path(directory)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}_timing.csv").write_text(self.to_csv(timing=True))
        (d / f"{stem}.txt").write_text(self.to_text())


def _aggregate(arm: str, prompts: Sequence[PromptSpec], steps: Sequence[int], ev: Evaluator) -> EvalRow:
    if len(prompts) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    ev.ensure(prompts, steps)
    parts = np.array([ev.score(p, s) for p, s in zip(prompts, steps)])
    secs = [ev.seconds_per_generation.get(int(s), math.nan) for s in steps]
    return EvalRow(arm, math.fsum(int(s) for s in steps) / len(steps), float(np.mean(secs)),
                   math.fsum(parts[:, 2]) / len(prompts), float(parts[:, 2].std()),
                   math.fsum(parts[:, 0]) / len(prompts), math.fsum(parts[:, 1]) / len(prompts),
                   len(prompts))


def _average_rows(arm: str, rows: Sequence[EvalRow]) -> EvalRow:
    vals = {c: math.fsum(getattr(r, c) for r in rows) / len(rows) for c in REPORT_COLUMNS[1:-1]}
    return EvalRow(arm, prompts=rows[0].prompts, **vals)


def run_fixed_baseline(corpus, ev: Evaluator, S: int) -> EvalRow:
    prompts = list(corpus)
    return _aggregate(f"fixed-{S}", prompts, [S] * len(prompts), ev)


def run_random_baseline(corpus, ev: Evaluator, menu: Sequence[int], runs: int = 5,
                        seed: int = 0) -> EvalRow:
    """Uniform step per prompt per run; metrics averaged over runs."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    prompts = list(corpus)
    rows = []
    for run in range(runs):
        rng = np.random.default_rng([seed, 5, run])
        steps = np.asarray(menu)[rng.integers(len(menu), size=len(prompts))]
        rows.append(_aggregate("random", prompts, steps, ev))
    return _average_rows("random", rows)


def run_matched_random(corpus, ev: Evaluator, steps: Sequence[int], runs: int = 5,
                       seed: int = 0) -> EvalRow:
    """Random allocation with the same step histogram as ``steps``.

    Each run shuffles the given steps across prompts, so mean steps match
    exactly and only the per-prompt assignment differs.
    """
    prompts = list(corpus)
    if len(steps) != len(prompts):
        raise ValueError("need one step per prompt")
    rows = []
    for run in range(runs):
        rng = np.random.default_rng([seed, 6, run])
        rows.append(_aggregate("random-matched", prompts, rng.permutation(np.asarray(steps)), ev))
    return _average_rows("random-matched", rows)


def run_adaptive(corpus, ev: Evaluator, selector: Selector,
                 arm: str = "adaptive") -> tuple[EvalRow, list[tuple[int, int]]]:
    """Greedy step per prompt; also returns (richness, chosen step) pairs."""
    prompts = list(corpus)
    steps = [int(s) for s in greedy_steps(selector, prompts)]
    row = _aggregate(arm, prompts, steps, ev)
    return row, [(p.richness, s) for p, s in zip(prompts, steps)]


# analysis -------------------------------------------------------------------


@dataclass(frozen=True)
class Bucket:
    lo: int
    hi: int
    count: int
    mean_steps: float

    @property
    def label(self) -> str:
        return str(self.lo) if self.lo == self.hi else f"{self.lo}-{self.hi}"


@dataclass(frozen=True)
class PolicyAnalysis:
    buckets: tuple[Bucket, ...]
    spearman: float | None

    @property
    def non_decreasing(self) -> bool:
        means = [b.mean_steps for b in self.buckets]
        return all(a <= b for a, b in zip(means, means[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "count", "mean_steps"])
        for b in self.buckets:
            w.writerow([b.label, b.count, fmt(b.mean_steps)])
        w.writerow(["spearman", "", "undefined" if self.spearman is None else fmt(self.spearman)])
        return buf.getvalue()


def analyze_policy(pairs: Sequence[tuple[int, int]],
                   buckets: Sequence[tuple[int, int]] | None = None) -> PolicyAnalysis:
    """Mean chosen steps per richness bucket plus Spearman's rho.

    ``buckets`` are inclusive richness ranges; by default one per observed
    richness. Empty buckets are left out. Rho is ``None`` when either
    variable is constant.
    """
    if len(pairs) == 0:
        raise ValueError("no (richness, step) pairs to analyse")
    r = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs], dtype=np.float64)
    if buckets is None:
        buckets = [(int(v), int(v)) for v in np.unique(r)]
    out = []
    for lo, hi in buckets:
        sel = (r >= lo) & (r <= hi)
        if sel.any():
            out.append(Bucket(lo, hi, int(sel.sum()), math.fsum(s[sel]) / int(sel.sum())))
    rho = None
    if np.unique(r).size > 1 and np.unique(s).size > 1:
        rho = float(stats.spearmanr(r, s).statistic)
    return PolicyAnalysis(tuple(out), rho)


# transfer and sweeps --------------------------------------------------------


def transfer_eval(selector: Selector, corpus_b: PromptDataset, ev: Evaluator) -> EvalRow:
    """Zero-shot greedy evaluation of a trained selector on another corpus."""
    arch = selector.arch
    if getattr(corpus_b, "M", arch.M) != arch.M:
        raise ValueError(f"corpus universe M={corpus_b.M} differs from the selector's M={arch.M}")
    for p in corpus_b:
        if max(p.tokens(arch.M)) >= arch.vocab_size:
            raise ValueError(f"prompt {p.id} uses tokens outside the selector's vocabulary")
    return run_adaptive(corpus_b, ev, selector, arm="transfer")[0]


@dataclass(frozen=True)
class SweepPoint:
    axis: str
    value: float
    mean_steps: float
    mean_quality: float


def sweep(axis: str, values: Sequence[float], train: PromptDataset, train_table: QualityTable,
          test: PromptDataset, ev: Evaluator, policy_cfg: PolicyTrainConfig,
          reward_cfg: RewardConfig, arch: SelectorArch | None = None) -> list[SweepPoint]:
    """Retrain the selector for each value of ``k`` or ``lam`` on the cached table."""
    if axis not in ("k", "lam"):
        raise ValueError(f"sweep axis must be 'k' or 'lam', got {axis!r}")
    points = []
    for v in values:
        if axis == "k" and not float(v).is_integer():
            log.warning("skipping k=%r: not an integer", v)
            continue
        try:
            rcfg = dataclasses.replace(reward_cfg, **{axis: int(v) if axis == "k" else float(v)})
        except (ValueError, TypeError) as exc:
            log.warning("skipping %s=%r: %s", axis, v, exc)
            continue
        selector = train_policy(train, train_table, policy_cfg, rcfg, arch=arch)
        row, _ = run_adaptive(test, ev, selector)
        points.append(SweepPoint(axis, float(v), row.mean_steps, row.mean_quality))
        log.info("sweep %s=%s mean steps %.2f quality %.4f", axis, v, row.mean_steps, row.mean_quality)
    return points


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "mean_steps", "mean_quality"])
    for p in points:
        w.writerow([p.axis, fmt(p.value), fmt(p.mean_steps), fmt(p.mean_quality)])
    return buf.getvalue()
