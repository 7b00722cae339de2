"""Quality oracle, step/quality rewards and the precomputed quality table."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import DdimConfig, sample_many
from .prompts import PromptDataset, PromptSpec, Universe

DEFAULT_MENU = (10, 20, 30, 40, 50)


@dataclass(frozen=True)
class QualityScore:
    alignment: float
    fidelity: float
    combined: float

    @classmethod
    def from_parts(cls, alignment: float, fidelity: float, w_a: float = 1.0,
                   w_f: float = 0.25) -> "QualityScore":
        return cls(alignment, fidelity, w_a * alignment - w_f * fidelity)


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 2.0
    gamma: float = 1.0
    k: int = 3
    menu: tuple[int, ...] = DEFAULT_MENU
    w_a: float = 1.0
    w_f: float = 0.25

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 1 <= self.k <= len(self.menu):
            raise ValueError(f"k must be in [1, {len(self.menu)}], got {self.k}")
        if list(self.menu) != sorted(set(self.menu)):
            raise ValueError(f"menu must be strictly increasing, got {self.menu}")

    @property
    def s_max(self) -> int:
        return max(self.menu)


def score_generation(samples, prompt: PromptSpec, universe: Universe = Universe(),
                     w_a: float = 1.0, w_f: float = 0.25) -> QualityScore:
    """Alignment is the mean of precision and coverage against the universe;
    the fidelity penalty is the mean squared distance to the nearest active
    center."""
    x = samples.x if hasattr(samples, "x") else np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot score an empty batch")
    return _score_arrays(x, np.asarray(prompt.components), universe.centers, w_a, w_f)


def _score_arrays(x: np.ndarray, active: np.ndarray, centers: np.ndarray, w_a: float,
                  w_f: float) -> QualityScore:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=1)
    is_active = np.zeros(centers.shape[0], dtype=bool)
    is_active[active] = True
    precision = float(is_active[nearest].mean())
    hit = np.zeros(centers.shape[0], dtype=bool)
    hit[nearest] = True
    coverage = float(hit[active].mean())
    fidelity = float(d2[:, active].min(axis=1).mean())
    return QualityScore.from_parts(0.5 * (precision + coverage), fidelity, w_a, w_f)


def step_reward(t: int, menu: Sequence[int] = DEFAULT_MENU) -> float:
    if t not in menu:
        raise ValueError(f"step {t} is not on the menu {tuple(menu)}")
    return 1.0 - t / max(menu)


def is_high_quality(row: dict[int, float], chosen: int, k: int) -> bool:
    """True when ``chosen`` ranks within the best ``k`` scores of the row.

    Rank is by descending score; equal scores rank the smaller step first.
    """
    if chosen not in row:
        raise ValueError(f"step {chosen} missing from row {sorted(row)}")
    order = sorted(row, key=lambda s: (-row[s], s))
    return order.index(chosen) < k


def reward(chosen: int, score: QualityScore | float, high: bool, cfg: RewardConfig) -> float:
    if not high:
        return -cfg.gamma
    q = score.combined if isinstance(score, QualityScore) else float(score)
    return step_reward(chosen, cfg.menu) + cfg.lam * q


def sequence_quality(per_frame: Sequence[QualityScore | float]) -> float:
    if len(per_frame) == 0:
        raise ValueError("need at least one frame")
    vals = [f.combined if isinstance(f, QualityScore) else float(f) for f in per_frame]
    return math.fsum(vals) / len(vals)


# quality table ----------------------------------------------------------------


@dataclass
class QualityTable:
    """Scores per (prompt id, step, seed) plus the metadata that produced them."""

    menu: tuple[int, ...]
    seeds: tuple[int, ...]
    w_a: float
    w_f: float
    cells: dict[tuple[int, int, int], QualityScore] = field(default_factory=dict)
    n_samples: int = 256

    def prompt_ids(self) -> list[int]:
        return sorted({pid for pid, _, _ in self.cells})

    def check_complete(self, prompt_ids: Sequence[int] | None = None) -> None:
        ids = self.prompt_ids() if prompt_ids is None else list(prompt_ids)
        missing = [(p, s, sd) for p in ids for s in self.menu for sd in self.seeds
                   if (p, s, sd) not in self.cells]
        if missing:
            raise ValueError(f"quality table has {len(missing)} holes, e.g. {missing[:3]}")

    def mean_score(self, pid: int, step: int) -> float:
        return math.fsum(self.cells[(pid, step, sd)].combined for sd in self.seeds) / len(self.seeds)

    def mean_parts(self, pid: int, step: int) -> tuple[float, float, float]:
        cells = [self.cells[(pid, step, sd)] for sd in self.seeds]
        n = len(cells)
        return (math.fsum(c.alignment for c in cells) / n, math.fsum(c.fidelity for c in cells) / n,
                math.fsum(c.combined for c in cells) / n)

    def row(self, pid: int) -> dict[int, float]:
        return {s: self.mean_score(pid, s) for s in self.menu}

    def score_matrix(self, prompt_ids: Sequence[int]) -> np.ndarray:
        """Seed-mean combined scores, shape ``(len(prompt_ids), len(menu))``."""
        return np.array([[self.mean_score(p, s) for s in self.menu] for p in prompt_ids])

    def reward_matrix(self, prompt_ids: Sequence[int], cfg: RewardConfig) -> np.ndarray:
        """Eq.-5 reward of every action for every prompt, ``(P, N)``."""
        if tuple(cfg.menu) != tuple(self.menu):
            raise ValueError("reward menu differs from the table menu")
        out = np.empty((len(prompt_ids), len(self.menu)))
        for i, pid in enumerate(prompt_ids):
            r = self.row(pid)
            for j, s in enumerate(self.menu):
                out[i, j] = reward(s, r[s], is_high_quality(r, s, cfg.k), cfg)
        return out

    # persistence -------------------------------------------------------------
    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("# menu " + " ".join(str(s) for s in self.menu) + "\n")
        buf.write("# seeds " + " ".join(str(s) for s in self.seeds) + "\n")
        buf.write(f"# weights {self.w_a:.17g} {self.w_f:.17g}\n")
        buf.write(f"# n_samples {self.n_samples}\n")
        buf.write("prompt_id step seed alignment fidelity combined\n")
        for (pid, step, seed) in sorted(self.cells):
            c = self.cells[(pid, step, seed)]
            buf.write(f"{pid} {step} {seed} {c.alignment:.17g} {c.fidelity:.17g} {c.combined:.17g}\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "QualityTable":
        lines = text.splitlines()
        header = {}
        body_start = None
        for i, line in enumerate(lines):
            if line.startswith("# "):
                key, _, rest = line[2:].partition(" ")
                header[key] = rest.split()
            else:
                body_start = i
                break
        if body_start is None or lines[body_start].split() != ["prompt_id", "step", "seed",
                                                               "alignment", "fidelity", "combined"]:
            raise ValueError("quality table is missing its column header")
        for key in ("menu", "seeds", "weights", "n_samples"):
            if key not in header:
                raise ValueError(f"quality table header lacks {key!r}")
        table = cls(tuple(int(s) for s in header["menu"]), tuple(int(s) for s in header["seeds"]),
                    float(header["weights"][0]), float(header["weights"][1]),
                    n_samples=int(header["n_samples"][0]))
        for line in lines[body_start + 1:]:
            if not line.strip():
                continue
            pid, step, seed, a, f, c = line.split()
            table.cells[(int(pid), int(step), int(seed))] = QualityScore(float(a), float(f), float(c))
        return table

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "QualityTable":
        return cls.loads(Path(path).read_text())


def generate_scores(denoiser, prompts: Sequence[PromptSpec], steps: Sequence[int],
                    seeds: Sequence[int], n: int, w_a: float = 1.0, w_f: float = 0.25,
                    chunk: int = 4, timings: dict | None = None) -> dict[tuple, QualityScore]:
    """Generate and score every (distinct prompt content, step, seed) cell.

    Results are keyed by ``(prompt.key, step, seed)``; prompts with the same
    content share one generation because z_T depends only on the seed.
    ``timings`` collects sampler seconds and generation counts per step.
    """
    import time

    unique: dict[tuple, PromptSpec] = {}
    for p in prompts:
        unique.setdefault(p.key, p)
    keys = list(unique)
    centers = denoiser.universe.centers
    out: dict[tuple, QualityScore] = {}
    for start in range(0, len(keys), chunk):
        block = [unique[k] for k in keys[start:start + chunk]]
        conds = denoiser.cond_embeds(block)
        for seed in seeds:
            for step in steps:
                tic = time.perf_counter()
                xs = sample_many(denoiser, conds, step, DdimConfig(eta=0.0, seed=seed), n=n)
                elapsed = time.perf_counter() - tic
                if timings is not None:
                    secs, count = timings.get(step, (0.0, 0))
                    timings[step] = (secs + elapsed, count + len(block))
                for p, x in zip(block, xs):
                    if not np.all(np.isfinite(x)):
                        raise RuntimeError(f"generation for prompt {p.id} at {step} steps is non-finite")
                    out[(p.key, step, seed)] = _score_arrays(x, np.asarray(p.components), centers, w_a, w_f)
    return out


def build_quality_table(corpus: PromptDataset | Sequence[PromptSpec], denoiser,
                        menu: Sequence[int] = DEFAULT_MENU, seeds: Sequence[int] = (0,),
                        n: int = 256, w_a: float = 1.0, w_f: float = 0.25,
                        timings: dict | None = None) -> QualityTable:
    """Score every prompt at every menu step for every seed.

    For one seed, all step counts (and all prompts) start from the same z_T.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    prompts = list(corpus)
    scores = generate_scores(denoiser, prompts, menu, seeds, n, w_a, w_f, timings=timings)
    table = QualityTable(tuple(menu), tuple(seeds), w_a, w_f, n_samples=n)
    for p in prompts:
        for step in menu:
            for seed in seeds:
                table.cells[(p.id, step, seed)] = scores[(p.key, step, seed)]
    table.check_complete([p.id for p in prompts])
    return table
