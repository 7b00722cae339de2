"""Synthetic prompt corpus standing in for captions.

A prompt activates a subset of M mixture components laid out on a circle and
may attach a spread modifier ("tight" or "wide") to some of them. Its token
set is what the condition encoders see; its richness is the token count.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATTRIBUTES = ("tight", "wide")
ATTRIBUTE_SCALE = {"tight": 0.5, "wide": 2.0}


@dataclass(frozen=True)
class Universe:
    M: int = 8
    radius: float = 4.0
    base_var: float = 0.25
    dim: int = 2

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"universe needs M >= 2 components, got {self.M}")
        if self.dim != 2:
            raise ValueError("components are laid out on a circle; dim must be 2")

    @property
    def centers(self) -> np.ndarray:
        angle = 2.0 * np.pi * np.arange(self.M) / self.M
        return self.radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)

    @property
    def vocab_size(self) -> int:
        # component tokens [0, M) then (tight, wide) per component
        return 3 * self.M


@dataclass(frozen=True)
class PromptSpec:
    id: int
    components: tuple[int, ...]
    attributes: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if not self.components:
            raise ValueError("a prompt needs at least one active component")
        if len(set(self.components)) != len(self.components):
            raise ValueError(f"duplicate components in {self.components}")
        object.__setattr__(self, "components", tuple(sorted(self.components)))
        seen = set()
        for comp, attr in self.attributes:
            if comp not in self.components:
                raise ValueError(f"attribute on inactive component {comp}")
            if attr not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {attr!r}")
            if comp in seen:
                raise ValueError(f"component {comp} has two attributes")
            seen.add(comp)
        object.__setattr__(self, "attributes", tuple(sorted(self.attributes)))

    @property
    def richness(self) -> int:
        return richness(self)

    @property
    def key(self) -> tuple:
        """Content identity, independent of the prompt id."""
        return (self.components, self.attributes)

    def tokens(self, M: int) -> list[int]:
        ids = list(self.components)
        ids += [M + 2 * comp + ATTRIBUTES.index(attr) for comp, attr in self.attributes]
        return ids


def richness(prompt: PromptSpec) -> int:
    return len(prompt.components) + len(prompt.attributes)


@dataclass
class PromptDataset:
    prompts: list[PromptSpec]
    split: str = "train"
    seed: int = 0
    M: int = 8
    family: str = "base"

    def __post_init__(self):
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ValueError("prompt ids must be unique")

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def __getitem__(self, i):
        return self.prompts[i]

    def richness_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for p in self.prompts:
            hist[p.richness] = hist.get(p.richness, 0) + 1
        return dict(sorted(hist.items()))


def _feasible_component_counts(r: int, M: int, max_attributes: int) -> list[int]:
    # k components plus a = r - k attributes, 0 <= a <= min(k, max_attributes)
    return [k for k in range(1, M + 1) if 0 <= r - k <= min(k, max_attributes)]


def generate_prompt_corpus(M: int = 8, size: int = 1000, richness_range: tuple[int, int] = (1, 8),
                           seed: int = 0, split: str = "train", family: str = "base",
                           id_offset: int = 0, max_attributes: int | None = None) -> PromptDataset:
    """Sample ``size`` prompts with richness uniform over ``richness_range``.

    For a drawn richness r the component count is uniform over the feasible
    values, components are a uniform subset and attributes go to a uniform
    subset of the active components.
    """
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    max_attributes = M if max_attributes is None else max_attributes
    lo, hi = richness_range
    if not 1 <= lo <= hi <= M + max_attributes:
        raise ValueError(f"richness range {richness_range} infeasible for M={M}")
    for r in range(lo, hi + 1):
        if not _feasible_component_counts(r, M, max_attributes):
            raise ValueError(f"richness {r} cannot be realised")
    rng = np.random.default_rng(seed)
    prompts = []
    for i in range(size):
        r = int(rng.integers(lo, hi + 1))
        counts = _feasible_component_counts(r, M, max_attributes)
        k = counts[int(rng.integers(len(counts)))]
        comps = sorted(int(c) for c in rng.choice(M, size=k, replace=False))
        tagged = rng.choice(comps, size=r - k, replace=False) if r > k else []
        attrs = tuple((int(c), ATTRIBUTES[int(rng.integers(2))]) for c in sorted(tagged))
        prompts.append(PromptSpec(id_offset + i, tuple(comps), attrs))
    return PromptDataset(prompts, split, seed, M, family)


def generate_splits(M: int, n_train: int, n_test: int, richness_range=(1, 8), seed: int = 0,
                    family: str = "base") -> tuple[PromptDataset, PromptDataset]:
    """Train and test corpora with disjoint id ranges and independent streams."""
    train = generate_prompt_corpus(M, n_train, richness_range, seed=seed, split="train",
                                   family=family, id_offset=0)
    test = generate_prompt_corpus(M, n_test, richness_range, seed=seed + 1_000_003, split="test",
                                  family=family, id_offset=n_train)
    return train, test


@dataclass(frozen=True)
class TargetMixture:
    centers: np.ndarray
    variances: np.ndarray
    weights: np.ndarray = field(repr=False)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.centers.shape[1]))
        x = self.centers[labels] + np.sqrt(self.variances[labels])[:, None] * noise
        return x, labels


def target_distribution(prompt: PromptSpec, universe: Universe = Universe()) -> TargetMixture:
    if max(prompt.components) >= universe.M:
        raise ValueError(f"component outside universe of size {universe.M}")
    attrs = dict(prompt.attributes)
    centers = universe.centers[list(prompt.components)]
    variances = np.array(
        [universe.base_var * ATTRIBUTE_SCALE.get(attrs.get(c, ""), 1.0) for c in prompt.components]
    )
    weights = np.full(len(prompt.components), 1.0 / len(prompt.components))
    return TargetMixture(centers, variances, weights)


@dataclass(frozen=True)
class ConditionEmbedding:
    tokens: np.ndarray
    pooled: np.ndarray


def encode_prompt(prompt: PromptSpec, table: np.ndarray, M: int | None = None) -> ConditionEmbedding:
    """Look up one row per token and mean-pool them.

    ``M`` defaults to ``table.shape[0] // 3`` (the standard vocabulary layout).
    """
    table = np.asarray(table, dtype=np.float64)
    M = table.shape[0] // 3 if M is None else M
    ids = prompt.tokens(M)
    bad = [i for i in ids if not 0 <= i < table.shape[0]]
    if bad:
        raise ValueError(f"token ids {bad} outside embedding table of {table.shape[0]} rows")
    tokens = table[ids]
    return ConditionEmbedding(tokens, tokens.mean(axis=0))


def bag_of_tokens(prompts, vocab_size: int, M: int) -> np.ndarray:
    """Row-normalised token counts; ``bag @ table`` is the mean-pooled embedding."""
    bag = np.zeros((len(prompts), vocab_size))
    for row, p in enumerate(prompts):
        ids = p.tokens(M)
        for i in ids:
            bag[row, i] += 1.0
        bag[row] /= len(ids)
    return bag


def pad_tokens(prompts, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids padded to the longest prompt, plus the validity mask."""
    seqs = [p.tokens(M) for p in prompts]
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
        mask[row, : len(s)] = True
    return ids, mask


# persistence ----------------------------------------------------------------

_FIELDS = ("id", "components", "attributes", "richness", "split", "family")


def dumps_corpus(dataset: PromptDataset) -> str:
    buf = io.StringIO()
    for p in dataset.prompts:
        record = {
            "id": p.id,
            "components": list(p.components),
            "attributes": [[c, a] for c, a in p.attributes],
            "richness": p.richness,
            "split": dataset.split,
            "family": dataset.family,
        }
        buf.write(json.dumps(record, separators=(",", ":")) + "\n")
    return buf.getvalue()


def loads_corpus(text: str, seed: int = 0, M: int = 8) -> PromptDataset:
    prompts, splits, families = [], set(), set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if tuple(rec) != _FIELDS:
            raise ValueError(f"line {lineno}: fields {tuple(rec)} != {_FIELDS}")
        p = PromptSpec(int(rec["id"]), tuple(rec["components"]),
                       tuple((int(c), a) for c, a in rec["attributes"]))
        if p.richness != rec["richness"]:
            raise ValueError(f"line {lineno}: stored richness {rec['richness']} != {p.richness}")
        prompts.append(p)
        splits.add(rec["split"])
        families.add(rec["family"])
    if len(splits) > 1 or len(families) > 1:
        raise ValueError("a corpus file holds one split of one family")
    return PromptDataset(prompts, splits.pop() if splits else "train", seed, M,
                         families.pop() if families else "base")


def save_corpus(dataset: PromptDataset, path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(dataset))


def load_corpus(path: str | Path, seed: int = 0, M: int = 8) -> PromptDataset:
    return loads_corpus(Path(path).read_text(), seed=seed, M=M)


def uniform_share_ok(hist: dict[int, int], lo: int, hi: int, tolerance: float = 0.2) -> bool:
    total = sum(hist.values())
    share = total / (hi - lo + 1)
    return all(abs(hist.get(r, 0) - share) <= tolerance * share for r in range(lo, hi + 1))
