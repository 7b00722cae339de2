"""Stage-by-stage experiment driver writing every artifact under one directory."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from ..denoiser import Denoiser, DenoiserArch, DenoiserTrainConfig, train_denoiser
from ..diffusion import build_linear_schedule
from ..policy import PolicyTrainConfig, Selector, SelectorArch, init_selector, train_policy
from ..prompts import (PromptDataset, Universe, generate_prompt_corpus, generate_splits, load_corpus,
                       save_corpus)
from ..quality import QualityTable, RewardConfig, build_quality_table
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_digest, dump_config
from .evaluation import (EvalReport, Evaluator, PolicyAnalysis, SweepPoint, analyze_policy, fmt,
                         run_adaptive, run_fixed_baseline, run_matched_random, run_random_baseline,
                         sweep, sweep_csv, transfer_eval)

log = logging.getLogger(__name__)


class Lab:
    def __init__(self, cfg: RunConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.yaml").write_text(dump_config(cfg))

    def path(self, name: str) -> Path:
        return self.out / name

    def _need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"{p} is missing; run the stage that produces it first")
        return p

    # derived configs ----------------------------------------------------------
    @property
    def universe(self) -> Universe:
        u = self.cfg.universe
        return Universe(M=u.M, radius=u.radius, base_var=u.base_var)

    @property
    def reward_cfg(self) -> RewardConfig:
        r = self.cfg.reward
        return RewardConfig(lam=r.lam, gamma=r.gamma, k=r.k, menu=tuple(self.cfg.menu), w_a=r.w_a, w_f=r.w_f)

    @property
    def policy_cfg(self) -> PolicyTrainConfig:
        p = self.cfg.policy
        return PolicyTrainConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=self.cfg.seed,
                                 baseline=p.baseline, freeze_embedding=p.freeze_embedding)

    @property
    def selector_arch(self) -> SelectorArch:
        p = self.cfg.policy
        return SelectorArch(vocab_size=self.universe.vocab_size, M=self.universe.M, dim=p.dim,
                            hidden=p.hidden, layers=p.layers, menu=tuple(self.cfg.menu))

    @property
    def denoiser_arch(self) -> DenoiserArch:
        d = self.cfg.denoiser
        return DenoiserArch(data_dim=self.universe.dim, temb_dim=d.temb_dim, cond_dim=d.cond_dim,
                            hidden=tuple(d.hidden), vocab_size=self.universe.vocab_size, M=self.universe.M)

    def schedule(self):
        s = self.cfg.schedule
        return build_linear_schedule(s.T, s.beta_min, s.beta_max)

    # corpora ----------------------------------------------------------------------
    def gen_data(self) -> tuple[PromptDataset, PromptDataset, PromptDataset]:
        c, t, M = self.cfg.corpus, self.cfg.transfer, self.cfg.universe.M
        train, test = generate_splits(M, c.n_train, c.n_test, (c.richness_min, c.richness_max),
                                      seed=self.cfg.seed, family=c.family)
        transfer = generate_prompt_corpus(M, t.n_prompts, (t.richness_min, t.richness_max), seed=t.seed,
                                          split="transfer", family=t.family,
                                          id_offset=c.n_train + c.n_test)
        save_corpus(train, self.path("corpus_train.jsonl"))
        save_corpus(test, self.path("corpus_test.jsonl"))
        save_corpus(transfer, self.path("corpus_transfer.jsonl"))
        return train, test, transfer

    def corpus(self, split: str) -> PromptDataset:
        return load_corpus(self._need(f"corpus_{split}.jsonl"), seed=self.cfg.seed, M=self.cfg.universe.M)

    # denoiser -------------------------------------------------------------------
    def train_denoiser(self) -> Denoiser:
        d = self.cfg.denoiser
        tcfg = DenoiserTrainConfig(epochs=d.epochs, steps_per_epoch=d.steps_per_epoch,
                                   batch_size=d.batch_size, lr=d.lr, final_lr_fraction=d.final_lr_fraction,
                                   seed=self.cfg.seed, temb_dim=d.temb_dim)
        history: list[float] = []
        den = train_denoiser(self.corpus("train"), tcfg, self.schedule(), self.universe,
                             hidden=tuple(d.hidden), cond_dim=d.cond_dim, history=history)
        save_checkpoint(self.path("denoiser.ckpt"), den.params, config_digest(self.cfg, "denoiser"))
        self.path("denoiser_loss.csv").write_text(
            "epoch,loss\n" + "".join(f"{i},{fmt(v)}\n" for i, v in enumerate(history)))
        return den

    def denoiser(self) -> Denoiser:
        ck = load_checkpoint(self._need("denoiser.ckpt"), config_digest(self.cfg, "denoiser"))
        return Denoiser(ck.params, self.denoiser_arch, self.schedule(), self.universe)

    # quality tables ---------------------------------------------------------------
    def build_table(self) -> tuple[QualityTable, QualityTable]:
        den, tab = self.denoiser(), self.cfg.table
        w = self.cfg.reward
        train = build_quality_table(self.corpus("train"), den, self.cfg.menu, tab.seeds, tab.train_samples,
                                    w.w_a, w.w_f)
        test = build_quality_table(self.corpus("test"), den, self.cfg.menu, tab.seeds, tab.eval_samples,
                                   w.w_a, w.w_f)
        train.save(self.path("table_train.txt"))
        test.save(self.path("table_test.txt"))
        return train, test

    def table(self, split: str) -> QualityTable:
        return QualityTable.load(self._need(f"table_{split}.txt"))

    # policy -------------------------------------------------------------------------
    def train_policy(self) -> Selector:
        history: list = []
        sel = train_policy(self.corpus("train"), self.table("train"), self.policy_cfg, self.reward_cfg,
                           arch=self.selector_arch, history=history,
                           init=init_selector(self.selector_arch, self.cfg.seed))
        save_checkpoint(self.path("policy.ckpt"), sel.params, config_digest(self.cfg, "policy"))
        self.path("policy_log.jsonl").write_text("".join(
            json.dumps({"epoch": e.epoch, "mean_reward": e.mean_reward, "mean_steps": e.mean_steps,
                        "histogram": dict(zip(map(str, self.cfg.menu), e.histogram))}) + "\n"
            for e in history))
        return sel

    def selector(self) -> Selector:
        ck = load_checkpoint(self._need("policy.ckpt"), config_digest(self.cfg, "policy"))
        return Selector(ck.params, self.selector_arch)

    # evaluation ---------------------------------------------------------------------
    def evaluator(self, timing: bool = True) -> Evaluator:
        tab, w = self.cfg.table, self.cfg.reward
        ev = Evaluator(self.denoiser(), tab.eval_samples, tab.seeds, w.w_a, w.w_f)
        test = self.corpus("test")
        ev.absorb(self.table("test"), test)
        if timing:
            ev.measure_timing(test.prompts[: self.cfg.eval.timing_prompts], self.cfg.menu, self.cfg.seed)
        return ev

    def evaluate(self, ev: Evaluator | None = None) -> tuple[EvalReport, list[tuple[int, int]]]:
        ev = ev or self.evaluator()
        test = self.corpus("test")
        report = EvalReport(seeds=tuple(self.cfg.table.seeds), digest=config_digest(self.cfg).hex())
        for s in self.cfg.menu:
            report.rows.append(run_fixed_baseline(test, ev, s))
        report.rows.append(run_random_baseline(test, ev, self.cfg.menu, self.cfg.eval.random_runs,
                                               self.cfg.seed))
        adaptive, pairs = run_adaptive(test, ev, self.selector())
        report.rows.append(adaptive)
        report.rows.append(run_matched_random(test, ev, [s for _, s in pairs], self.cfg.eval.random_runs,
                                              self.cfg.seed))
        report.save(self.out)
        self.path("pairs.csv").write_text("richness,steps\n" + "".join(f"{r},{s}\n" for r, s in pairs))
        return report, pairs

    def analyze(self) -> PolicyAnalysis:
        lines = self._need("pairs.csv").read_text().splitlines()[1:]
        pairs = [tuple(int(v) for v in line.split(",")) for line in lines if line]
        analysis = analyze_policy(pairs)
        self.path("analysis.csv").write_text(analysis.to_csv())
        return analysis

    def sweep(self, axes=("k", "lam"), ev: Evaluator | None = None) -> list[SweepPoint]:
        ev = ev or self.evaluator(timing=False)
        train, table, test = self.corpus("train"), self.table("train"), self.corpus("test")
        values = {"k": self.cfg.sweep.k_values, "lam": self.cfg.sweep.lam_values}
        points = []
        for axis in axes:
            points += sweep(axis, values[axis], train, table, test, ev, self.policy_cfg, self.reward_cfg,
                            self.selector_arch)
        self.path("sweep.csv").write_text(sweep_csv(points))
        return points

    def transfer(self, ev: Evaluator | None = None) -> EvalReport:
        ev = ev or self.evaluator()
        sel = self.selector()
        report = EvalReport(seeds=tuple(self.cfg.table.seeds), digest=config_digest(self.cfg).hex())
        test, other = self.corpus("test"), self.corpus("transfer")
        top = max(self.cfg.menu)
        report.rows.append(run_fixed_baseline(test, ev, top))
        report.rows.append(run_adaptive(test, ev, sel)[0])
        report.rows.append(run_fixed_baseline(other, ev, top))
        report.rows[-1].arm = f"fixed-{top}-transfer"
        report.rows.append(transfer_eval(sel, other, ev))
        report.save(self.out, stem="transfer")
        return report
