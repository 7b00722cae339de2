"""End-to-end acceptance checks, one recorded verdict per criterion.

The trained-system criteria (7 to 12) share one pipeline run at the default
configuration. Set ``ADASTEP_ACCEPTANCE_DIR`` to keep its artifacts.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from adastep.denoiser import (DenoiserArch, DenoiserTrainConfig, embed_timestep, init_denoiser_params,
                              mse_loss, train_denoiser)
from adastep.diffusion import (DdimConfig, build_linear_schedule, ddim_step, forward_diffuse,
                               make_step_plan, sample)
from adastep.harness import Lab, RunConfig, load_checkpoint, sweep, transfer_eval
from adastep.harness.checkpoint import dumps_checkpoint
from adastep.harness.evaluation import analyze_policy
from adastep.numeric import finite_difference_grad, value_and_grad
from adastep.numeric.autodiff import d_softmax
from adastep.policy import (Decision, SelectorArch, _encode_batch, forward_selector, init_selector,
                            optimality_gap, reinforce_batch_grad, selector_logits)
from adastep.prompts import PromptDataset, PromptSpec, Universe, bag_of_tokens, generate_prompt_corpus
from adastep.quality import (QualityScore, QualityTable, RewardConfig, generate_scores, is_high_quality,
                             reward, sequence_quality, step_reward)

from oracles import alpha_bars_loop, ddim_update, max_rel_error
from verdicts import record

MENU = (10, 20, 30, 40, 50)


# ---------------------------------------------------------------- 1 to 6


def test_c01_forward_statistics():
    tic = time.perf_counter()
    sched = build_linear_schedule()
    rng = np.random.default_rng(0)
    # a large x0 keeps the t = T-1 mean (sqrt(alpha_bar) ~ 6e-3) well above its standard error
    x0 = np.array([[100.0, -80.0]])
    worst = 0.0
    for t in (1, sched.T // 2, sched.T - 1):
        noise = rng.standard_normal((100_000, 2))
        x = forward_diffuse(np.repeat(x0, 100_000, axis=0), t, noise, sched).x
        ab = alpha_bars_loop(1000, 1e-4, 0.02)[t]
        mean_err = np.abs(x.mean(axis=0) / (math.sqrt(ab) * x0[0]) - 1).max()
        var_err = np.abs(x.var(axis=0) / (1 - ab) - 1).max()
        worst = max(worst, mean_err, var_err)
    secs = time.perf_counter() - tic
    record(1, worst < 0.02 and secs < 10, f"max relative error {worst:.4f} (< 0.02), {secs:.1f}s (< 10s)")


def test_c02_ddim_algebra(tiny_denoiser):
    tic = time.perf_counter()
    sched = build_linear_schedule()
    rng = np.random.default_rng(1)
    inv = 0.0
    for _ in range(100):
        x0 = rng.standard_normal((4, 2)) * 3
        t = int(rng.integers(1000))
        noise = rng.standard_normal((4, 2))
        xt = forward_diffuse(x0, t, noise, sched)
        ab = sched.alpha_bar(t)
        x0_hat = (xt.x - math.sqrt(1 - ab) * noise) / math.sqrt(ab)
        inv = max(inv, float(np.abs(x0_hat - x0).max()))
    c = tiny_denoiser.cond_embed(PromptSpec(0, (1, 4)))
    a = sample(tiny_denoiser, c, 20, DdimConfig(seed=5), n=64).x
    b = sample(tiny_denoiser, c, 20, DdimConfig(seed=5), n=64).x
    bitwise = a.tobytes() == b.tobytes()
    oracle = 0.0
    for i in range(100):
        S = int(rng.choice(MENU))
        plan = make_step_plan(1000, S).timesteps
        j = int(rng.integers(len(plan)))
        t, t_prev = plan[j], (plan[j - 1] if j else -1)
        x = rng.standard_normal((3, 2))
        eps = rng.standard_normal((3, 2))
        got = ddim_step(x, eps, t, t_prev, sched, eta=0.5, rng=np.random.default_rng(i)).x
        z = np.random.default_rng(i).standard_normal((3, 2))
        ab_prev = 1.0 if t_prev < 0 else alpha_bars_loop(1000, 1e-4, 0.02)[t_prev]
        want = ddim_update(x, eps, alpha_bars_loop(1000, 1e-4, 0.02)[t], ab_prev, 0.5, z)
        oracle = max(oracle, float(np.abs(got - want).max()))
    secs = time.perf_counter() - tic
    ok = inv <= 1e-10 and bitwise and oracle <= 1e-12 and secs < 5
    record(2, ok, f"inversion {inv:.1e} (<= 1e-10), bitwise rerun {bitwise}, oracle {oracle:.1e} (<= 1e-12), "
                  f"{secs:.1f}s (< 5s)")


def test_c03_gradient_integrity():
    tic = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_mse = 0.0
    for trial in range(100):
        arch = DenoiserArch(hidden=(5, 4), temb_dim=4, cond_dim=3, vocab_size=6, M=2)
        params = init_denoiser_params(arch, trial)
        n = int(rng.integers(1, 5))
        x = rng.standard_normal((n, 2))
        temb = embed_timestep(rng.integers(1000, size=n), 4)
        bag = bag_of_tokens([PromptSpec(i, (int(rng.integers(2)),)) for i in range(n)], 6, 2)
        eps = rng.standard_normal((n, 2))
        _, g = value_and_grad(mse_loss, params, x, temb, bag, eps, 2)
        fd = finite_difference_grad(lambda p: mse_loss(p, x, temb, bag, eps, 2), params, h=1e-5)
        worst_mse = max(worst_mse, max_rel_error([g.flat()], [fd.flat()]))
    worst_pg = 0.0
    for trial in range(100):
        arch = SelectorArch(vocab_size=24, M=8, dim=4, hidden=3, layers=int(rng.integers(1, 4)))
        sel = init_selector(arch, trial)
        p = generate_prompt_corpus(8, 1, (1, 8), seed=trial)[0]
        a, r = int(rng.integers(5)), float(rng.uniform(-2, 2))
        probs = forward_selector(sel, p)
        d = Decision(probs, np.eye(5)[a], MENU[a], math.log(probs[a]), "sampled", p)
        g = reinforce_batch_grad([d], [r], sel)
        ids, mask = _encode_batch([p], arch)

        def surrogate(params):
            z = selector_logits(params, ids, mask, arch)[0]
            z = z - z.max()
            return r * (z[a] - math.log(np.exp(z).sum()))

        fd = finite_difference_grad(surrogate, sel.params, h=1e-5)
        worst_pg = max(worst_pg, max_rel_error([g.flat()], [fd.flat()]))
    secs = time.perf_counter() - tic
    ok = worst_mse < 1e-4 and worst_pg < 1e-4 and secs < 60
    record(3, ok, f"denoiser MSE {worst_mse:.1e}, surrogate {worst_pg:.1e} (< 1e-4, 100 configs each), "
                  f"{secs:.1f}s (< 60s)")


def test_c04_estimator_unbiased():
    tic = time.perf_counter()
    arch = SelectorArch(vocab_size=24, M=8, dim=6, hidden=5, layers=3)
    worst = 0.0
    rng = np.random.default_rng(3)
    for trial in range(5):
        sel = init_selector(arch, seed=trial)
        p = generate_prompt_corpus(8, 1, (1, 8), seed=40 + trial)[0]
        R = rng.uniform(-1, 2, size=5)
        probs = forward_selector(sel, p)
        flat = np.zeros_like(sel.params.flat())
        for a in range(5):
            d = Decision(probs, np.eye(5)[a], MENU[a], math.log(probs[a]), "sampled", p)
            flat += probs[a] * reinforce_batch_grad([d], [R[a]], sel).flat()
        ids, mask = _encode_batch([p], arch)
        _, exact = value_and_grad(lambda leaves: (d_softmax(selector_logits(leaves, ids, mask, arch)) * R).sum(),
                                  sel.params)
        worst = max(worst, float(np.abs(flat - exact.flat()).max()))
    secs = time.perf_counter() - tic
    record(4, worst <= 1e-8 and secs < 5, f"max deviation {worst:.1e} (<= 1e-8), {secs:.2f}s (< 5s)")


def test_c05_reward_algebra():
    tic = time.perf_counter()
    checks = []
    checks += [step_reward(50, MENU) == 0.0, abs(step_reward(10, MENU) - 0.8) < 1e-15,
               abs(step_reward(30, MENU) - 0.4) < 1e-15]
    inc = dict(zip(MENU, [0.1, 0.2, 0.3, 0.4, 0.5]))
    checks.append([is_high_quality(inc, s, 3) for s in MENU] == [False, False, True, True, True])
    tie = dict.fromkeys(MENU, 0.5)
    checks.append([is_high_quality(tie, s, 3) for s in MENU] == [True, True, True, False, False])
    checks.append(all(is_high_quality(dict(zip(MENU, [0.3, -0.2, 0.9, 0.1, 0.0])), s, 5) for s in MENU))
    checks.append(abs(reward(10, QualityScore(0.5, 0.8, 0.3), True, RewardConfig(lam=2.0)) - 1.4) < 1e-12)
    checks.append(reward(30, 0.9, False, RewardConfig(gamma=1.0)) == -1.0)
    checks.append(reward(50, 0.7, True, RewardConfig(lam=0.0)) == 0.0)
    checks.append(abs(sequence_quality([0.2, 0.4]) - 0.3) < 1e-15)
    checks.append(sequence_quality([QualityScore(1, 0, 0.42)]) == 0.42)
    vals = list(np.random.default_rng(4).uniform(-1, 1, 16))
    checks.append(abs(sequence_quality(vals) - sum(vals) / 16) < 1e-12)
    secs = time.perf_counter() - tic
    record(5, all(checks) and secs < 1, f"{sum(checks)}/{len(checks)} exact examples, {secs:.3f}s (< 1s)")


def test_c06_denoiser_single_component():
    tic = time.perf_counter()
    uni = Universe()
    corpus = PromptDataset([PromptSpec(0, (2,))], M=uni.M)
    cfg = DenoiserTrainConfig(epochs=30, steps_per_epoch=100, batch_size=256, lr=3e-3)
    den = train_denoiser(corpus, cfg, universe=uni)
    x = sample(den, den.cond_embed(corpus[0]), 50, DdimConfig(seed=0), n=4096).x
    mean_err = float(np.abs(x.mean(axis=0) - uni.centers[2]).max())
    var_err = float(np.abs(x.var(axis=0) / uni.base_var - 1).max())
    secs = time.perf_counter() - tic
    record(6, mean_err < 0.1 and var_err < 0.2 and secs < 600,
           f"mean offset {mean_err:.3f} (< 0.1), variance error {var_err:.3f} (< 0.2), {secs:.0f}s (< 600s)")


# ---------------------------------------------------------------- trained system


class Pipeline:
    def __init__(self, root: Path):
        self.cfg = RunConfig(out=str(root / "run"))
        self.lab = Lab(self.cfg)
        self.seconds = {}
        for stage in ("gen_data", "train_denoiser", "build_table", "train_policy"):
            tic = time.perf_counter()
            getattr(self.lab, stage)()
            self.seconds[stage] = time.perf_counter() - tic
        tic = time.perf_counter()
        self.ev = self.lab.evaluator()
        self.report, self.pairs = self.lab.evaluate(self.ev)
        self.seconds["evaluate"] = time.perf_counter() - tic


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = os.environ.get("ADASTEP_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    return Pipeline(root)


def test_c07_policy_optimality(pipeline):
    lab = pipeline.lab
    test = list(lab.corpus("test"))
    got, best = optimality_gap(lab.selector(), test, lab.table("test"), lab.reward_cfg)
    close = np.abs(best - got) <= 0.02 * np.abs(best)
    share = float(close.mean())
    secs = pipeline.seconds["train_policy"]
    record(7, share >= 0.95 and secs < 300,
           f"{share:.1%} of test prompts within 2% of the best action (>= 95%), "
           f"mean gap {float(np.mean(best - got)):.4f}, training {secs:.0f}s (< 300s)")


def test_c08_speed_quality(pipeline):
    rep = pipeline.report
    ada, top, matched = rep.row("adaptive"), rep.row("fixed-50"), rep.row("random-matched")
    steps_ok = ada.mean_steps <= 35
    keep = ada.mean_quality / top.mean_quality if top.mean_quality > 0 else -math.inf
    quality_ok = ada.mean_quality >= 0.98 * top.mean_quality
    matched_ok = abs(matched.mean_steps - ada.mean_steps) <= 2
    gain = (ada.mean_quality - matched.mean_quality) / abs(matched.mean_quality)
    total = sum(pipeline.seconds.values())
    ok = steps_ok and quality_ok and matched_ok and gain >= 0.05 and total < 900
    record(8, ok, f"adaptive {ada.mean_steps:.2f} steps (<= 35), quality {ada.mean_quality:.4f} = "
                  f"{keep:.1%} of fixed-50 {top.mean_quality:.4f} (>= 98%), vs random at "
                  f"{matched.mean_steps:.2f} steps {gain:+.1%} (>= +5%), end to end {total:.0f}s (< 900s)")


def test_c09_richness_monotone(pipeline):
    a = analyze_policy(pipeline.pairs)
    means = ", ".join(f"{b.label}:{b.mean_steps:.1f}" for b in a.buckets)
    rho = a.spearman
    ok = len(a.buckets) >= 3 and a.non_decreasing and rho is not None and rho > 0.8
    record(9, ok, f"bucket means [{means}] non-decreasing {a.non_decreasing}, "
                  f"spearman {'undefined' if rho is None else f'{rho:.3f}'} (> 0.8)")


def _at_least(a: float, b: float) -> bool:
    return a == b or a - b >= 1.0


def test_c10_tradeoff_sweeps(pipeline):
    lab = pipeline.lab
    train, table, test = lab.corpus("train"), lab.table("train"), lab.corpus("test")
    ada = pipeline.report.row("adaptive").mean_steps
    k = {3: ada}
    lam = {2.0: ada}
    for p in sweep("k", [1, 5], train, table, test, pipeline.ev, lab.policy_cfg, lab.reward_cfg,
                   lab.selector_arch):
        k[int(p.value)] = p.mean_steps
    for p in sweep("lam", [0.0, 10.0], train, table, test, pipeline.ev, lab.policy_cfg, lab.reward_cfg,
                   lab.selector_arch):
        lam[p.value] = p.mean_steps
    ok = (_at_least(k[1], k[3]) and _at_least(k[3], k[5]) and abs(k[5] - 10) <= 1.0
          and _at_least(lam[2.0], lam[0.0]) and _at_least(lam[10.0], lam[2.0]))
    record(10, ok, "k=1,3,5 -> " + ", ".join(f"{k[v]:.2f}" for v in (1, 3, 5))
           + "; lambda=0,2,10 -> " + ", ".join(f"{lam[v]:.2f}" for v in (0.0, 2.0, 10.0))
           + " (each >= the next by >= 1 step or equal; k=5 within 1 of 10)")


def test_c11_transfer(pipeline):
    lab = pipeline.lab
    sel = lab.selector()
    other = lab.corpus("transfer")
    row_b = transfer_eval(sel, other, pipeline.ev)
    top = max(lab.cfg.menu)
    save_a = top - pipeline.report.row("adaptive").mean_steps
    save_b = top - row_b.mean_steps
    kept = save_b / save_a if save_a > 0 else -math.inf
    record(11, kept >= 0.9, f"saving {save_a:.2f} steps on the training family, {save_b:.2f} zero-shot "
                            f"= {kept:.1%} retained (>= 90%)")


def test_c12_persistence(pipeline, tmp_path):
    lab = pipeline.lab
    ok = {}
    for name in ("denoiser.ckpt", "policy.ckpt"):
        blob = lab.path(name).read_bytes()
        ck = load_checkpoint(lab.path(name))
        ok[name] = dumps_checkpoint(ck.params, ck.digest) == blob
    for split in ("train", "test"):
        text = lab.path(f"table_{split}.txt").read_text()
        ok[f"table_{split}"] = QualityTable.loads(text).dumps() == text
    # regenerate a sample of table cells from the checkpointed denoiser
    test = list(lab.corpus("test"))[:40]
    table = lab.table("test")
    cells = generate_scores(lab.denoiser(), test, MENU, table.seeds, table.n_samples)
    ok["cells"] = all(cells[(p.key, s, sd)] == table.cells[(p.id, s, sd)]
                      for p in test for s in MENU for sd in table.seeds)
    # rerun the policy and report stages from the same config into a fresh directory
    twin = Lab(lab.cfg, tmp_path / "twin")
    for name in ("corpus_train.jsonl", "corpus_test.jsonl", "corpus_transfer.jsonl", "denoiser.ckpt",
                 "table_train.txt", "table_test.txt"):
        (twin.out / name).write_bytes(lab.path(name).read_bytes())
    twin.train_policy()
    ok["policy"] = twin.path("policy.ckpt").read_bytes() == lab.path("policy.ckpt").read_bytes()
    twin.evaluate(twin.evaluator(timing=False))
    for name in ("report.csv", "pairs.csv"):
        ok[name] = twin.path(name).read_bytes() == lab.path(name).read_bytes()
    bad = [k for k, v in ok.items() if not v]
    record(12, not bad, "byte-identical: " + ", ".join(ok) + ("" if not bad else f"; mismatched {bad}"))


def test_more_steps_generally_help(pipeline):
    """Harness gate: on 64 test prompts the per-prompt score rises with steps for most prompts."""
    lab = pipeline.lab
    table = lab.table("test")
    prompts = list(lab.corpus("test"))[:64]
    rows = table.score_matrix([p.id for p in prompts])
    share = float(np.mean(np.all(np.diff(rows, axis=1) >= 0, axis=1)))
    assert share >= 0.7, f"only {share:.0%} of prompts have non-decreasing scores"
