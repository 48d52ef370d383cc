"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``);
the lines are also repeated in the terminal summary.  Criteria 5-7 share three
models trained once per session (a few minutes of CPU time each).
"""
import hashlib
import math
import sys
import time

import numpy as np
import pytest

import oracles
from facediff.attention import (NEG_INF, AttentionVariant, biased_conditional_attention,
                                cross_attention_bias, self_attention_bias)
from facediff.bench import bench_latency, latency_ratios
from facediff.cli import main as cli_main
from facediff.config import RunConfig
from facediff.data import generate_dataset, split_indices
from facediff.denoiser import Denoiser, DenoiserConfig
from facediff.diffusion import (SamplerConfig, ddim_step, forward_noise, make_schedule,
                                sample)
from facediff.evaluation import evaluate_model, lip_vertex_error
from facediff.training import total_loss, total_loss_grad, train, validation_rec_loss

RESULTS = {}


def record(n, ok, detail, started):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - started:.1f}s)"
    RESULTS[n] = line
    print(line, file=sys.stderr, flush=True)
    assert ok, line


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_bias_matrices():
    t0 = time.time()
    problems = []
    for T in range(1, 65):
        cross = cross_attention_bias(T)
        if not np.array_equal(cross, oracles.cross_bias_closed_form(T)):
            problems.append(f"cross T={T}")
        if not np.all((cross > NEG_INF / 2).sum(axis=1) == 3):
            problems.append(f"cross finite count T={T}")
        for p in (1, 2, 25):
            b = self_attention_bias(T, p)
            if not np.array_equal(b, oracles.self_bias_closed_form(T, p)):
                problems.append(f"self T={T} p={p}")
            zeros = (b[:, 2:] == 0).sum(axis=1)
            for i in range(T):
                left, right = min(i, p - 1), min(T - 1 - i, p - 1)
                if zeros[i] != left + right + 1:
                    problems.append(f"band T={T} p={p} row={i}")
                if i >= p - 1 and T - 1 - i >= p - 1 and zeros[i] != 2 * p - 1:
                    problems.append(f"unclipped band width T={T} p={p} row={i}")
    elapsed = time.time() - t0
    record(1, not problems and elapsed < 1.0,
           f"T in 1..64, p in (1, 2, 25); mismatches={problems[:3]}", t0)


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_attention_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        T, Tk = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        heads = int(rng.choice([1, 2, 4]))
        C = heads * int(rng.integers(1, 16 // heads + 1))
        q, k, v = (rng.standard_normal(s) for s in ((T, C), (Tk, C), (Tk, C)))
        s, n = rng.standard_normal((1, C)), rng.standard_normal((1, C))
        params = oracles.random_attention_params(C, rng)
        bias = rng.uniform(-4, 0, (T, Tk + 2))
        bias[rng.random(bias.shape) < 0.3] = NEG_INF
        bias[np.arange(T), rng.integers(0, Tk + 2, T)] = 0.0
        out = biased_conditional_attention(q, k, v, s, n, bias, params, heads)
        ref, _ = oracles.dense_attention(q, k, v, s, n, bias, params, heads)
        worst = max(worst, float(np.max(np.abs(out - ref)) / max(np.max(np.abs(ref)), 1e-12)))
    record(2, worst < 1e-6 and time.time() - t0 < 5.0,
           f"100 random cases, worst relative error {worst:.2e}", t0)


# -- 3 ------------------------------------------------------------------------

class _Oracle:
    def __init__(self, x0):
        self.x0 = x0
        self.vertex_count = x0.shape[1]

    def __call__(self, x, audio, style, n):
        return self.x0


def test_criterion_3_diffusion_round_trip():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        N = int(rng.integers(2, 1001))
        sched = make_schedule(N, str(rng.choice(["linear", "cosine"])))
        x0 = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 5)), 3))
        n = int(rng.integers(1, N + 1))
        eps = rng.standard_normal(x0.shape)
        x = forward_noise(x0, n, eps, sched)
        # walk down a random decreasing path to 0 with the oracle estimate; every
        # intermediate state must sit on the same noise trajectory
        path = sorted(set(rng.integers(0, n, size=int(rng.integers(1, 5))).tolist()) | {0},
                      reverse=True)
        cur = n
        for nxt in path:
            x = ddim_step(x, x0, cur, nxt, sched)
            worst = max(worst, float(np.max(np.abs(x - forward_noise(x0, nxt, eps, sched)))))
            cur = nxt
        worst = max(worst, float(np.max(np.abs(x - x0))))
    x0 = rng.standard_normal((7, 3, 3))
    out, passes = sample(_Oracle(x0), np.ones((7, 4)), 0, SamplerConfig(step_count=1),
                         make_schedule(50), rng)
    exact = np.array_equal(out.offsets, x0) and passes == 1
    record(3, worst < 1e-5 and exact and time.time() - t0 < 5.0,
           f"50 cases, worst |x - x0| {worst:.2e}; S=1 oracle exact={exact}", t0)


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_gradient_check():
    t0 = time.time()
    rng = np.random.default_rng(4)
    cfg = DenoiserConfig(hidden_dim=8, ff_dim=8, heads=2, vertex_count=3, feature_dim=4,
                         subject_count=2, fps=2, diffusion_steps=10)
    model = Denoiser(cfg, seed=4)
    for k, v in model.params.items():
        if v.ndim == 1:
            model.params[k] = rng.standard_normal(v.shape) * 0.1
    x0, x_n = rng.standard_normal((6, 3, 3)), rng.standard_normal((6, 3, 3))
    audio = rng.standard_normal((6, 4))
    out, cache = model.forward(x_n, audio, 1, 7)
    grads = model.backward(total_loss_grad(x0, out), cache)
    # key-projection biases shift every logit of a row equally, so their true
    # gradient is exactly zero and a relative comparison is meaningless
    names = [k for k in sorted(model.params) if not k.endswith(".bk")]
    h, worst, count = 1e-4, 0.0, 0
    for _ in range(30):
        name = names[int(rng.integers(len(names)))]
        arr = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = total_loss(x0, model(x_n, audio, 1, 7))
        arr[idx] = old - h
        down = total_loss(x0, model(x_n, audio, 1, 7))
        arr[idx] = old
        num, ana = (up - down) / (2 * h), grads[name][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        count += 1
    record(4, worst < 1e-3 and count >= 20 and time.time() - t0 < 60,
           f"{count} parameters, worst relative error {worst:.2e}", t0)


# -- shared desk-scale setup for 5-7 --------------------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig.parse("")
    ds = generate_dataset(cfg.dataset_spec())
    parts = split_indices(len(ds.items), cfg["data.split"], cfg["data.split_seed"])
    pick = lambda name: [ds.items[i] for i in parts[name]]
    return {"cfg": cfg, "template": ds.template, "train": pick("train"), "val": pick("val"),
            "test": pick("test"), "schedule": make_schedule(cfg["model.diffusion_steps"]),
            "models": {}, "train_seconds": {}}


def trained(desk, variant):
    if variant not in desk["models"]:
        cfg = desk["cfg"]
        t0 = time.time()
        model = Denoiser(cfg.model_config(variant), seed=cfg["model.init_seed"])
        train(model, desk["train"], desk["schedule"], cfg.train_config(),
              steps=cfg["train.steps"])
        desk["models"][variant] = model
        desk["train_seconds"][variant] = time.time() - t0
    return desk["models"][variant]


def lve_and_upper(desk, variant, w):
    report = evaluate_model(trained(desk, variant), desk["test"], desk["template"],
                            desk["schedule"], desk["cfg"].sampler_config(w), SEEDS)
    return report.lve, report.upper_std


# -- 5 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_learnability(desk):
    t0 = time.time()
    cfg = desk["cfg"]
    fresh = Denoiser(cfg.model_config("full"), seed=cfg["model.init_seed"])
    initial = validation_rec_loss(fresh, desk["val"], desk["schedule"])
    model = trained(desk, "full")
    final = validation_rec_loss(model, desk["val"], desk["schedule"])
    report = evaluate_model(model, desk["test"], desk["template"], desk["schedule"],
                            cfg.sampler_config(0.0), [0])
    lip = desk["template"].lip_mask
    baseline = np.mean([lip_vertex_error(np.zeros_like(m.offsets), m.offsets, lip)
                        for _, m, _ in desk["test"]])
    rec_ratio, lve_ratio = final / initial, report.lve / baseline
    record(5, rec_ratio < 0.25 and lve_ratio < 0.20 and time.time() - t0 < 600,
           f"val rec_loss ratio {rec_ratio:.4f} (<0.25), LVE {report.lve:.4f} vs zero-motion "
           f"{baseline:.4f} ratio {lve_ratio:.3f} (<0.20)", t0)


# -- 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_ablation_direction(desk):
    t0 = time.time()
    full, _ = lve_and_upper(desk, "full", 0.0)
    no_cross, _ = lve_and_upper(desk, "no_cross_bias", 0.0)
    fully_self, _ = lve_and_upper(desk, "fully_self_attn", 0.0)
    record(6, no_cross > full and fully_self > full and time.time() - t0 < 1800,
           f"LVE Full {full:.4f} < NoCrossBias {no_cross:.4f}, "
           f"Full < FullySelfAttn {fully_self:.4f} (3 seeds)", t0)


# -- 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_guidance_tradeoff(desk):
    trained(desk, "full")
    t0 = time.time()
    lve0, up0 = lve_and_upper(desk, "full", 0.0)
    lve1, up1 = lve_and_upper(desk, "full", 1.0)
    record(7, lve1 > lve0 and up1 > up0 and time.time() - t0 < 600,
           f"LVE w=0 {lve0:.4f} -> w=1 {lve1:.4f}; upper std {up0:.4f} -> {up1:.4f} (3 seeds)",
           t0)


# -- 8 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_latency():
    t0 = time.time()
    cfg = RunConfig.parse("")
    sampler = cfg.sampler_config()
    S = sampler.step_count
    records = bench_latency([10.0, 90.0], fps=25, sampler_config=sampler,
                            model_config=cfg.bench_model_config(), repeats=3, warmups=1)
    by = {(r.decoder, r.audio_seconds): r for r in records}
    passes_ok = (by[("diffusion", 10.0)].denoiser_passes == S
                 and by[("diffusion", 90.0)].denoiser_passes == S
                 and by[("autoregressive", 10.0)].denoiser_passes == 250
                 and by[("autoregressive", 90.0)].denoiser_passes == 2250)
    guided = bench_latency([10.0, 90.0], fps=25, sampler_config=cfg.sampler_config(1.0),
                           model_config=DenoiserConfig(hidden_dim=8, ff_dim=8, heads=2),
                           repeats=3, warmups=0, decoders=("diffusion",))
    passes_ok &= all(r.denoiser_passes == 2 * S for r in guided)
    ratios = latency_ratios(records)
    elapsed = time.time() - t0
    record(8, passes_ok and ratios[90.0] > ratios[10.0] and elapsed < 300,
           f"passes diffusion {S}/{S} (guided {2 * S}), AR 250/2250; "
           f"AR/diffusion ratio 10s {ratios[10.0]:.3f} -> 90s {ratios[90.0]:.3f}", t0)


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_sample_determinism(tmp_path, monkeypatch, capsys):
    t0 = time.time()
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text("train.steps = 5\n")
    codes = [cli_main(["gen-data", "--config", "run.cfg"]),
             cli_main(["train", "--config", "run.cfg"])]
    digests = []
    for name in ("first.motion", "second.motion"):
        codes.append(cli_main(["sample", "--config", "run.cfg", "--audio",
                               "data/clips/clip_0000.audio", "--style", "1", "--seed", "17",
                               "--w", "0", "--out", name]))
        digests.append(hashlib.sha256((tmp_path / "reports" / name).read_bytes()).hexdigest())
    capsys.readouterr()
    record(9, codes == [0] * 4 and digests[0] == digests[1] and time.time() - t0 < 60,
           f"two seeded runs, sha256 {digests[0][:12]} vs {digests[1][:12]}", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-v"]))
