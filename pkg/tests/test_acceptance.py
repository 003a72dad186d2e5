"""Acceptance gate A1-A13.

Each criterion is one test named ``test_A<k>_...``; ``conftest.py`` prints a
PASS/FAIL line per criterion at the end of the run. A8-A13 share one training
study (about 15 minutes on one CPU core). Set ``RRD_ACCEPTANCE_CACHE`` to a
directory to keep its checkpoints and numbers between runs.
"""
import copy
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from rrdcodec import bitstream
from rrdcodec.autodiff import grad_check
from rrdcodec.data import toy_corpus
from rrdcodec.entropy import EntropyParams, rate_estimate, symbols_of
from rrdcodec.evaluate import LAMBDA_S_SWEEP, time_denoising
from rrdcodec.nets import ModelConfig, RRDModel, load_checkpoint, save_checkpoint
from rrdcodec.rangecoder import TRAILER, CdfBank, CorruptStreamError, decode_stream, encode_stream
from rrdcodec.sampler import (
    cfg_blend, effective_noise, forward_diffuse, reconstruct, reverse_coefficients, seeded_noise, spaced_steps,
)
from rrdcodec.schedule import build_schedule, relay_weights
from rrdcodec.training import (
    LAMBDA_R_GRID, TrainConfig, _trainable, draw_randomness, encode_corpus, evaluate_heldout,
    noise_estimation_loss, pretrain_foundation, stage1_loss, train_stage1, train_stage2, z0_space_loss,
)

from oracles import ddim_sample

SCHED = build_schedule()
W = relay_weights(SCHED, 300)
PLAN_LENGTHS = (1, 2, 5, 50)


def _report(record_property, ok: bool, detail: str):
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _draw(seed, dtype=torch.float64, shape=(2, 4, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(shape, generator=g, dtype=dtype)
    zc = z0 + 0.3 * torch.randn(shape, generator=g, dtype=dtype)
    eps = torch.randn(shape, generator=g, dtype=dtype)
    n = int(torch.randint(1, 301, (1,), generator=g))
    return z0, zc, eps, n


class _Oracle:
    def __init__(self, z0):
        self.z0 = z0

    def cond(self, z, c, n):
        ab = SCHED.alpha_bar(n)
        return (z - math.sqrt(ab) * self.z0) / math.sqrt(1 - ab)

    def base(self, z, n):
        return torch.zeros_like(z)


class _Smooth:
    def cond(self, z, c, n):
        return torch.tanh(z) * (n / 1000.0) + 0.1 * torch.sin(3 * z)

    def base(self, z, n):
        return self.cond(z, None, n)


# exact algebra -----------------------------------------------------------------------------

def test_A1_forward_forms_agree(record_property):
    t = time.perf_counter()
    worst = {}
    for dtype in (torch.float64, torch.float32):
        w = 0.0
        for seed in range(100):
            z0, zc, eps, n = _draw(seed, dtype)
            ab = SCHED.alpha_bar(n)
            lhs = forward_diffuse(z0, zc, n, SCHED, W, eps)
            rhs = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * effective_noise(zc - z0, eps, W)
            w = max(w, float(torch.max(torch.abs(lhs - rhs))))
        worst[dtype] = w
    dt = time.perf_counter() - t
    ok = worst[torch.float64] < 1e-12 and worst[torch.float32] < 1e-5 and dt < 1.0
    _report(record_property, ok, f"max diff double {worst[torch.float64]:.2e}, single {worst[torch.float32]:.2e}, "
                                 f"{dt:.2f}s")


def test_A2_coefficient_consistency(record_property):
    t = time.perf_counter()
    worst, pairs = 0.0, 0
    for L in PLAN_LENGTHS:
        steps = spaced_steps(300, L).steps
        for a, b in zip(steps, steps[1:]):
            c = reverse_coefficients(a, b, SCHED, W)
            af, at = SCHED.alpha_bar(a), SCHED.alpha_bar(b)
            r = (
                c.k + c.m * math.sqrt(af) - math.sqrt(at),
                c.m * math.sqrt(af) * W.eta(a) - math.sqrt(at) * W.eta(b),
                c.m**2 * (1 - af) + c.sigma**2 - (1 - at),
            )
            worst = max(worst, *map(abs, r))
            pairs += 1
    dt = time.perf_counter() - t
    _report(record_property, worst < 1e-12 and dt < 1.0, f"{pairs} step pairs, worst residual {worst:.2e}, {dt:.2f}s")


def test_A3_oracle_recovery(record_property):
    t = time.perf_counter()
    errs = {}
    for L in PLAN_LENGTHS:
        z0, zc, _, _ = _draw(10 + L, torch.float32)
        out = reconstruct(zc, None, spaced_steps(300, L), 1.0, 123, _Oracle(z0), SCHED)
        assert out.dtype == torch.float32
        errs[L] = float(torch.max(torch.abs(out - z0)))
    dt = time.perf_counter() - t
    ok = max(errs.values()) < 1e-5 and dt < 5.0
    _report(record_property, ok, "max |z0_hat - z0| " + ", ".join(f"L={k}: {v:.1e}" for k, v in errs.items())
            + f", {dt:.2f}s")


def test_A4_matches_ddim(record_property):
    t = time.perf_counter()
    worst = 0.0
    ab = np.concatenate([[1.0], SCHED.alpha_bars])
    d = _Smooth()
    fn = lambda x, n: d.cond(torch.from_numpy(x), None, n).numpy()
    for L in PLAN_LENGTHS:
        z0, _, _, _ = _draw(20 + L)
        plan = spaced_steps(300, L)
        # zero residual: z_c = z_0
        out, traj = reconstruct(z0, None, plan, 1.0, 7, d, SCHED, return_trajectory=True)
        eps = seeded_noise(z0.shape, 7, torch.float64).numpy()
        x_N = math.sqrt(ab[300]) * z0.numpy() + math.sqrt(1 - ab[300]) * eps
        ref, ref_traj = ddim_sample(x_N, fn, ab, plan.steps)
        for a, b in zip(traj, ref_traj):
            worst = max(worst, float(np.max(np.abs(a.numpy() - b))))
        worst = max(worst, float(np.max(np.abs(out.numpy() - ref))))
    dt = time.perf_counter() - t
    _report(record_property, worst < 1e-10 and dt < 5.0, f"max trajectory diff {worst:.2e}, {dt:.2f}s")


def test_A5_range_coder(record_property):
    t = time.perf_counter()
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = 500
        mu = rng.normal(0, 3, n)
        sigma = np.exp(rng.uniform(math.log(0.11), math.log(30), n))
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        bank = CdfBank.from_gaussians(mu, sigma)
        data = encode_stream(sym, (bank, np.arange(n)))
        failures += not np.array_equal(decode_stream(data, (bank, np.arange(n)), n), sym)

    rng = np.random.default_rng(2024)
    n = 20000
    mu = rng.normal(0, 3, n)
    sigma = np.exp(rng.uniform(math.log(0.2), math.log(8), n))
    y_hat = mu + np.round(rng.normal(0, sigma))
    est = float(rate_estimate(torch.from_numpy(y_hat), EntropyParams(torch.from_numpy(mu), torch.from_numpy(sigma))))
    sym = symbols_of(torch.from_numpy(y_hat), torch.from_numpy(mu)).numpy()
    data = encode_stream(sym, (bitstream.scale_bank(), bitstream.scale_index(sigma)))
    bits = 8 * (len(data) - TRAILER)
    dt = time.perf_counter() - t
    ok = failures == 0 and abs(bits - est) <= 0.01 * est + 64 and dt < 30
    _report(record_property, ok, f"100 seeds, {failures} round-trip failures; {n} symbols coded in {bits} bits "
                                 f"vs estimate {est:.0f} ({(bits - est) / est:+.2%}), {dt:.1f}s")


def test_A6_gradient_check(record_property):
    t = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig(ae_width=8, codec_width=8, y_channels=4, side_channels=2, cond_channels=4,
                      codebook_size=16, denoiser_width=8, denoiser_blocks=2, temb_dim=8)
    m = RRDModel(cfg).double()
    params = _trainable(m)
    m.codec.train()
    m.control.train()
    with torch.no_grad():  # move off the zero init so the control branch carries gradient
        for zc in m.control.zero:
            zc.weight.normal_(0, 0.1)
            zc.bias.normal_(0, 0.1)
    z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    draws = draw_randomness(m, z0, torch.Generator().manual_seed(0))
    train_cfg = TrainConfig()
    err = grad_check(lambda tape: stage1_loss(m, z0, train_cfg, draws, tape=tape).total, params,
                     samples_per_param=3, generator=torch.Generator().manual_seed(0))

    # stop-gradient terms: codebook loss must not reach the encoder side, commitment must not move the entries
    rep = stage1_loss(m, z0, train_cfg, draws)
    enc = list(m.codec.g_a.parameters()) + list(m.codec.h_a.parameters())
    leak = 0.0
    for g in torch.autograd.grad(rep.terms["codebook"], enc, allow_unused=True, retain_graph=True):
        leak = max(leak, 0.0 if g is None else float(g.abs().max()))
    (g,) = torch.autograd.grad(rep.terms["commitment"], [m.codec.codebook.entries], allow_unused=True)
    leak = max(leak, 0.0 if g is None else float(g.abs().max()))
    dt = time.perf_counter() - t
    ok = err <= 1e-3 and leak == 0.0 and dt < 120
    _report(record_property, ok, f"{len(params)} parameter tensors, max relative error {err:.2e}, "
                                 f"stop-gradient leak {leak:g}, {dt:.1f}s")


def test_A7_loss_identity(record_property):
    t = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig(ae_width=8, codec_width=8, y_channels=4, side_channels=2, cond_channels=4,
                      codebook_size=16, denoiser_width=8, denoiser_blocks=2, temb_dim=8)
    m = RRDModel(cfg)
    worst = 0.0
    for trial in range(100):
        g = torch.Generator().manual_seed(trial)
        z0 = torch.randn(3, 4, 4, 4, generator=g)
        zc = z0 + 0.5 * torch.randn(z0.shape, generator=g)
        noise = torch.randn(z0.shape, generator=g)
        n = torch.randint(1, 301, (3,), generator=g)
        out = 3 * torch.randn(z0.shape, generator=g)
        m.denoise_cond = lambda z, c, n_, out=out: out
        a = float(noise_estimation_loss(m, z0, zc, None, n, noise))
        b = float(z0_space_loss(m, z0, zc, None, n, noise))
        worst = max(worst, abs(a - b) / max(abs(b), 1e-30))
    dt = time.perf_counter() - t
    _report(record_property, worst < 1e-4 and dt < 5.0, f"100 trials, worst relative gap {worst:.2e}, {dt:.2f}s")


# training study ----------------------------------------------------------------------------

SEEDS = (0, 1, 2)
EVAL_L = 2
STUDY_MODEL = ModelConfig()
STUDY_TRAIN = TrainConfig()
CORPUS, HELDOUT = 2048, 64


def _study_key() -> str:
    blob = json.dumps([STUDY_MODEL.__dict__, STUDY_TRAIN.to_dict(), SEEDS, CORPUS, HELDOUT, EVAL_L], sort_keys=True)
    import hashlib

    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _stage1(model, latents, seed, lam, warm=None):
    """Warm-up at the high rate weight, then the target phase. Returns (model, warm state)."""
    cfg = replace(STUDY_TRAIN, seed=seed, lambda_r=lam)
    if warm is None:
        train_stage1(model, latents, replace(cfg, iters=0))
        warm = copy.deepcopy(model.state_dict())
    else:
        model.load_state_dict(warm)
    train_stage1(model, latents, cfg, skip_warmup=True)
    return model, warm


def _mean_bpp(model, images) -> float:
    return float(np.mean([bitstream.read_header(bitstream.compress_array(x, model, L=EVAL_L)).bpp for x in images]))


def _run_study(workdir: Path) -> dict:
    torch.set_num_threads(1)
    images = toy_corpus(CORPUS, seed=0)
    held = toy_corpus(HELDOUT, seed=1, split="heldout")
    t0 = time.perf_counter()
    foundation = pretrain_foundation(STUDY_MODEL, images, STUDY_TRAIN)
    latents = encode_corpus(foundation, images)
    res = {"relay_mse": {}, "noise_mse": {}, "stage2_mse": {}, "bpp": {}, "lambda_mse": {}}
    for seed in SEEDS:
        relay, warm = _stage1(copy.deepcopy(foundation), latents, seed, 1.0)
        res["relay_mse"][seed] = evaluate_heldout(relay, held, EVAL_L)["mse"]
        noise = copy.deepcopy(foundation)
        noise.cfg = replace(noise.cfg, start="noise")
        _stage1(noise, latents, seed, 1.0)
        res["noise_mse"][seed] = evaluate_heldout(noise, held, EVAL_L)["mse"]
        if seed == SEEDS[0]:
            save_checkpoint(relay, workdir / "relay_s0.npz", {"stage": "1", "lambda_r": 1.0, "L": EVAL_L})
            for lam in LAMBDA_R_GRID:
                m = relay if lam == 1.0 else _stage1(copy.deepcopy(foundation), latents, seed, lam, warm)[0]
                res["bpp"][lam] = _mean_bpp(m, held)
                res["lambda_mse"][lam] = evaluate_heldout(m, held, EVAL_L)["mse"]
        s2 = train_stage2(relay, images, latents, replace(STUDY_TRAIN, seed=seed, stage="2", L=EVAL_L))
        res["stage2_mse"][seed] = evaluate_heldout(s2, held, EVAL_L)["mse"]
    res["train_seconds"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    cache = os.environ.get("RRD_ACCEPTANCE_CACHE")
    workdir = Path(cache) / _study_key() if cache else tmp_path_factory.mktemp("study")
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / "results.json"
    if path.exists() and (workdir / "relay_s0.npz").exists():
        res = json.loads(path.read_text())
    else:
        res = json.loads(json.dumps(_run_study(workdir)))  # normalise keys to strings
        path.write_text(json.dumps(res, indent=1))
    res["checkpoint"] = workdir / "relay_s0.npz"
    res["model"] = load_checkpoint(res["checkpoint"])[0]
    res["held"] = toy_corpus(HELDOUT, seed=1, split="heldout")
    return res


def test_A8_relay_beats_noise_start(study, record_property):
    wins = [study["relay_mse"][str(s)] <= study["noise_mse"][str(s)] for s in SEEDS]
    detail = ", ".join(f"seed {s}: relay {study['relay_mse'][str(s)]:.5f} vs noise {study['noise_mse'][str(s)]:.5f}"
                       for s in SEEDS)
    _report(record_property, sum(wins) >= 2, f"{sum(wins)}/3 seeds ({detail}); study {study['train_seconds']:.0f}s")


def test_A9_stage2_improves(study, record_property):
    wins = [study["stage2_mse"][str(s)] < study["relay_mse"][str(s)] for s in SEEDS]
    detail = ", ".join(f"seed {s}: {study['relay_mse'][str(s)]:.5f} -> {study['stage2_mse'][str(s)]:.5f}"
                       for s in SEEDS)
    _report(record_property, sum(wins) >= 2, f"{sum(wins)}/3 seeds ({detail})")


def test_A10_rate_control(study, record_property):
    lams = sorted(LAMBDA_R_GRID)
    bpp = [study["bpp"][str(float(lam))] for lam in lams]
    ok = all(a < b for a, b in zip(bpp, bpp[1:]))
    _report(record_property, ok, "mean bpp " + ", ".join(f"{lam:g}: {b:.4f}" for lam, b in zip(lams, bpp)))


def test_A11_step_count_speedup(study, record_property):
    t = time.perf_counter()
    model = study["model"]
    with torch.no_grad():
        out = model.codec(model.ae.encode_image(torch.from_numpy(study["held"][:16])), "eval")
    secs = {L: time_denoising(model, out["z_c"], out["c"], L, 1.0, 0, repeats=5)["seconds"] for L in (2, 5, 50)}
    r5, r2 = secs[50] / secs[5], secs[50] / secs[2]
    dt = time.perf_counter() - t
    ok = 7 <= r5 <= 13 and 17 <= r2 <= 33 and dt < 120
    _report(record_property, ok, f"time(50)/time(5) = {r5:.2f}, time(50)/time(2) = {r2:.2f} "
                                 f"({', '.join(f'L={k}: {v * 1e3:.1f} ms' for k, v in secs.items())})")


def test_A12_guidance_sweep(study, record_property):
    t = time.perf_counter()
    model = study["model"]
    streams = [bitstream.compress_array(x, model, L=EVAL_L) for x in study["held"][:16]]
    recon = {s: np.stack([bitstream.decompress_array(d, model, lambda_s=s) for d in streams])
             for s in LAMBDA_S_SWEEP}
    base = recon[0.0].astype(np.float64)
    D = [float(np.mean((recon[s] - base) ** 2)) for s in LAMBDA_S_SWEEP]
    monotone = all(a <= b for a, b in zip(D, D[1:]))

    with torch.no_grad():
        code = bitstream.decode_latent_code(streams[0], model)[1]
        z = code.z_c
        e_b, e_c = model.denoise_base(z, 300), model.denoise_cond(z, code.c, 300)
    exact = torch.equal(cfg_blend(e_b, e_c, 0.0), e_b) and torch.equal(cfg_blend(e_b, e_c, 1.0), e_c)
    dt = time.perf_counter() - t
    ok = monotone and exact and dt < 300
    _report(record_property, ok, "D " + ", ".join(f"{s:g}: {d:.2e}" for s, d in zip(LAMBDA_S_SWEEP, D))
            + f"; endpoint identities {'exact' if exact else 'broken'}")


_DECODE_SCRIPT = """
import sys, numpy as np, torch
torch.set_num_threads(2)
from rrdcodec.nets import load_checkpoint
from rrdcodec.bitstream import decompress_array
model, _ = load_checkpoint(sys.argv[1])
np.save(sys.argv[3], decompress_array(open(sys.argv[2], 'rb').read(), model))
"""


def test_A13_bitstream_robustness(study, record_property, tmp_path):
    t = time.perf_counter()
    model = study["model"]
    streams = [bitstream.compress_array(x, model, L=EVAL_L) for x in study["held"][:4]]
    rng = np.random.default_rng(13)
    missed = 0
    for _ in range(1000):
        data = bytearray(streams[rng.integers(len(streams))])
        pos = int(rng.integers(bitstream.HEADER_SIZE, len(data)))
        data[pos] ^= int(rng.integers(1, 256))
        try:
            bitstream.decode_latent_code(bytes(data), model)
            missed += 1
        except CorruptStreamError:
            pass

    first = bitstream.decompress_array(streams[0], model)
    second = bitstream.decompress_array(streams[0], model)
    same_run = first.tobytes() == second.tobytes()
    (tmp_path / "a.rdei").write_bytes(streams[0])
    proc = subprocess.run([sys.executable, "-c", _DECODE_SCRIPT, str(study["checkpoint"]), str(tmp_path / "a.rdei"),
                           str(tmp_path / "other.npy")], capture_output=True, text=True)
    other = np.load(tmp_path / "other.npy") if proc.returncode == 0 else None
    same_process = other is not None and other.tobytes() == first.tobytes()
    dt = time.perf_counter() - t
    ok = missed == 0 and same_run and same_process and dt < 300
    _report(record_property, ok, f"{1000 - missed}/1000 corruptions detected; repeat decode identical: {same_run}; "
                                 f"separate-process decode identical: {same_process}; {dt:.1f}s")
