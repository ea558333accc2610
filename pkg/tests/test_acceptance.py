"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``RESULTS`` and repeated in the pytest
terminal summary (see conftest.py). Run directly with
``python tests/test_acceptance.py`` to get just the eight lines.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from sslnet import data as D
from sslnet import dsp
from sslnet import tensor as T
from sslnet.cli import main
from sslnet.dsp import AudioClip, SpectralConfig
from sslnet.encoders import FileEmbeddingProvider, PseudoEmbeddingProvider, SemanticEncoderSpec, SpectralEncoderSpec
from sslnet.fusion import FusionConfig, fuse, init_fusion_params, sampling_gates
from sslnet.synth import SynthSpec, generate, generate_complementary
from sslnet.tensor import Tensor
from sslnet.trainer import (ModelConfig, TrainConfig, default_model_config, evaluate, fit, forward, init_params,
                            label_budget_sweep)

RESULTS: dict[int, str] = {}


def report(n: int, passed: bool, detail: str):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    assert passed, line


# ---------------------------------------------------------------- 1. DSP oracles

def test_criterion_1_dsp_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    fft_err = 0.0
    for n in (8, 16, 32, 64, 128, 256, 512):
        for _ in range(10):
            x = rng.standard_normal(n)
            fft_err = max(fft_err, np.max(np.abs(dsp.fft_real(x) - dsp.naive_dft(x))) / np.linalg.norm(x))

    cfg = SpectralConfig()
    x = rng.uniform(-0.5, 0.5, cfg.sample_rate)
    frames = dsp.frame_signal(x, cfg.n_fft, cfg.hop_length) * dsp.hann(cfg.n_fft)
    mag = dsp.stft_magnitude(AudioClip(x, cfg.sample_rate), cfg)
    weight = np.full(mag.shape[0], 2.0)
    weight[[0, -1]] = 1.0
    spectral = (weight[:, None] * mag ** 2).sum(axis=0) / cfg.n_fft
    temporal = (frames ** 2).sum(axis=1)
    parseval_err = float(np.max(np.abs(spectral - temporal) / temporal))

    base = dsp.mfcc(AudioClip(x, cfg.sample_rate), cfg)
    mfcc_err = 0.0
    for c in (0.1, 0.5, 1.9):
        scaled = dsp.mfcc(AudioClip(c * x, cfg.sample_rate), cfg)
        mfcc_err = max(mfcc_err, float(np.max(np.abs(scaled[1:] - base[1:]))))
    elapsed = time.perf_counter() - start

    ok = fft_err < 1e-9 and parseval_err < 1e-9 and mfcc_err < 1e-9 and elapsed < 10
    report(1, ok, f"fft rel err {fft_err:.1e}, Parseval rel err {parseval_err:.1e}, "
                  f"MFCC 1..n-1 drift {mfcc_err:.1e}, {elapsed:.1f}s (limits 1e-9, 1e-9, 1e-9, 10s)")


# ---------------------------------------------------------------- 2. gradients

def _op_errors(rng) -> dict[str, float]:
    def data(shape):
        return rng.standard_normal(shape)

    errors = {}

    def check(name, f, x):
        errors[name] = max(errors.get(name, 0.0), T.grad_check(f, x))

    for _ in range(10):
        b, w, bias = Tensor(data((4, 2))), Tensor(data((4, 3))), Tensor(data(3))
        other, probe = Tensor(data((3, 4))), Tensor(data((3, 4)))
        relu_x = data((3, 4))
        relu_x = np.where(np.abs(relu_x) < 0.1, relu_x + 0.2 * np.sign(relu_x + 1e-12), relu_x)
        labels = rng.integers(0, 5, size=4)
        check("matmul", lambda t: T.sum_all(T.matmul(t, b)), data((3, 4)))
        check("linear", lambda t: T.sum_all(T.sigmoid(T.linear(t, w, bias))), data((2, 4)))
        check("add", lambda t: T.sum_all(T.mul(T.add(t, other), probe)), data((3, 4)))
        check("sub", lambda t: T.sum_all(T.mul(T.sub(t, other), probe)), data((3, 4)))
        check("mul", lambda t: T.sum_all(T.mul(t, other)), data((3, 4)))
        check("scale", lambda t: T.sum_all(T.mul(T.scale(t, 2.5), probe)), data((3, 4)))
        check("sigmoid", lambda t: T.sum_all(T.sigmoid(t)), data((3, 4)))
        check("relu", lambda t: T.sum_all(T.mul(T.relu(t), probe)), relu_x)
        check("log", lambda t: T.sum_all(T.log(t)), rng.uniform(0.5, 2.0, (3, 4)))
        check("exp", lambda t: T.sum_all(T.exp(t)), data((3, 4)))
        check("concat", lambda t: T.sum_all(T.mul(T.concat(t, other), T.concat(probe, probe))), data((3, 4)))
        check("reshape", lambda t: T.sum_all(T.mul(T.reshape(t, (12,)), Tensor(probe.values.reshape(12)))),
              data((3, 4)))
        check("repeat", lambda t: T.sum_all(T.mul(T.repeat_last(t, 2), T.concat(probe, probe))), data((3, 4)))
        row_probe = Tensor(data(3))
        check("mean", lambda t: T.sum_all(T.mul(T.mean(t, 1), row_probe)), data((3, 4)))
        check("softmax", lambda t: T.sum_all(T.mul(T.softmax(t), probe)), data((3, 4)))
        noise = rng.gumbel(size=(3, 4))
        check("gumbel_softmax", lambda t: T.sum_all(T.mul(T.gumbel_softmax(t, 0.7, noise=noise), probe)),
              data((3, 4)))
        check("cross_entropy", lambda t: T.cross_entropy(t, labels), data((4, 5)))
        k, kb = Tensor(data((3, 2, 3, 3))), Tensor(data(3))
        pool_probe = Tensor(data((2, 2, 2, 3)))
        check("conv2d+avg_pool2d", lambda t: T.sum_all(T.mul(T.avg_pool2d(T.conv2d(t, k, kb)), pool_probe)),
              data((2, 4, 4, 2)))
        x_img = Tensor(data((2, 4, 4, 2)))
        check("conv2d kernel", lambda t: T.sum_all(T.mul(T.avg_pool2d(T.conv2d(x_img, t, kb)), pool_probe)),
              data((3, 2, 3, 3)))
    return errors


def _pipeline_error(strategy: str, seed: int) -> float:
    cfg = ModelConfig(
        n_classes=3,
        fusion=FusionConfig(strategy, d=4, tau1=0.8, tau2=1.2),
        spectral=SpectralEncoderSpec(height=8, width=8, widths=(2, 3), out_dim=4),
        semantic=SemanticEncoderSpec(d_emb=5, hidden=6, out_dim=4),
        head_hidden=5,
    )
    params = init_params(cfg, T.Rng(seed))
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith(".b") or name.startswith("head.fc1"):
            p.values[:] = rng.standard_normal(p.shape) * 0.3
    stacks = rng.standard_normal((3, 3, 8, 8))
    emb = rng.standard_normal((3, 5))
    labels = np.array([0, 2, 1])
    noise = (rng.gumbel(size=(3, 8)), rng.gumbel(size=(3, 8)))
    errors = T.grad_check_params(
        lambda: T.cross_entropy(forward(params, cfg, stacks, emb, noise=noise), labels), params)
    return max(errors.values())


def test_criterion_2_gradients():
    start = time.perf_counter()
    errors = _op_errors(np.random.default_rng(7))
    for strategy in ("fixed", "shared", "sampling"):
        errors[f"pipeline/{strategy}"] = _pipeline_error(strategy, 11)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 60
    report(2, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.1e}, {elapsed:.1f}s "
                  f"(limits 1e-4, 60s)")


# ---------------------------------------------------------------- 3. fusion contracts

def test_criterion_3_fusion_contracts():
    rng = np.random.default_rng(3)
    problems = []
    d = 16
    f_spe, f_sem = Tensor(rng.standard_normal((8, d))), Tensor(rng.standard_normal((8, d)))
    widths = []
    for strategy in ("fixed", "shared", "sampling"):
        cfg = FusionConfig(strategy, d=d)
        params = init_fusion_params(cfg, T.Rng(1).stream("init"))
        widths.append(fuse(f_spe, f_sem, params, cfg, rng=rng).shape[1])
    if widths != [2 * d, 2 * d, 4 * d]:
        problems.append(f"widths {widths}")

    cfg = FusionConfig("shared", d=d)
    params = init_fusion_params(cfg, T.Rng(2).stream("init"))
    for p in params.values():
        p.values[:] = rng.standard_normal(p.shape)
    h = fuse(f_spe, f_sem, params, cfg).values
    inputs = np.concatenate([f_spe.values, f_sem.values], axis=1)
    if not np.all(np.abs(h) < np.abs(inputs)):
        problems.append("shared gating bound")

    cfg = FusionConfig("sampling", d=d, tau1=0.5, tau2=2.0)
    params = init_fusion_params(cfg, T.Rng(3).stream("init"))
    simplex_err = 0.0
    for _ in range(20):
        for s in sampling_gates(f_spe, f_sem, params, cfg, rng=rng):
            simplex_err = max(simplex_err, float(np.max(np.abs(s.values.reshape(8, d, 2).sum(-1) - 1))))
    if simplex_err > 1e-6:
        problems.append(f"simplex err {simplex_err:.1e}")

    monotone = True
    for _ in range(200):
        logits, noise = rng.standard_normal(6), rng.gumbel(size=6)
        peaks = [T.gumbel_softmax(Tensor(logits), tau, noise=noise).values.max() for tau in (1, 0.5, 0.1, 0.01)]
        monotone &= all(b >= a for a, b in zip(peaks, peaks[1:]))
    if not monotone:
        problems.append("sharpening not monotone")
    report(3, not problems, f"widths {widths}, gating bound held, simplex err {simplex_err:.1e}, "
                            f"tau sharpening monotone={monotone}" + (f"; problems: {problems}" if problems else ""))


# ---------------------------------------------------------------- 4. parameter counts

def test_criterion_4_parameter_counts():
    d = 128
    counts = {s: T.count_params(init_fusion_params(FusionConfig(s, d=d), T.Rng(0).stream("init")))
              for s in ("fixed", "shared", "sampling")}
    hand = {"fixed": 0, "shared": 2 * (d * d + d), "sampling": 4 * (d * 2 * d + 2 * d)}
    model_ok = True
    totals = {}
    for s in ("fixed", "shared", "sampling"):
        cfg = default_model_config(20, FusionConfig(s), SpectralConfig())
        spectral = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 128 + 128)
        semantic = (256 * 128 + 128) + (128 * 128 + 128)
        head_in = 4 * d if s == "sampling" else 2 * d
        head = (head_in * 64 + 64) + (64 * 20 + 20)
        totals[s] = T.count_params(init_params(cfg, T.Rng(0)))
        model_ok &= totals[s] == spectral + semantic + hand[s] + head == cfg.param_count()
    ok = counts == hand and counts["fixed"] < counts["shared"] < counts["sampling"] and model_ok
    report(4, ok, f"fusion params {counts['fixed']} < {counts['shared']} < {counts['sampling']} "
                  f"(closed form {hand['fixed']}, {hand['shared']}, {hand['sampling']}); "
                  f"full models {totals} match hand counts={model_ok}")


# ---------------------------------------------------------------- 5. synthetic end-to-end

def test_criterion_5_synthetic_end_to_end(tmp_path):
    start = time.perf_counter()
    spec = SynthSpec(n_classes=5, clips_per_class=200, duration=3.0, snr=10.0, seed=0)
    manifest = D.read_manifest(generate(spec, tmp_path))
    cfg = SpectralConfig()
    feats = D.extract_features(manifest, cfg, PseudoEmbeddingProvider(0, 256, cfg))
    accs = {}
    for strategy in ("fixed", "shared", "sampling"):
        model = default_model_config(5, FusionConfig(strategy), cfg)
        result = fit(feats, TrainConfig(epochs=30), model)
        accs[strategy] = evaluate(result.bundle, feats, "test").accuracy
    elapsed = time.perf_counter() - start
    ok = all(a >= 0.95 for a in accs.values()) and elapsed < 600
    report(5, ok, "test accuracy " + ", ".join(f"{k}={v:.3f}" for k, v in accs.items())
                  + f" after 30 epochs, total {elapsed:.0f}s (limits >=0.95, 600s)")


# ---------------------------------------------------------------- 6. complementarity

def test_criterion_6_complementarity(tmp_path):
    manifest = D.read_manifest(generate_complementary(tmp_path, clips_per_class=100, seed=1))
    cfg = SpectralConfig()
    feats = D.extract_features(manifest, cfg, FileEmbeddingProvider(tmp_path / "embeddings.ssle", 256))
    train_cfg = TrainConfig(epochs=30)
    accs = {}
    for name, strategy, branches in (("fixed", "fixed", "both"), ("shared", "shared", "both"),
                                     ("sampling", "sampling", "both"), ("spectral-only", "fixed", "spectral"),
                                     ("learned-only", "fixed", "learned")):
        model = default_model_config(len(feats.vocabulary), FusionConfig(strategy), cfg, branches=branches)
        accs[name] = evaluate(fit(feats, train_cfg, model).bundle, feats, "test").accuracy
    best_single = max(accs["spectral-only"], accs["learned-only"])
    worst_fused = min(accs["fixed"], accs["shared"], accs["sampling"])
    ok = worst_fused - best_single >= 0.15
    report(6, ok, ", ".join(f"{k}={v:.3f}" for k, v in accs.items())
                  + f"; worst fused - best single = {100 * (worst_fused - best_single):.1f} pp (limit >= 15 pp)")


# ---------------------------------------------------------------- 7. label-budget trend

def test_criterion_7_label_budget(tmp_path):
    # 290 clips per class gives 203 training clips per class, enough for k = 200
    spec = SynthSpec(n_classes=5, clips_per_class=290, duration=3.0, snr=10.0, seed=3)
    manifest = D.read_manifest(generate(spec, tmp_path))
    cfg = SpectralConfig()
    feats = D.extract_features(manifest, cfg, PseudoEmbeddingProvider(0, 256, cfg))
    base = default_model_config(5, FusionConfig("sampling"), cfg)
    train_cfg = TrainConfig(epochs=10)
    fused = label_budget_sweep(feats, [10, 50, 200], train_cfg, base, ("fixed", "shared", "sampling"))
    single = label_budget_sweep(feats, [200], train_cfg, base, ("spectral", "learned"))
    acc = {(r["strategy"], r["budget"]): r["accuracy"] for r in fused + single}
    trend = {s: acc[(s, 200)] >= acc[(s, 10)] - 0.02 for s in ("fixed", "shared", "sampling")}
    best_fused = max(acc[(s, 200)] for s in ("fixed", "shared", "sampling"))
    best_single = max(acc[("spectral", 200)], acc[("learned", 200)])
    ok = all(trend.values()) and best_fused >= best_single
    detail = "; ".join(f"{s}: k=10 {acc[(s, 10)]:.3f}, k=50 {acc[(s, 50)]:.3f}, k=200 {acc[(s, 200)]:.3f}"
                       for s in ("fixed", "shared", "sampling"))
    report(7, ok, f"{detail}; best fused@200 {best_fused:.3f} vs best single@200 {best_single:.3f} "
                  f"(spectral {acc[('spectral', 200)]:.3f}, learned {acc[('learned', 200)]:.3f})")


# ---------------------------------------------------------------- 8. determinism

DET_CONFIG = """
spectral: {n_fft: 512, hop_length: 256, n_mels: 32, n_mfcc: 12, height: 32, width: 32}
train: {epochs: 3, batch_size: 16}
synth: {n_classes: 3, clips_per_class: 20, duration: 1.5}
"""


def _pipeline(root: Path, config: Path) -> dict[str, Path]:
    common = ["--config", str(config)]
    manifest = str(root / "data/manifest.csv")
    steps = [
        ["synth", *common, "--out", str(root / "data")],
        ["extract", *common, "--manifest", manifest, "--out", str(root / "feat")],
        ["train", *common, "--manifest", manifest, "--features", str(root / "feat/features.sslf"),
         "--out", str(root / "run"), "--seed", "7", "--strategy", "sampling"],
        ["eval", *common, "--manifest", manifest, "--bundle", str(root / "run/model"), "--out", str(root / "run")],
        ["dump-embeddings", *common, "--manifest", manifest, "--bundle", str(root / "run/model"),
         "--out", str(root / "run")],
        ["sweep", *common, "--manifest", manifest, "--features", str(root / "feat/features.sslf"),
         "--budgets", "2,5", "--epochs", "1", "--out", str(root / "sweep")],
    ]
    for step in steps:
        assert main(step) == 0, step
    return {str(p.relative_to(root)): p for p in sorted(root.rglob("*")) if p.is_file()}


def _close(a, b) -> bool:
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return abs(a - b) <= 1e-12
    return a == b


def test_criterion_8_determinism(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(DET_CONFIG)
    first = _pipeline(tmp_path / "a", config)
    second = _pipeline(tmp_path / "b", config)
    mismatched = []
    if first.keys() != second.keys():
        mismatched.append("file sets differ")
    text_checked = binary_checked = 0
    for rel, path in first.items():
        other = second.get(rel)
        if other is None:
            continue
        if path.suffix == ".json" and path.name != "bundle.json":
            text_checked += 1
            if not _close(json.loads(path.read_text()), json.loads(other.read_text())):
                mismatched.append(rel)
        else:
            binary_checked += 1
            if hashlib.sha256(path.read_bytes()).digest() != hashlib.sha256(other.read_bytes()).digest():
                mismatched.append(rel)
    report(8, not mismatched, f"{text_checked} history/metrics/sweep files equal to 1e-12, "
                              f"{binary_checked} other artifacts (WAV, CSV, SSLF, SSLE, bundle) bitwise-equal"
                              + (f"; mismatched: {mismatched}" if mismatched else ""))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
