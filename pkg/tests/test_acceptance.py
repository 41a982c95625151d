"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line to the terminal. The
training-heavy checks (6 and 7) run ACCEPTANCE_EPOCHS epochs per model,
20 unless SACONVNET_ACCEPTANCE_EPOCHS says otherwise; 100 epochs for
fifteen models is several hours on one core.

    python3 -m pytest tests/test_acceptance.py -v
    python3 -m pytest tests/test_acceptance.py -v -m "not slow"   # seconds, not an hour
"""
import json
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from saconvnet.cli import main
from saconvnet.climate import percentile, synthetic_dataset
from saconvnet.metrics import ConfusionMatrix, MetricsReport, aggregate, derive_metrics, roc_auc
from saconvnet.nn import ModelConfig, SAConvNet, aaconv, conv2d, init_params, multi_head_attention
from saconvnet.training import TrainConfig, class_weights, predict_proba, train

ACCEPTANCE_EPOCHS = int(os.environ.get("SACONVNET_ACCEPTANCE_EPOCHS", "20"))
SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def record(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def sorted_interpolation(x, m):
    s = sorted(x)
    k = m * (len(s) - 1)
    lo, hi = math.floor(k), math.ceil(k)
    return s[lo] + (k - lo) * (s[hi] - s[lo])


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.slow
def test_c1_gradient_check(verdict, capsys):
    start = time.perf_counter()
    rc = main(["gradcheck"])
    seconds = time.perf_counter() - start
    out = capsys.readouterr().out
    worst = max(float(line.split()[-1]) for line in out.splitlines() if "worst relative error" in line)
    verdict(1, rc == 0 and seconds < 300, f"worst relative error {worst:.2e}, {seconds:.0f}s")


def test_c2_percentile_oracle(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        x = rng.standard_normal(int(rng.integers(1, 501)))
        for m in (0, 0.25, 0.5, 0.91, 0.95, 1):
            worst = max(worst, abs(percentile(x, m) - sorted_interpolation(x.tolist(), m)))
    worked = percentile([10, 20, 30, 40, 50], 0.95)
    verdict(2, worst <= 1e-12 and abs(worked - 48) <= 1e-12, f"max deviation {worst:.1e}, worked case {worked}")


def test_c3_auc_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 5)))
        mismatches += roc_auc(scores, labels) != float(pairwise_auc(scores.tolist(), labels.tolist()))
    verdict(3, mismatches == 0, f"{mismatches} of 500 sets differ")


def test_c4_aaconv_decomposition(verdict):
    rng = np.random.default_rng(4)
    cfg = ModelConfig()
    differing = 0
    for trial in range(100):
        p = init_params(cfg, seed=trial)
        heads = [tuple(p[f"block0.attn.head{h}.{n}"] for n in ("w_q", "w_k", "w_v")) for h in range(cfg.num_heads)]
        kernel, bias, w_mh = p["block0.conv.kernel"], rng.standard_normal(cfg.conv_channels), p["block0.attn.w_mh"]
        x = rng.standard_normal((cfg.input_h, cfg.input_w, cfg.input_d))
        out = aaconv(x, kernel, bias, heads, w_mh).data
        same = np.array_equal(out[..., : cfg.conv_channels], conv2d(x, kernel, bias).data) and np.array_equal(
            out[..., cfg.conv_channels :], multi_head_attention(x, heads, w_mh).data
        )
        differing += not same
    verdict(4, differing == 0, f"{differing} of 100 inputs differ")


@pytest.mark.slow
def test_c5_overfit_smoke(verdict):
    start = time.perf_counter()
    ds = synthetic_dataset(0, 40, 3.0)
    cfg = TrainConfig(epochs=100, seed=0)
    res = train(SAConvNet.create(ModelConfig.for_arch("saconvnet-hw"), seed=0), ds.x, ds.y, cfg)
    seconds = time.perf_counter() - start
    # the training objective evaluated without dropout
    probs = predict_proba(res.model, ds.x)
    w = class_weights(ds.y)
    loss = float(-np.mean(w[ds.y] * np.log(np.maximum(probs[np.arange(len(ds.y)), ds.y], 1e-12))))
    acc = float(np.mean(probs.argmax(1) == ds.y))
    ok = acc == 1.0 and loss < 0.05 and seconds < 600
    verdict(5, ok, f"train accuracy {acc:.3f}, loss {loss:.4f}, {seconds:.0f}s")


def _mean_test_metric(arch, signal, metric):
    values = []
    for seed in SEEDS:
        ds = synthetic_dataset(seed, 1000, signal)
        res = train(SAConvNet.create(ModelConfig.for_arch(arch), seed=seed), *ds.train, TrainConfig(seed=seed, epochs=ACCEPTANCE_EPOCHS))
        x, y = ds.test
        probs = predict_proba(res.model, x)
        values.append(metric(probs, y))
    return float(np.mean(values)), values


def _accuracy(probs, y):
    return float(np.mean(probs.argmax(1) == y))


@pytest.mark.slow
def test_c6_separation_ordering(verdict):
    acc = {arch: _mean_test_metric(arch, 2.0, _accuracy) for arch in ("convnet", "saconvnet", "saconvnet-hw")}
    conv, sa, hw = (acc[a][0] for a in ("convnet", "saconvnet", "saconvnet-hw"))
    ok = hw >= sa >= conv - 0.02 and hw - conv >= 0.02
    runs = "; ".join(f"{a} {[round(v, 3) for v in acc[a][1]]}" for a in acc)
    verdict(6, ok, f"mean test accuracy convnet {conv:.4f}, saconvnet {sa:.4f}, saconvnet-hw {hw:.4f} ({ACCEPTANCE_EPOCHS} epochs; {runs})")


@pytest.mark.slow
def test_c7_null_signal(verdict):
    mean, runs = _mean_test_metric("saconvnet-hw", 0.0, lambda p, y: roc_auc(p[:, 1], y))
    verdict(7, 0.4 <= mean <= 0.6, f"mean test AUC {mean:.4f} over {[round(v, 3) for v in runs]} ({ACCEPTANCE_EPOCHS} epochs)")


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_synth")
    assert main(["synth", "--seed", "8", "--days", "200", "--signal", "3", "--out", str(out)]) == 0
    return out


def _config(tmp_path, **train):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"model": {"total_filters_per_block": 6, "attn_channels": 2, "d_k": 2}, "train": train}))
    return str(path)


def test_c8_train_determinism(verdict, synth_dir, tmp_path):
    cfg = _config(tmp_path, epochs=3)
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["train", "--data", str(synth_dir), "--config", cfg, "--seed", "11", "--out", str(out)]) == 0
        runs.append({f: (out / f).read_bytes() for f in ("model.ckpt", "train_log.jsonl")})
    same = [f for f in runs[0] if runs[0][f] == runs[1][f]]
    verdict(8, len(same) == 2, f"byte-identical: {same}")


def test_c9_metrics_arithmetic(verdict):
    d = derive_metrics(ConfusionMatrix(tp=9, tn=87, fp=3, fn=1))
    expected = (0.96, 0.75, 0.90, 2 * 0.75 * 0.9 / 1.65)
    derived_ok = all(abs(a - b) <= 1e-12 for a, b in zip((d.accuracy, d.precision, d.recall, d.f1), expected))
    cm = ConfusionMatrix(1, 1, 1, 1)
    ens = aggregate([MetricsReport(0.1, a, 0.5, 0.5, 0.5, 0.5, cm, 0.95) for a in (1.0, 2.0, 3.0)])
    agg_ok = abs(ens.mean["Accuracy"] - 2) <= 1e-12 and abs(ens.sem["Accuracy"] - 1 / math.sqrt(3)) <= 1e-12
    detail = f"{d.accuracy:.4f}/{d.precision:.4f}/{d.recall:.4f}/{d.f1:.4f}, mean {ens.mean['Accuracy']}, SEM {ens.sem['Accuracy']:.6f}"
    verdict(9, derived_ok and agg_ok and round(d.f1, 4) == 0.8182, detail)


def test_c10_sweep_protocol(verdict, synth_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = main(["sweep", "--data", str(synth_dir), "--config", _config(tmp_path, epochs=1), "--out", str(out)])
    printed = capsys.readouterr().out
    rows = (out / "summary.csv").read_text().splitlines()[1:]
    thresholds = [r.split(",")[0] for r in rows]
    positives = [int(r.split(",")[1]) for r in rows]
    runs = [json.loads((out / f"ensemble_p{round(float(m) * 100)}.json").read_text())["n"] for m in thresholds]
    ok = rc == 0 and len(rows) == 5 and runs == [5] * 5 and "25 trainings" in printed and positives == sorted(positives, reverse=True)
    verdict(10, ok, f"thresholds {thresholds}, runs {runs}, positives {positives}")
