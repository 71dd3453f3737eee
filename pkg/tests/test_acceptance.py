"""Acceptance suite: one test and one summary line per criterion.

The synthetic experiments use seed-pinned data and training runs. SID-style
experiments split each class 50/25/25 into train/dev/test; the checkpoint
with the best dev accuracy is scored on the untouched test split, which is
the accuracy reported and asserted.
"""

import functools
import math
import struct
import time

import numpy as np
import pytest

from corrpool.checkpoint import Checkpoint, from_bytes, to_bytes
from corrpool.diagnostics import toy_gradcheck
from corrpool.downstream import DownstreamModel
from corrpool.errors import FormatError
from corrpool.formats import STACK_MAGIC, read_manifest, read_stack, write_stack
from corrpool.layerwise import LayerStack
from corrpool.metrics import accuracy, eer, fuse_logits
from corrpool.pooling import correlation_pool, mean_pool, statistics_pool
from corrpool.synth import SynthSpec, sample_dataset
from corrpool.training import Example, TrainConfig, evaluate_model, predict_logits, train

SID_EPOCHS = 20
SID_LR = 1e-2
SID_HEADS = {"mean": {"proj_dim": 32}, "correlation": {"proj_dim": 32, "post_proj_dim": 64}}

SV_EPOCHS = 40
SV_LR = 5e-3
SV_HEAD = {"width_divisor": 16}


def sid_spec(regime, **kw):
    return SynthSpec(regime=regime, num_classes=4, utterances_per_class=200, t_min=80, t_max=120, dim=16,
                     num_layers=4, splits=(0.5, 0.25, 0.25), **kw)


@functools.lru_cache(maxsize=None)
def sid_splits(spec):
    data = sample_dataset(spec)
    labels = [c.name for c in data.classes]
    index = {n: i for i, n in enumerate(labels)}

    def split(name):
        return [Example(u.utt_id, LayerStack(u.layers), index[u.label]) for u in data.split(name)]

    return labels, split("train"), split("dev"), split("test")


def fit_sid(spec, pooling, init_logits=None, freeze=False):
    labels, tr, dv, _ = sid_splits(spec)
    cfg = TrainConfig(task="sid", pooling=pooling, epochs=SID_EPOCHS, learning_rate=SID_LR,
                      head=SID_HEADS[pooling], freeze_layer_weights=freeze, seed=0)
    model = DownstreamModel.build("sid", cfg.head_config(spec.dim), spec.num_layers, labels, cfg.seed)
    if init_logits is not None:
        model.weights.logits.assign(init_logits)
    return train(model, tr, cfg, dv)


def test_acceptance_01_gradient_correctness(report):
    start = time.perf_counter()
    errors = {}
    for task in ("sid", "sv"):
        for pooling in ("statistics", "correlation"):
            for dropout in (0.0, 0.25):
                if dropout and pooling == "statistics":
                    continue  # channel dropout only applies to correlation pooling
                errors[f"{task}/{pooling}/p={dropout}"] = toy_gradcheck(task, pooling, dropout)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 30
    report(1, ok, f"max rel. gradient error {worst:.2e} over {len(errors)} configs in {elapsed:.1f}s")
    assert ok, errors


def _pearson_oracle(x):
    t, d = x.shape
    out = []
    for i in range(d):
        for j in range(i + 1, d):
            a = x[:, i] - x[:, i].sum() / t
            b = x[:, j] - x[:, j].sum() / t
            out.append(float(a @ b) / math.sqrt(float(a @ a) * float(b @ b)))
    return np.array(out)


def _two_pass_oracle(x):
    t = x.shape[0]
    mean = x.sum(axis=0) / t
    var = ((x - mean) ** 2).sum(axis=0) / t
    return np.concatenate([mean, np.sqrt(var)])


def _column_sum_oracle(x):
    out = np.zeros(x.shape[1])
    for row in x:
        out += row
    return out / x.shape[0]


def test_acceptance_02_pooling_oracles(report):
    start = time.perf_counter()
    gen = np.random.default_rng(2024)
    worst = {"corr": 0.0, "stats": 0.0, "mean": 0.0}
    for _ in range(100):
        t, d = int(gen.integers(2, 80)), int(gen.integers(2, 12))
        x = gen.normal(gen.normal(0, 3, d), gen.uniform(0.1, 5, d), size=(t, d))
        worst["corr"] = max(worst["corr"], np.abs(correlation_pool(x).data - _pearson_oracle(x)).max())
        worst["stats"] = max(worst["stats"], np.abs(statistics_pool(x).data - _two_pass_oracle(x)).max())
        worst["mean"] = max(worst["mean"], np.abs(mean_pool(x).data - _column_sum_oracle(x)).max())
    elapsed = time.perf_counter() - start
    ok = worst["corr"] <= 1e-10 and worst["stats"] <= 1e-10 and worst["mean"] <= 1e-12 and elapsed < 5
    report(2, ok, f"max abs diff corr {worst['corr']:.1e}, stats {worst['stats']:.1e}, "
                  f"mean {worst['mean']:.1e} in {elapsed:.2f}s")
    assert ok


def _sweep_eer(tar, non):
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    far = (non[None, :] >= thresholds[:, None]).mean(axis=1)
    frr = (tar[None, :] < thresholds[:, None]).mean(axis=1)
    for k in range(len(thresholds)):
        if far[k] <= frr[k]:
            if far[k] == frr[k] or k == 0:
                return float(far[k])
            d0, d1 = far[k - 1] - frr[k - 1], far[k] - frr[k]
            return float(far[k - 1] + d0 / (d0 - d1) * (far[k] - far[k - 1]))
    raise AssertionError("FAR must reach 0 at +inf")


def test_acceptance_03_eer_oracle(report):
    start = time.perf_counter()
    gen = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        n = int(gen.integers(2, 1001))
        n_tar = int(gen.integers(1, n))
        scores = gen.normal(size=n)
        if i % 3 == 0:
            scores = np.round(scores * 4) / 4  # heavy ties
        tar, non = scores[:n_tar] + gen.uniform(0, 2), scores[n_tar:]
        worst = max(worst, abs(eer((tar, non)) - _sweep_eer(tar, non)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 5
    report(3, ok, f"max |eer - sweep| {worst:.1e} on 100 score sets in {elapsed:.2f}s")
    assert ok


def test_acceptance_04_correlation_coded_sid(report):
    start = time.perf_counter()
    spec = sid_spec("correlation_coded", seed=4)
    test = sid_splits(spec)[3]
    corr, mean = fit_sid(spec, "correlation"), fit_sid(spec, "mean")
    acc_c, acc_m = evaluate_model(corr.model, test), evaluate_model(mean.model, test)
    elapsed = time.perf_counter() - start
    ok = acc_c >= 0.90 and acc_m <= 0.35 and elapsed < 600
    report(4, ok, f"test acc correlation {100 * acc_c:.2f}% (>= 90), mean {100 * acc_m:.2f}% (<= 35); "
                  f"dev {100 * corr.state.best_metric:.2f}% / {100 * mean.state.best_metric:.2f}%; {elapsed:.0f}s")
    assert ok


def test_acceptance_05_mean_coded_control(report):
    start = time.perf_counter()
    spec = sid_spec("mean_coded", seed=5)
    test = sid_splits(spec)[3]
    corr, mean = fit_sid(spec, "correlation"), fit_sid(spec, "mean")
    acc_c, acc_m = evaluate_model(corr.model, test), evaluate_model(mean.model, test)
    elapsed = time.perf_counter() - start
    ok = acc_c >= 0.90 and acc_m >= 0.90 and elapsed < 600
    report(5, ok, f"test acc correlation {100 * acc_c:.2f}% (>= 90), mean {100 * acc_m:.2f}% (>= 90); {elapsed:.0f}s")
    assert ok


def test_acceptance_06_layer_weight_recovery(report):
    start = time.perf_counter()
    spec = sid_spec("layer_coded", seed=6, signal_layer=2, separation=0.1)
    gammas = {p: fit_sid(spec, p).model.weights.gammas() for p in ("mean", "correlation")}
    elapsed = time.perf_counter() - start
    ok = all(g[2] >= 0.6 for g in gammas.values()) and elapsed < 600
    detail = ", ".join(f"{p} {np.round(g, 3).tolist()}" for p, g in gammas.items())
    report(6, ok, f"gamma_2 >= 0.6 for both: {detail}; {elapsed:.0f}s")
    assert ok


def test_acceptance_07_layer_weight_transfer(report):
    start = time.perf_counter()
    spec = sid_spec("mixed", seed=7, signal_layer=2, separation=0.1)
    test = sid_splits(spec)[3]
    corr = fit_sid(spec, "correlation").model
    mean = fit_sid(spec, "mean").model
    mean_star = fit_sid(spec, "mean", init_logits=corr.weights.logits.data, freeze=True).model
    np.testing.assert_array_equal(mean_star.weights.gammas(), corr.weights.gammas())

    labels = [ex.label for ex in test]
    logits = {name: predict_logits(m, test) for name, m in (("corr", corr), ("mean", mean), ("mean*", mean_star))}
    acc = {name: accuracy(v, labels) for name, v in logits.items()}
    ids = [ex.utt_id for ex in test]
    fused = fuse_logits([dict(zip(ids, logits["mean*"])), dict(zip(ids, logits["corr"]))])
    acc["fused"] = accuracy(np.stack([fused[i] for i in ids]), labels)
    elapsed = time.perf_counter() - start

    transfer_ok = acc["mean*"] >= acc["mean"]
    fusion_ok = acc["fused"] >= max(acc["mean*"], acc["corr"]) - 0.01
    ok = transfer_ok and fusion_ok and elapsed < 1200
    report(7, ok, f"mean* {100 * acc['mean*']:.2f}% vs mean {100 * acc['mean']:.2f}% "
                  f"({'ok' if transfer_ok else 'below'}); fused {100 * acc['fused']:.2f}% vs corr "
                  f"{100 * acc['corr']:.2f}% ({'ok' if fusion_ok else 'below'}); {elapsed:.0f}s")
    assert ok


@functools.lru_cache(maxsize=None)
def sv_data():
    spec = SynthSpec(regime="correlation_coded", task="sv", num_classes=200, utterances_per_class=10,
                     eval_speakers=10, t_min=80, t_max=120, dim=16, num_layers=4, seed=3)
    data = sample_dataset(spec)
    train_speakers = sorted({u.label for u in data.split("train")})
    index = {n: i for i, n in enumerate(train_speakers)}

    def split(name):
        return [Example(u.utt_id, LayerStack(u.layers), index.get(u.label, -1)) for u in data.split(name)]

    return spec, train_speakers, split("train"), split("dev"), split("test"), data.trials


def fit_sv(pooling, dropout):
    spec, speakers, tr, dv, te, trials = sv_data()
    cfg = TrainConfig(task="sv", pooling=pooling, epochs=SV_EPOCHS, learning_rate=SV_LR, dropout=dropout,
                      head=SV_HEAD, seed=0)
    model = DownstreamModel.build("sv", cfg.head_config(spec.dim), spec.num_layers, speakers, cfg.seed)
    result = train(model, tr, cfg, dv, trials["dev"])
    return evaluate_model(result.model, te, trials["test"])


def test_acceptance_08_synthetic_verification(report):
    start = time.perf_counter()
    eer_c = fit_sv("correlation", 0.0)
    eer_s = fit_sv("statistics", 0.0)
    eer_d = fit_sv("correlation", 0.25)
    elapsed = time.perf_counter() - start
    checks = {"corr <= 10": eer_c <= 0.10, "stats >= 35": eer_s >= 0.35, "dropout +<= 2": eer_d - eer_c <= 0.02}
    ok = all(checks.values()) and elapsed < 900
    failed = [k for k, v in checks.items() if not v]
    report(8, ok, f"test EER correlation {100 * eer_c:.2f}%, statistics {100 * eer_s:.2f}%, "
                  f"correlation+dropout {100 * eer_d:.2f}%; failed: {failed or 'none'}; {elapsed:.0f}s")
    assert ok


def test_acceptance_09_determinism_and_resume(report):
    start = time.perf_counter()
    spec = SynthSpec(regime="correlation_coded", num_classes=4, utterances_per_class=20, t_min=40, t_max=60,
                     dim=8, num_layers=3, seed=9)
    labels, tr, dv, _ = sid_splits(spec)
    cfg = TrainConfig(task="sid", pooling="correlation", epochs=4, dropout=0.25, seed=11,
                      head={"proj_dim": 8, "post_proj_dim": 16})

    def fresh():
        return DownstreamModel.build("sid", cfg.head_config(spec.dim), spec.num_layers, labels, cfg.seed)

    a, b = train(fresh(), tr, cfg, dv), train(fresh(), tr, cfg, dv)
    same_logs = a.log == b.log

    snapshot = {}
    train(fresh(), tr, cfg, dv, stop_after_epoch=2,
          on_epoch=lambda m, s, c: snapshot.update(raw=to_bytes(Checkpoint(m, c, s))))
    ckpt = from_bytes(snapshot["raw"])
    resumed = train(ckpt.model, tr, ckpt.config, dv, resume=ckpt.state)
    bitwise = to_bytes(Checkpoint(resumed.model, cfg, resumed.state)) == to_bytes(Checkpoint(a.model, cfg, a.state))
    elapsed = time.perf_counter() - start
    ok = same_logs and bitwise and resumed.log == a.log and elapsed < 300
    report(9, ok, f"identical logs {same_logs}, resume bitwise {bitwise}; {elapsed:.1f}s")
    assert ok


def test_acceptance_10_format_robustness(report, tmp_path):
    start = time.perf_counter()
    results = {}
    x = np.random.default_rng(10).standard_normal((3, 10, 4))
    write_stack(tmp_path / "a.stack", x)
    back = read_stack(tmp_path / "a.stack").layers
    results["round-trip"] = back.shape == x.shape and np.array_equal(back, x.astype(np.float32).astype(np.float64))

    raw = (tmp_path / "a.stack").read_bytes()
    (tmp_path / "bad.stack").write_bytes(b"BADMAGIC" + raw[8:])
    try:
        read_stack(tmp_path / "bad.stack")
        results["bad magic"] = False
    except FormatError as exc:
        results["bad magic"] = exc.offset == 0

    (tmp_path / "short.stack").write_bytes(struct.pack("<8sIII", STACK_MAGIC, 3, 10, 5) + raw[20:])
    try:
        read_stack(tmp_path / "short.stack")
        results["truncation"] = False
    except FormatError as exc:
        results["truncation"] = exc.offset == len(raw)

    (tmp_path / "m.tsv").write_text("u1\ta.stack\ts\nu2\ta.stack\ts\nu1\ta.stack\tt\n")
    try:
        read_manifest(tmp_path / "m.tsv")
        results["duplicate id"] = False
    except FormatError as exc:
        results["duplicate id"] = exc.offset == 3 and "'u1'" in str(exc)
    elapsed = time.perf_counter() - start
    ok = all(results.values()) and elapsed < 1
    report(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items()) + f"; {elapsed:.3f}s")
    assert ok
