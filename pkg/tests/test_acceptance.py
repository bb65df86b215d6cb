"""Acceptance criteria 1 to 10.

Each test records a one-line verdict (printed together at the end of the run)
before asserting. The trend experiments are marked slow; they run under the
default selection and take roughly an hour together on one CPU core.
"""

import hashlib
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE, random_clips

from drivernet import formats
from drivernet import gradsuite
from drivernet import tensor as T
from drivernet.config import TrainConfig, miniature
from drivernet.context import ContextBlock
from drivernet.fusion import PUBLISHED_DELTAS, parameter_table, snapshot, strategy_deltas
from drivernet.layers import GRU
from drivernet.recipes import DESK, feature_trend, latency_report, regime_comparison
from drivernet.synth import synthesize
from drivernet.tensor import Tensor
from drivernet.train import _batch, evaluate, fit, load_model, predict, save_model, train

MINI = miniature(n_frames=16)


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def table():
    return parameter_table()


# --- 1, 2: parameter accounting ---------------------------------------------------


def test_criterion_1_context_counts_exact(table):
    rows = [r for r in table if r["model"] == "context"]
    detail = ", ".join(f"{r['variant']} {r['ours']:,}/{r['published']:,}" for r in rows)
    verdict(1, len(rows) == 3 and all(r["ours"] == r["published"] for r in rows), detail)


def test_criterion_2_delta_invariants(table):
    ctx = {r["variant"]: r["ours"] for r in table if r["model"] == "context"}
    dn = {r["variant"]: r["ours"] for r in table if r["model"] == "drivernet"}
    ws_gap = {ctx["ws"] - ctx["gap"]} | {dn[f"ws/{f}"] - dn[f"gap/{f}"] for f in ("cf", "af", "caf")}
    conv_gap = ctx["conv1d"] - ctx["gap"]
    deltas = strategy_deltas(table)
    cf_af = {d["cf-af"] for d in deltas.values()}
    caf_af = {d["caf-af"] for d in deltas.values()}
    ok = ws_gap == {3} and conv_gap == 196_608 and len(cf_af) == 1 and len(caf_af) == 1
    detail = (f"WS-GAP {sorted(ws_gap)}, Conv1D-GAP {conv_gap:,}; "
              f"CF-AF ours {min(cf_af):,} (published {PUBLISHED_DELTAS['cf-af']:,}), "
              f"CAF-AF ours {min(caf_af):,} (published {PUBLISHED_DELTAS['caf-af']:,}), "
              f"{'constant' if len(cf_af) == len(caf_af) == 1 else 'NOT constant'} across aggregations")
    verdict(2, ok, detail)


# --- 3: gradients ------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seed=0)
    seconds = time.perf_counter() - t0
    layers = [r for r in results if r.tolerance == gradsuite.LAYER_TOL]
    configs = [r for r in results if "/" in r.name]
    failed = [r.name for r in results if not r.passed]
    ok = not failed and len(configs) == 18 and seconds < 600
    detail = (f"{len(layers)} layers worst {max(r.error for r in layers):.1e} (< 1e-5), "
              f"{len(configs)} configs worst {max(r.error for r in configs):.1e} (< 1e-4), "
              f"{seconds:.0f}s" + (f", failed {failed}" if failed else ""))
    verdict(3, ok, detail)


# --- 4: structural invariants --------------------------------------------------------


def test_criterion_4_structural_invariants(tmp_path):
    rng = np.random.default_rng(4)
    checks = {}

    x = rng.uniform(-50, 50, size=(64, 7))
    checks["softmax"] = np.abs(T.softmax(Tensor(x), axis=-1).data.sum(axis=-1) - 1).max() <= 1e-12

    x = rng.uniform(-100, 100, size=(64, 8))
    y = T.layer_norm(Tensor(x), axis=-1).data
    var = x.var(axis=-1)
    checks["layer_norm"] = (np.abs(y.mean(axis=-1)).max() <= 1e-10
                            and np.abs(y.var(axis=-1) - var / (var + T.LAYER_NORM_EPS)).max() <= 1e-8)

    clips = random_clips(rng)
    gap = ContextBlock(miniature(aggregation="gap"))
    checks["gap_permutation"] = np.abs(gap(clips).data - gap(clips[:, [2, 0, 1]]).data).max() <= 1e-12
    ws = ContextBlock(miniature(aggregation="ws"))
    checks["ws_uniform_is_gap"] = ws(clips).data.tobytes() == gap(clips).data.tobytes()
    conv = ContextBlock(miniature(aggregation="conv1d"))
    checks["conv1d_witness"] = np.abs(conv(clips).data - conv(clips[:, [2, 0, 1]]).data).max() > 1e-6

    gru = GRU(3, 4, rng)
    seq = rng.normal(size=(2, 6, 3))
    full = gru(Tensor(seq)).data
    checks["gru_causality"] = all(gru(Tensor(seq[:, :t])).data.tobytes() == full[:, :t].tobytes()
                                  for t in range(1, 7))

    data = synthesize(16, seed=4, frame_size=8)
    model = fit("drivernet", MINI, data, TrainConfig(epochs=1), regime="fusion")[0]
    norm = fit("feature", MINI, data, TrainConfig(epochs=1))[1]
    before = snapshot(model)
    train(model, data, TrainConfig(epochs=1, seed=5), norm, regime="fusion")
    after = snapshot(model)
    checks["frozen_bit_identity"] = all(
        (before[n].tobytes() == after[n].tobytes()) != n.startswith("fusion.") for n in before)

    failed = [k for k, v in checks.items() if not v]
    verdict(4, not failed, f"{len(checks) - len(failed)}/{len(checks)} hold"
            + (f", failed {failed}" if failed else ": " + ", ".join(checks)))


# --- 5: feature-block modality trend ---------------------------------------------------


@pytest.mark.slow
def test_criterion_5_all_modalities_beat_each_single():
    trend = feature_trend(DESK, log=lambda *_: None)
    mean = trend["mean"]
    margins = {m: mean["all"] - mean[m] for m in ("body", "head", "hand")}
    ok = min(margins.values()) >= 0.05 and trend["seconds"] < 1800
    per_seed = " ".join(f"{m}={','.join(f'{a:.3f}' for a in v)}" for m, v in trend["per_seed"].items())
    detail = (f"seed-mean all {mean['all']:.3f}, margins "
              + ", ".join(f"{m} {100 * d:+.1f}pp" for m, d in margins.items())
              + f" (need >= 5pp); per seed {per_seed}; {trend['seconds']:.0f}s")
    verdict(5, ok, detail)


# --- 6, 7: training regimes and learnability ---------------------------------------------


@pytest.fixture(scope="module")
def regimes():
    return regime_comparison(DESK, log=lambda *_: None)


@pytest.mark.slow
def test_criterion_6_t_all_not_below_t_fusion(regimes):
    r = regimes["regimes"]
    a, f = r["all"], r["fusion"]
    ok = a["mean"] >= f["mean"] and regimes["seconds"] < 3600
    detail = (f"CF 5-fold seed-mean T_all {a['mean']:.4f} vs T_fusion {f['mean']:.4f}; per seed "
              f"T_all {[round(v, 4) for v in a['per_seed']]}, T_fusion {[round(v, 4) for v in f['per_seed']]}; "
              f"{regimes['seconds']:.0f}s")
    verdict(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_fused_model_learns(regimes):
    best = max(regimes["regimes"].items(), key=lambda kv: kv[1]["mean"])
    regime, summary = best
    verdict(7, summary["mean"] >= 0.90,
            f"best fused CF 5-fold seed-mean accuracy {summary['mean']:.4f} (T_{regime}), need >= 0.90")


# --- 8: determinism ---------------------------------------------------------------------


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_8_end_to_end_determinism(tmp_path):
    runs = []
    for name in ("a", "b"):
        root = formats.generate_dataset(40, 8, tmp_path / name, frame_size=8)
        data = formats.read_dataset(root)
        model, norm, _ = fit("drivernet", MINI, data, TrainConfig(epochs=2, seed=8))
        report = evaluate(model, data, norm, latency_clips=0)
        params = b"".join(p.data.tobytes() for p in model.parameters())
        runs.append((_digest(root), report.to_dict(), params, predict(model, data, norm).tobytes()))
    same = [runs[0][i] == runs[1][i] for i in range(4)]
    verdict(8, all(same), f"dataset digest, metrics, parameters, predictions identical: {same}; "
                          f"accuracy {runs[0][1]['accuracy']:.4f}")


# --- 9: formats ---------------------------------------------------------------------------


def test_criterion_9_format_round_trips(tmp_path):
    data = synthesize(100, seed=9, frame_size=8)
    jsonl_ok = ctb_ok = True
    for i in range(len(data)):
        s = data.sample(i)
        back = formats.streams_from_jsonl(formats.streams_to_jsonl(s.streams))
        jsonl_ok &= all(getattr(back, a).tobytes() == getattr(s.streams, a).tobytes()
                        for a in ("head_angles", "body_pose", "hand_boxes"))
        valid = np.ones(s.streams.n_frames, bool) if s.streams.valid is None else s.streams.valid
        jsonl_ok &= np.array_equal(back.valid, valid)
        jsonl_ok &= all(np.array_equal(np.asarray(o1).reshape(-1, 4), np.asarray(o2).reshape(-1, 4))
                        for o1, o2 in zip(back.objects, s.streams.objects))
        frames, end = formats.decode_ctb(formats.encode_ctb(s.clips))
        ctb_ok &= frames.tobytes() == s.clips.tobytes() and frames.shape == s.clips.shape

    model, norm, _ = fit("drivernet", MINI, data.subset(range(20)), TrainConfig(epochs=1))
    save_model(tmp_path / "m.ckpt", model, norm)
    loaded, norm2, _ = load_model(tmp_path / "m.ckpt")
    model.eval()
    idx = np.arange(len(data))
    with T.no_grad():
        a = model(*_batch(data, idx, norm, True)[:2]).data
        b = loaded(*_batch(data, idx, norm2, True)[:2]).data
    logits_ok = a.tobytes() == b.tobytes()
    verdict(9, jsonl_ok and ctb_ok and logits_ok,
            f"100 clips: JSON-lines {jsonl_ok}, CTB1 {ctb_ok}; checkpoint logits bit-identical {logits_ok}")


# --- 10: latency report ---------------------------------------------------------------------


def test_criterion_10_latency_report():
    report = latency_report(DESK, clips=16)
    ok = set(report) == {"cf", "af", "caf"} and all(
        0 < r["fusion_only"]["median"] <= r["fusion_only"]["p95"] and np.isfinite(r["full"]["p95"])
        for r in report.values())
    detail = "; ".join(
        f"{k} fusion-only {r['fusion_only']['median']:.3f}/{r['fusion_only']['p95']:.3f} ms, "
        f"full {r['full']['median']:.1f} ms" for k, r in report.items())
    verdict(10, ok, detail + " (median/p95, reported only)")
