"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is echoed in the terminal
summary. The training criteria share one corpus and one set of runs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import alignment_loss_direct, dense_iou, dense_miou, dense_track_f, random_track
from trackselect import cli
from trackselect import tensor as tc
from trackselect.config import build
from trackselect.data import directory_digest
from trackselect.evaluation import ablation_configs, corpus_similarity_analysis, evaluate
from trackselect.masks import MaskTrack, TrackSet, boundary_F, mask_iou, merge_tracks, track_miou
from trackselect.selector import SelectorConfig, aggregate, select
from trackselect.supervision import alignment_loss, bce_loss
from trackselect.synth import generate_synthetic
from trackselect.tensor import Tensor
from trackselect.trainer import gradcheck_fixture, train

SEEDS = (0, 1, 2)
TOGGLES = ("no_align", "no_inter_object", "no_motion_attn")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture(scope="module")
def preset():
    run = build(preset="synthetic", use_env=False,
                overrides={("data", "scenes"): 250, ("data", "objects"): 8, ("data", "frames"): 24,
                           ("data", "size"): 64, ("data", "expressions_per_scene"): 2})
    return run


@pytest.fixture(scope="module")
def corpus(preset):
    return generate_synthetic(preset.synth_config(), 0)


@pytest.fixture(scope="module")
def runs(preset, corpus):
    """{(config name, seed): (J&F, accuracy, seconds)} for the full model and each ablation."""
    tr, va = corpus.split(200)
    out = {}
    for name, scfg, tcfg in ablation_configs(preset.selector_config(), preset.train_config(), TOGGLES):
        for seed in SEEDS:
            t0 = time.perf_counter()
            state = train(tr, scfg, replace(tcfg, seed=seed))
            rep = evaluate(state, va, tau_label=tcfg.tau_label)
            out[name, seed] = (rep.JF, rep.accuracy, time.perf_counter() - t0)
    return out


def test_criterion_1_gradcheck():
    t0 = time.perf_counter()
    objective, store = gradcheck_fixture()
    # sample every tensor so small ones (biases, gains) are not crowded out
    worst = max(tc.grad_check(objective, store, n_samples=40, names=[name]) for name in store)
    secs = time.perf_counter() - t0
    report(1, worst < 1e-4 and secs < 60, f"max rel err {worst:.2e} over {len(list(store))} tensors, {secs:.0f}s")


def test_criterion_2_rle_metrics_match_dense():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_iou = worst_f = 0.0
    for _ in range(1000):
        t, h, w = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 65))
        da, db = random_track(rng, t, h, w), random_track(rng, t, h, w)
        a, b = MaskTrack.from_dense(da), MaskTrack.from_dense(db)
        for fa, fb, xa, xb in zip(a.frames, b.frames, da, db):
            worst_iou = max(worst_iou, abs(mask_iou(fa, fb) - dense_iou(xa, xb)))
        worst_iou = max(worst_iou, abs(track_miou(a, b) - dense_miou(da, db)))
        worst_f = max(worst_f, abs(boundary_F(a, b) - dense_track_f(da, db)))
    secs = time.perf_counter() - t0
    ok = worst_iou <= 1e-12 and worst_f <= 1e-9 and secs < 120
    report(2, ok, f"max |dIoU| {worst_iou:.1e}, max |dF| {worst_f:.1e}, {secs:.0f}s")


def test_criterion_3_losses():
    checks = {}
    checks["bce"] = abs(bce_loss(T([0.5]), [1]).item() - math.log(2))
    a_p = T([1.0, 0.0])
    checks["pos trivial"] = abs(alignment_loss(T([[1.0, 0.0]]), [1], a_p, T([[0.0, 1.0]])).item() + 1.0)
    checks["neg trivial"] = abs(alignment_loss(T([[0.0, 1.0]]), [0], a_p, T([[0.0, 1.0]])).item() + 1.0)
    ok = all(v <= 1e-9 for v in checks.values())

    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n, d, k = rng.integers(1, 8), rng.integers(2, 12), rng.integers(1, 6)
        o, ap, anchors = rng.normal(size=(n, d)), rng.normal(size=d), rng.normal(size=(k, d))
        y = rng.integers(0, 2, size=n)
        got = alignment_loss(T(o), y, T(ap), T(anchors)).item()
        worst = max(worst, abs(got - alignment_loss_direct(o, y, ap, anchors)))
    checks["direct"] = worst
    ok &= worst <= 1e-6

    # O_a from a mean over frames versus a sum (T' times larger) and explicit rescales
    o_prime, e = T(rng.normal(size=(5, 3, 8))), T(rng.normal(size=(4, 8)))
    o_mean = aggregate(o_prime, e).aligned_tokens.data
    y, ap, anchors = [1, 0, 0, 1, 0], T(rng.normal(size=8)), T(rng.normal(size=(4, 8)))
    base = alignment_loss(T(o_mean), y, ap, anchors).item()
    scale = [abs(alignment_loss(T(alpha * o_mean), y, ap, anchors).item() - base) for alpha in (0.5, 2.0, 10.0)]
    scale.append(abs(alignment_loss(T(3 * o_mean), y, ap, anchors).item() - base))
    checks["scale"] = max(scale)
    ok &= checks["scale"] <= 1e-6
    report(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in checks.items()))


def test_criterion_4_synthetic_training(runs):
    jf = float(np.mean([runs["full", s][0] for s in SEEDS]))
    acc = float(np.mean([runs["full", s][1] for s in SEEDS]))
    secs = max(runs["full", s][2] for s in SEEDS)
    per_seed = " ".join(f"{runs['full', s][0]:.1f}/{runs['full', s][1]:.2f}" for s in SEEDS)
    ok = acc >= 0.90 and jf >= 85.0 and secs < 900
    report(4, ok, f"mean acc {acc:.3f}, mean J&F {jf:.1f} (per seed {per_seed}), slowest run {secs:.0f}s")


def test_criterion_5_ablations(runs):
    mean = {name: float(np.mean([runs[name, s][0] for s in SEEDS])) for name in ("full", *TOGGLES)}
    ok = all(mean["full"] >= mean[t] for t in TOGGLES)
    report(5, ok, "  ".join(f"{k} {v:.1f}" for k, v in mean.items()))


def test_criterion_6_paper_defaults_echo(tmp_path, capsys):
    tiny = ["--set", "data.scenes=1", "--set", "data.objects=4", "--set", "data.frames=16", "--set", "data.dim=16",
            "--set", "data.text_dim=8", "--set", "data.n_background=2", "--set", "data.size=64"]
    model = ["--set", "selector.dim=16", "--set", "selector.text_dim=8", "--set", "selector.layers=1",
             "--set", "supervision.n_neg=4", "--set", "train.epochs=1"]
    assert cli.main(["synth", "--out", str(tmp_path / "c"), *tiny]) == 0
    assert cli.main(["train", "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "r"), *model]) == 0
    capsys.readouterr()
    code = cli.main(["eval", "--paper-defaults", "--checkpoint", str(tmp_path / "r" / "final.solp"),
                     "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "e")])
    line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("config: "))
    echo = json.loads(line[len("config: "):])
    got = {"tau_select": echo["selector"]["tau_select"], "n_neg": echo["supervision"]["n_neg"],
           "lambda1": echo["supervision"]["lambda1"], "lambda2": echo["supervision"]["lambda2"],
           "epochs": echo["train"]["epochs"], "lr_init": echo["train"]["lr_init"],
           "dedup_theta": echo["data"]["dedup_theta"]}
    want = {"tau_select": 0.5, "n_neg": 32, "lambda1": 1.0, "lambda2": 0.3, "epochs": 13, "lr_init": 5e-6,
            "dedup_theta": 0.7}
    ok = code == 0 and got == want and all(type(got[k]) is type(want[k]) for k in want)
    report(6, ok, " ".join(f"{k}={v}" for k, v in got.items()))


def test_criterion_7_selection_and_merge_properties():
    rng = np.random.default_rng(7)
    bad_select = bad_merge = 0
    for case in range(10_000):
        n = int(rng.integers(1, 7))
        t, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        dense = [random_track(rng, t, h, w) for _ in range(n)]
        tracks = TrackSet([MaskTrack.from_dense(d, f"t{i}") for i, d in enumerate(dense)])
        # coarse grid so exact-threshold scores and ties come up often
        scores = rng.integers(0, 9, size=n) / 8.0
        fallback = bool(case % 2)
        res = select(scores, tracks, SelectorConfig(tau_select=0.5, fallback_argmax=fallback))
        want = [i for i in range(n) if scores[i] > 0.5]
        if not want and fallback:
            best = max(scores)
            want = [min(i for i in range(n) if scores[i] == best)]
        bad_select += res.selected_track_ids != [f"t{i}" for i in want]
        expect = np.zeros((t, h, w), bool)
        for i in want:
            expect |= dense[i]
        bad_merge += not np.array_equal(res.merged_track.to_dense(), expect)
        # merge on its own, over a random subset
        pick = [i for i in range(n) if rng.random() < 0.5]
        merged = merge_tracks([tracks[i] for i in pick], geometry=(t, h, w)).to_dense()
        bad_merge += not np.array_equal(merged, np.logical_or.reduce([dense[i] for i in pick] or [expect & False]))
    report(7, bad_select == 0 and bad_merge == 0,
           f"10000 cases, selection mismatches {bad_select}, merge mismatches {bad_merge}")


def test_criterion_8_token_similarity(corpus):
    curve = corpus_similarity_analysis(corpus)
    report(8, curve.rho > 0.5, f"spearman rho {curve.rho:.3f} over {curve.n_pairs} track pairs")


def test_criterion_9_reruns_are_byte_identical(tmp_path):
    tiny = ["--set", "data.scenes=3", "--set", "data.objects=4", "--set", "data.frames=16", "--set", "data.dim=16",
            "--set", "data.text_dim=8", "--set", "data.n_background=3", "--set", "data.size=64"]
    model = ["--set", "selector.dim=16", "--set", "selector.text_dim=8", "--set", "selector.layers=1",
             "--set", "selector.heads=4", "--set", "supervision.n_neg=4", "--set", "train.epochs=2",
             "--set", "train.lr_init=1e-3"]
    digests = []
    for k in range(2):
        root = tmp_path / f"r{k}"
        assert cli.main(["synth", "--seed", "9", "--out", str(root / "corpus"), *tiny]) == 0
        assert cli.main(["train", "--corpus", str(root / "corpus"), "--out", str(root / "run"), *model]) == 0
        assert cli.main(["eval", "--checkpoint", str(root / "run" / "final.solp"), "--corpus", str(root / "corpus"),
                         "--out", str(root / "eval")]) == 0
        digests.append(tuple(directory_digest(root / d) for d in ("corpus", "run", "eval")))
    same = [a == b for a, b in zip(*digests)]
    report(9, all(same), "synth/train/eval identical: " + " ".join(str(s) for s in same))
