"""Acceptance suite: one test (or test group) per shipped criterion, each
printing a PASS line with its number when it completes. Criterion 6 trains the
full two-stage pipeline on the strong-shift benchmark for three seeds and is
by far the slowest part of the suite.
"""

import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
import yaml

from dascseg import (
    adaptation, cli, datapipe, evalmetrics, losses, networks, selfcorrect, synthbench,
)
from dascseg.adaptation import TrainingConfig, poly_lr
from dascseg.datapipe import AugmentParams, BinaryMask, Domain, DomainSample, Slice
from dascseg.determinism import enable_determinism
from dascseg.losses import LossWeights, Side
from dascseg.selfcorrect import SelfCorrectionConfig, aggregate_labels, aggregate_weights

from fdcheck import gradient_check
from test_evalmetrics import oracle_counts, oracle_hausdorff


def report(number: int, name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"\n[ACCEPTANCE] criterion {number} {name}: PASS{suffix}")


# -- criterion 1: gradient suite ------------------------------------------------

class TestCriterion1Gradients:
    TRIALS = 20

    def test_gradient_suite(self):
        start = time.time()
        rng = np.random.default_rng(100)

        def logits(shape=(1, 2, 5, 5)):
            return torch.from_numpy(rng.standard_normal(shape))

        checked = 0
        for trial in range(self.TRIALS):
            y = torch.from_numpy((rng.random((1, 5, 5)) > 0.5).astype(np.int64))
            gradient_check(lambda a, b, c: losses.seg_loss(a, b, c, y, 3.0),
                           [logits(), logits(), logits()], rng)

            probe = torch.from_numpy(rng.standard_normal((1, 5, 5)))
            gradient_check(
                lambda a, b: (losses.cosine_discrepancy(
                    F.softmax(a, 1), F.softmax(b, 1)) * probe).sum(),
                [logits(), logits()], rng)

            dis = torch.from_numpy(rng.random((1, 5, 5)))
            gradient_check(
                lambda s, t: losses.adv_seg_loss(s, t, dis, 10.0, Side.DISCRIMINATOR),
                [logits((1, 1, 5, 5)), logits((1, 1, 5, 5))], rng)
            gradient_check(
                lambda t: losses.adv_seg_loss(None, t, dis, 10.0, Side.GENERATOR),
                [logits((1, 1, 5, 5))], rng)

            gradient_check(
                lambda s, t: losses.adv_fea_loss(s, t, Side.DISCRIMINATOR),
                [logits((1, 1, 3, 3)), logits((1, 1, 3, 3))], rng)
            gradient_check(
                lambda t: losses.adv_fea_loss(None, t, Side.GENERATOR),
                [logits((1, 1, 3, 3))], rng)

            gradient_check(
                lambda w1, w2: losses.weight_discrepancy({"c.weight": w1},
                                                         {"c.weight": w2}),
                [logits((2, 2, 3, 3)), logits((2, 2, 3, 3))], rng)

            tags = torch.from_numpy(rng.integers(0, 2, size=4))
            gradient_check(
                lambda z: losses.cam_ce_loss(F.softmax(z, 1), tags),
                [logits((4, 2))], rng)

            w = LossWeights()
            gradient_check(
                lambda a, b, c, d: losses.total_da_loss(
                    losses.LossParts(a, b, c, d), w),
                [torch.from_numpy(rng.standard_normal(())) for _ in range(4)], rng)
            checked += 9
        elapsed = time.time() - start
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"
        report(1, "gradient-suite",
               f"{checked} loss instances x {self.TRIALS} trials in {elapsed:.1f}s")


# -- criterion 2: aggregation algebra -------------------------------------------

class TestCriterion2Aggregation:
    def test_aggregation_algebra(self):
        start = time.time()
        pv = lambda v: networks.ParameterVector(
            {"w": np.asarray(v, dtype=np.float64)})
        pls = lambda v, c=0: selfcorrect.PseudoLabelSet(
            maps={"a": np.asarray(v, dtype=np.float64)}, cycle=c)

        # fixed points, bitwise, for every cycle index
        rng = np.random.default_rng(200)
        w = rng.standard_normal(128)
        for c in range(1, 10):
            np.testing.assert_array_equal(
                aggregate_weights(pv(w), pv(w), c).entries["w"], w)
        m = rng.random((16, 16))
        for c in range(1, 10):
            np.testing.assert_array_equal(
                aggregate_labels(pls(m), pls(m), c).maps["a"], m)

        # scalar arithmetic, bitwise at double precision
        assert aggregate_weights(pv([5.0]), pv([3.0]), 1).entries["w"][0] == 4.0
        assert aggregate_weights(pv([0.0]), pv([1.0]), 9).entries["w"][0] == 0.1
        assert aggregate_labels(pls([[0.9]]), pls([[0.3]]), 2).maps["a"][0, 0] == 0.7
        assert aggregate_labels(pls([[1.0]]), pls([[0.0]]), 9).maps["a"][0, 0] == 0.9

        # 1000 random triples stay inside the per-entry interval hull
        for _ in range(1000):
            prev = rng.standard_normal(16) * rng.choice([1e-9, 1e-3, 1.0, 1e6])
            init = rng.standard_normal(16) * rng.choice([1e-9, 1e-3, 1.0, 1e6])
            c = int(rng.integers(1, 10))
            out = aggregate_weights(pv(prev), pv(init), c).entries["w"]
            assert np.all(out >= np.minimum(prev, init))
            assert np.all(out <= np.maximum(prev, init))
        elapsed = time.time() - start
        assert elapsed < 10
        report(2, "aggregation-algebra", f"{elapsed:.2f}s")


# -- criterion 3: Algorithm-1 no-op fixed point ----------------------------------

class TestCriterion3NoOpFixedPoint:
    def test_ep0_nine_cycles_exact(self):
        start = time.time()
        enable_determinism(30)
        bench = synthbench.generate(synthbench.SynthSpec(
            image_size=(64, 64), n_samples=16, seed=30, fraction_negative=0.25))
        cfg = TrainingConfig(arch_preset="small", resolution=(64, 64), seed=30,
                             augment=False, use_feature_alignment=False)
        gen = networks.build_generator(cfg.arch(), cfg.seed)
        ext = networks.build_cam_extractor(cfg.arch(), cfg.seed)
        w0 = networks.generator_vectors(gen, ext)

        sc = SelfCorrectionConfig(cycles=9, epochs_per_cycle=0, seed=30)
        final, labels, _ = selfcorrect.run_self_correction(
            w0, bench.source, bench.target, sc, cfg)

        for role, pv0 in w0.items():
            for name in pv0.names():
                np.testing.assert_array_equal(final[role].entries[name],
                                              pv0.entries[name])
        predictor = selfcorrect.make_predictor(gen, ext, cfg.cam_attention_on_target)
        y0 = selfcorrect.generate_pseudo_labels(predictor, bench.target, sc.tta_flips)
        for sid in y0.maps:
            np.testing.assert_array_equal(labels.maps[sid], y0.maps[sid])
        elapsed = time.time() - start
        assert elapsed < 60
        report(3, "algorithm1-noop-fixed-point", f"9 cycles in {elapsed:.1f}s")


# -- criterion 4: metric oracle equivalence --------------------------------------

class TestCriterion4MetricOracles:
    def test_oracle_equivalence_200_pairs(self):
        start = time.time()
        rng = np.random.default_rng(400)
        for _ in range(200):
            h, w = rng.integers(2, 33, size=2)
            density = rng.uniform(0.2, 0.95)
            pred = BinaryMask((rng.random((h, w)) > density).astype(np.uint8))
            truth = BinaryMask((rng.random((h, w)) > rng.uniform(0.2, 0.95)).astype(np.uint8))
            counts = evalmetrics.confusion(pred, truth)
            tp, fp, tn, fn = oracle_counts(pred, truth)
            assert counts == (tp, fp, tn, fn)
            denom_d = 2 * tp + fp + fn
            assert evalmetrics.dice(counts) == (2 * tp / denom_d if denom_d else 1.0)
            assert evalmetrics.sen(counts) == (tp / (tp + fn) if tp + fn else 1.0)
            assert evalmetrics.spc(counts) == (tn / (tn + fp) if tn + fp else 1.0)
            denom_j = tp + fp + fn
            assert evalmetrics.jaccard(counts) == (tp / denom_j if denom_j else 1.0)
            assert evalmetrics.hausdorff(pred, truth) == oracle_hausdorff(pred, truth)

        # hand-computed cases
        p = BinaryMask(np.array([[1, 1, 0]], dtype=np.uint8))
        t = BinaryMask(np.array([[0, 1, 1]], dtype=np.uint8))
        assert evalmetrics.dice(evalmetrics.confusion(p, t)) == 0.5
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert evalmetrics.hausdorff(BinaryMask(a), BinaryMask(b)) == 5.0
        elapsed = time.time() - start
        assert elapsed < 30
        report(4, "metric-oracle-equivalence", f"200 pairs in {elapsed:.1f}s")


# -- criterion 5: attention contract ---------------------------------------------

class TestCriterion5AttentionContract:
    def test_attention_factor_contract(self):
        start = time.time()
        enable_determinism(50)
        gen = networks.build_generator(networks.ArchConfig.small(), 50)
        gen.eval()
        rng = np.random.default_rng(50)
        with torch.no_grad():
            for _ in range(5):
                x = torch.from_numpy(rng.random((2, 1, 64, 64)).astype(np.float32))
                pyr = gen.encoder(x)
                plain = gen.major_decoder(pyr, (64, 64))
                cam = torch.from_numpy(
                    rng.standard_normal((2, 1, 64, 64)).astype(np.float32) * 2)
                attended = networks.apply_cam_attention(plain, cam)
                expected = (1.0 + torch.sigmoid(cam)) * plain
                rel = ((attended - expected).abs()
                       / expected.abs().clamp_min(1e-12)).max().item()
                assert rel < 1e-6
                factor = attended / plain
                assert (factor > 1.0).all() and (factor < 2.0).all()
                zero_cam = networks.apply_cam_attention(plain, torch.zeros_like(cam))
                assert torch.allclose(zero_cam, 1.5 * plain, rtol=1e-6, atol=0)
        elapsed = time.time() - start
        assert elapsed < 10
        report(5, "cam-attention-contract", f"{elapsed:.2f}s")


# -- criterion 6: synthetic domain-shift experiment -------------------------------

EXPERIMENT_SEEDS = (0, 1, 2)


def _train_variant(bench, seed, tag, **kw):
    enable_determinism(seed)
    cfg = TrainingConfig(arch_preset="small", resolution=(64, 64), batch_size=4,
                         epochs_cam=6, epochs_da=12, seed=seed, **kw)
    cam_vec = None
    if cfg.cam_enabled:
        _, cam_vec = adaptation.train_cam_extractor(bench.source, cfg)
    vectors, history = adaptation.train_afd_da(bench.source, bench.target, cam_vec, cfg)
    for row in history:
        for key, value in row.items():
            assert np.isfinite(value), f"{tag} seed {seed}: non-finite {key}"
    rep = evalmetrics.evaluate(vectors, bench.target, bench.target_truth, cfg,
                               model_id=tag)
    return vectors, cfg, rep.aggregate()["dice"] * 100


@pytest.fixture(scope="module")
def shift_strong_results(tmp_path_factory):
    bench = synthbench.generate(synthbench.shift_strong(n_samples=200))
    results = {}
    for seed in EXPERIMENT_SEEDS:
        row = {}
        _, _, row["source_only"] = _train_variant(
            bench, seed, "source-only",
            weights=LossWeights(lambda_adv_seg=0.0, lambda_adv_fea=0.0),
            use_feature_alignment=False)
        _, _, row["base"] = _train_variant(bench, seed, "base-da", base_da_mode=True)
        _, _, row["base_cam"] = _train_variant(bench, seed, "base+cam",
                                               use_feature_alignment=False)
        _, _, row["base_feat"] = _train_variant(bench, seed, "base+feat",
                                                use_cam_attention=False)
        vec_full, cfg_full, row["full"] = _train_variant(bench, seed, "afd-da")

        enable_determinism(seed + 5000)
        sc_cfg = SelfCorrectionConfig(cycles=9, epochs_per_cycle=2, seed=seed)
        out_dir = tmp_path_factory.mktemp(f"sc_seed{seed}")
        final_vec, _, _ = selfcorrect.run_self_correction(
            vec_full, bench.source, bench.target, sc_cfg, cfg_full, out_dir=out_dir)
        row["self_correct"] = evalmetrics.evaluate(
            final_vec, bench.target, bench.target_truth, cfg_full,
            model_id="self-correct").aggregate()["dice"] * 100
        cycle1_vec, _ = networks.load_checkpoint(out_dir / "cycle_001")
        row["cycle1"] = evalmetrics.evaluate(
            cycle1_vec, bench.target, bench.target_truth, cfg_full,
            model_id="cycle1").aggregate()["dice"] * 100
        results[seed] = row
        print(f"\nseed {seed}: " + "  ".join(f"{k}={v:.2f}" for k, v in row.items()))
    return results


def _majority(flags):
    return sum(bool(f) for f in flags) * 2 > len(flags)


class TestCriterion6DomainShiftExperiment:
    def test_a_adaptation_beats_source_only(self, shift_strong_results):
        gains = [r["full"] - r["source_only"] for r in shift_strong_results.values()]
        assert _majority(g >= 5.0 for g in gains), f"gains {gains}"
        report(6, "domain-shift (a) adaptation-gain",
               "gains vs source-only: " + ", ".join(f"{g:+.2f}" for g in gains))

    def test_b_components_do_not_hurt_and_one_helps(self, shift_strong_results):
        cam_ok, feat_ok, one_helps = [], [], []
        for r in shift_strong_results.values():
            cam_ok.append(r["base_cam"] >= r["base"] - 1.0)
            feat_ok.append(r["base_feat"] >= r["base"] - 1.0)
            one_helps.append(r["base_cam"] > r["base"] or r["base_feat"] > r["base"])
        assert _majority(cam_ok), f"attention deltas failed: {cam_ok}"
        assert _majority(feat_ok), f"feature-alignment deltas failed: {feat_ok}"
        assert _majority(one_helps)
        report(6, "domain-shift (b) component-ablations",
               f"cam_ok={cam_ok} feat_ok={feat_ok}")

    def test_c_self_correction_improves(self, shift_strong_results):
        final_ok = [r["self_correct"] >= r["full"]
                    for r in shift_strong_results.values()]
        trend_ok = [r["self_correct"] >= r["cycle1"] - 1.0
                    for r in shift_strong_results.values()]
        assert _majority(final_ok), f"final-vs-adaptation failed: {final_ok}"
        assert _majority(trend_ok), f"final-vs-cycle1 failed: {trend_ok}"
        deltas = [r["self_correct"] - r["full"] for r in shift_strong_results.values()]
        report(6, "domain-shift (c) self-correction",
               "deltas vs adaptation: " + ", ".join(f"{d:+.2f}" for d in deltas))


# -- criterion 7: pipeline determinism --------------------------------------------

class TestCriterion7Determinism:
    def _smoke_config(self, tmp_path, out_name):
        cfg = {
            "seed": 7,
            "out_dir": str(tmp_path / out_name),
            "synth": {"benchmark": "shift-mild", "n_samples": 48,
                      "image_size": [64, 64]},
            "networks": {"arch_preset": "small", "resolution": [64, 64]},
            "adaptation": {"epochs_cam": 4, "epochs_da": 3, "batch_size": 4},
            "selfcorrect": {"cycles": 2, "epochs_per_cycle": 1},
            "eval": {},
        }
        path = tmp_path / f"{out_name}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        return path

    def test_two_runs_bitwise_identical(self, tmp_path):
        start = time.time()
        reports = []
        for out_name in ("run_a", "run_b"):
            config = self._smoke_config(tmp_path, out_name)
            for command in ("synth", "train-cam", "train-da", "self-correct", "eval"):
                assert cli.main([command, "--config", str(config)]) == 0, command
            out = tmp_path / out_name / "eval"
            reports.append({
                "afd": (out / "afd_da_report.json").read_bytes(),
                "sc": (out / "self_correct_report.json").read_bytes(),
                "cmp": (out / "comparison.json").read_bytes(),
                "cycles": (out / "dice_per_cycle.csv").read_bytes(),
            })
        for key in reports[0]:
            assert reports[0][key] == reports[1][key], f"{key} differs between runs"
        elapsed = time.time() - start
        assert elapsed < 600
        report(7, "pipeline-determinism", f"two smoke pipelines in {elapsed:.0f}s")


# -- criterion 8: poly LR ----------------------------------------------------------

class TestCriterion8PolyLr:
    def test_schedule_values(self):
        start = time.time()
        total = 1000
        assert abs(poly_lr(2.5e-4, 0, total) - 2.5e-4) < 1e-12
        assert abs(poly_lr(2.5e-4, total // 2, total) - 2.5e-4 * 0.5 ** 0.9) < 1e-12
        assert abs(poly_lr(2.5e-4, total, total) - 0.0) < 1e-12
        assert time.time() - start < 1
        report(8, "poly-lr-schedule")


# -- criterion 9: preprocessing exactness -------------------------------------------

class TestCriterion9Preprocessing:
    def test_window_triple_exact(self):
        out = datapipe.window_normalize(np.array([[-1250.0, -500.0, 250.0]]))
        assert out[0, 0] == 0.0 and out[0, 1] == 0.5 and out[0, 2] == 1.0

    def test_co_travel_100_random_delta_pairs(self):
        start = time.time()
        rng = np.random.default_rng(900)
        checked = 0
        while checked < 100:
            h = w = 48
            r, c = rng.integers(10, 38, size=2)
            delta = np.zeros((h, w), dtype=np.float32)
            delta[r, c] = 1.0
            sample = DomainSample(
                image=Slice(delta), label=BinaryMask(delta.astype(np.uint8)),
                domain=Domain.SOURCE, sample_id="delta")
            out = datapipe.augment(sample, AugmentParams.random(rng))
            if out.label.pixels.sum() == 0 or out.image.pixels.max() == 0:
                continue  # warped outside the frame; draw another pair
            img_peak = np.array(np.unravel_index(
                out.image.pixels.argmax(), out.image.pixels.shape), dtype=float)
            lbl_pts = np.argwhere(out.label.pixels)
            dist = np.sqrt(((lbl_pts - img_peak) ** 2).sum(axis=1)).min()
            assert dist <= 1.5, f"label strayed {dist:.2f}px from its pixel"
            checked += 1
        elapsed = time.time() - start
        assert elapsed < 10
        report(9, "preprocessing-exactness", f"100 delta pairs in {elapsed:.2f}s")
