import numpy as np
import pytest
import torch

from dascseg import networks, selfcorrect, synthbench
from dascseg.adaptation import TrainingConfig, train_cam_extractor, train_afd_da
from dascseg.datapipe import BinaryMask, Domain, DomainSample, Slice
from dascseg.determinism import enable_determinism
from dascseg.errors import ConfigError, DataError
from dascseg.networks import ParameterVector
from dascseg.selfcorrect import (
    PseudoLabelSet, SelfCorrectionConfig, aggregate_labels, aggregate_weights,
    build_mixed_dataset, generate_pseudo_labels, load_pseudo_archive,
    run_self_correction, save_pseudo_archive,
)


def pv(values, role="w"):
    return ParameterVector({"layer.weight": np.asarray(values, dtype=np.float64)}, role)


def pls(maps, cycle=0):
    return PseudoLabelSet(maps={k: np.asarray(v, dtype=np.float64)
                                for k, v in maps.items()}, cycle=cycle)


class TestAggregateWeights:
    def test_fixed_point_for_every_cycle(self):
        rng = np.random.default_rng(0)
        w = pv(rng.standard_normal(64))
        for c in range(1, 10):
            out = aggregate_weights(w, w, c)
            np.testing.assert_array_equal(out.entries["layer.weight"],
                                          w.entries["layer.weight"])

    def test_scalar_example_c1(self):
        out = aggregate_weights(pv([5.0]), pv([3.0]), 1)
        assert out.entries["layer.weight"][0] == 4.0

    def test_scalar_example_c9(self):
        out = aggregate_weights(pv([0.0]), pv([1.0]), 9)
        assert out.entries["layer.weight"][0] == 0.1

    def test_layout_mismatch_rejected(self):
        a = pv([1.0, 2.0])
        b = ParameterVector({"other.weight": np.array([1.0, 2.0])})
        with pytest.raises(ValueError):
            aggregate_weights(a, b, 1)

    def test_cycle_below_one_rejected(self):
        with pytest.raises(ValueError):
            aggregate_weights(pv([1.0]), pv([2.0]), 0)

    def test_interval_hull_property(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            prev = rng.standard_normal(8) * rng.choice([1e-6, 1.0, 1e6])
            init = rng.standard_normal(8) * rng.choice([1e-6, 1.0, 1e6])
            c = int(rng.integers(1, 10))
            out = aggregate_weights(pv(prev), pv(init), c).entries["layer.weight"]
            lo = np.minimum(prev, init)
            hi = np.maximum(prev, init)
            assert np.all(out >= lo) and np.all(out <= hi)


class TestAggregateLabels:
    def test_fixed_point(self):
        rng = np.random.default_rng(2)
        maps = {"a": rng.random((6, 6)), "b": rng.random((6, 6))}
        y = pls(maps)
        out = aggregate_labels(y, pls(maps), 3)
        for sid in maps:
            np.testing.assert_array_equal(out.maps[sid], maps[sid])

    def test_pixel_example_c2(self):
        out = aggregate_labels(pls({"a": [[0.9]]}, cycle=1), pls({"a": [[0.3]]}), 2)
        assert out.maps["a"][0, 0] == 0.7

    def test_pixel_example_c9(self):
        out = aggregate_labels(pls({"a": [[1.0]]}), pls({"a": [[0.0]]}), 9)
        assert out.maps["a"][0, 0] == 0.9

    def test_sample_set_mismatch_rejected(self):
        with pytest.raises(DataError):
            aggregate_labels(pls({"a": [[0.5]]}), pls({"b": [[0.5]]}), 1)

    def test_stays_in_unit_interval_many_cycles(self):
        rng = np.random.default_rng(3)
        y0 = pls({"a": rng.random((8, 8))})
        current = pls({"a": rng.random((8, 8))})
        for c in range(1, 40):
            current = aggregate_labels(current, y0, c)
            assert current.maps["a"].min() >= 0.0
            assert current.maps["a"].max() <= 1.0

    def test_frozen_model_labels_converge(self):
        # with a frozen predictor the fresh map is constant, so successive
        # aggregates approach it and the per-cycle change vanishes
        rng = np.random.default_rng(4)
        fresh = pls({"a": rng.random((8, 8))})
        y0 = pls({"a": rng.random((8, 8))})
        prev = y0
        changes = []
        for c in range(1, 60):
            out = aggregate_labels(fresh, y0, c)
            changes.append(np.abs(out.maps["a"] - prev.maps["a"]).max())
            prev = out
        assert changes[-1] < 1e-3
        assert changes[-1] < changes[0]


class TestGeneratePseudoLabels:
    def _target(self, rng, n=3, size=16):
        return [DomainSample(image=Slice(rng.random((size, size)).astype(np.float32)),
                             label=None, domain=Domain.TARGET, sample_id=f"t{i}")
                for i in range(n)]

    def test_identity_stub_model_tta_returns_input(self):
        # predictor returns the image itself; flips cancel exactly
        rng = np.random.default_rng(5)
        target = self._target(rng)
        out = generate_pseudo_labels(lambda imgs: imgs[:, 0],
                                     target, ("horizontal", "vertical"))
        for s in target:
            np.testing.assert_allclose(out.maps[s.sample_id], s.image.pixels,
                                       rtol=0, atol=1e-7)

    def test_no_flips_gives_single_view(self):
        rng = np.random.default_rng(6)
        target = self._target(rng)

        def half_plus(imgs):
            return imgs[:, 0] * 0.5

        out = generate_pseudo_labels(half_plus, target, ())
        for s in target:
            np.testing.assert_allclose(out.maps[s.sample_id], s.image.pixels * 0.5,
                                       rtol=0, atol=1e-7)

    def test_symmetric_input_matches_single_view(self):
        rng = np.random.default_rng(7)
        half = rng.random((8, 4)).astype(np.float32)
        sym = np.concatenate([half, half[:, ::-1]], axis=1)  # left-right symmetric
        target = [DomainSample(image=Slice(sym), label=None,
                               domain=Domain.TARGET, sample_id="sym")]

        calls = []

        def model(imgs):
            calls.append(imgs)
            return imgs[:, 0] * 0.25

        tta = generate_pseudo_labels(model, target, ("horizontal",))
        single = generate_pseudo_labels(model, target, ())
        np.testing.assert_allclose(tta.maps["sym"], single.maps["sym"], atol=1e-7)

    def test_maps_in_unit_interval(self):
        rng = np.random.default_rng(8)
        target = self._target(rng)
        gen = networks.build_generator(networks.ArchConfig.small(), 0)
        predictor = selfcorrect.make_predictor(gen, None, cam_on=False)
        out = generate_pseudo_labels(predictor, target, ("horizontal", "vertical"))
        for m in out.maps.values():
            assert m.min() >= 0.0 and m.max() <= 1.0


class TestBuildMixedDataset:
    def _sets(self, rng, ns=4, nt=6, size=8):
        source = [DomainSample(image=Slice(rng.random((size, size)).astype(np.float32)),
                               label=BinaryMask((rng.random((size, size)) > 0.5).astype(np.uint8)),
                               domain=Domain.SOURCE, sample_id=f"s{i}")
                  for i in range(ns)]
        target = [DomainSample(image=Slice(rng.random((size, size)).astype(np.float32)),
                               label=None, domain=Domain.TARGET, sample_id=f"t{i}")
                  for i in range(nt)]
        return source, target

    def test_union_size(self):
        rng = np.random.default_rng(9)
        source, target = self._sets(rng, 20, 30)
        pseudo = pls({s.sample_id: np.full((8, 8), 0.8) for s in target})
        mixed = build_mixed_dataset(source, target, pseudo)
        assert len(mixed) == 50

    def test_threshold_binarization(self):
        rng = np.random.default_rng(10)
        source, target = self._sets(rng, 1, 1)
        pseudo = pls({target[0].sample_id: np.full((8, 8), 0.6)})
        mixed = build_mixed_dataset(source, target, pseudo, threshold=0.5)
        assert mixed[-1].label.pixels.all()

    def test_tie_goes_to_foreground(self):
        rng = np.random.default_rng(11)
        source, target = self._sets(rng, 1, 1)
        pseudo = pls({target[0].sample_id: np.full((8, 8), 0.5)})
        mixed = build_mixed_dataset(source, target, pseudo, threshold=0.5)
        assert mixed[-1].label.pixels.all()

    def test_domain_tags_preserved(self):
        rng = np.random.default_rng(12)
        source, target = self._sets(rng)
        pseudo = pls({s.sample_id: np.zeros((8, 8)) for s in target})
        mixed = build_mixed_dataset(source, target, pseudo)
        assert sum(1 for s in mixed if s.domain is Domain.TARGET) == len(target)

    def test_missing_pseudo_label_rejected(self):
        rng = np.random.default_rng(13)
        source, target = self._sets(rng)
        pseudo = pls({target[0].sample_id: np.zeros((8, 8))})
        with pytest.raises(DataError):
            build_mixed_dataset(source, target, pseudo)


class TestConfig:
    def test_bad_cycles_rejected(self):
        with pytest.raises(ConfigError):
            SelfCorrectionConfig(cycles=0)

    def test_bad_flip_rejected(self):
        with pytest.raises(ConfigError):
            SelfCorrectionConfig(tta_flips=("diagonal",))


@pytest.fixture(scope="module")
def trained_setup():
    enable_determinism(11)
    bench = synthbench.generate(synthbench.SynthSpec(
        image_size=(32, 32), n_samples=10, seed=21,
        blob_scale_range=(0.15, 0.3), fraction_negative=0.3))
    cfg = TrainingConfig(arch_preset="small", resolution=(32, 32), batch_size=4,
                         epochs_da=1, epochs_cam=1, seed=11, augment=False,
                         use_feature_alignment=False)
    _, cam_vec = train_cam_extractor(bench.source, cfg)
    vectors, _ = train_afd_da(bench.source, bench.target, cam_vec, cfg)
    return bench, cfg, vectors


class TestRunSelfCorrection:
    def test_ep0_is_exact_fixed_point(self, trained_setup):
        bench, cfg, vectors = trained_setup
        sc = SelfCorrectionConfig(cycles=3, epochs_per_cycle=0, seed=11)
        final, labels, history = run_self_correction(
            vectors, bench.source, bench.target, sc, cfg)
        for role, pv0 in vectors.items():
            for name in pv0.names():
                np.testing.assert_array_equal(final[role].entries[name],
                                              pv0.entries[name])
        # labels must equal the initial generation exactly
        gen = networks.build_generator(cfg.arch(), cfg.seed)
        ext = networks.build_cam_extractor(cfg.arch(), cfg.seed)
        networks.load_generator_vectors(gen, ext, vectors)
        predictor = selfcorrect.make_predictor(gen, ext, cam_on=cfg.cam_attention_on_target)
        y0 = generate_pseudo_labels(predictor, bench.target, sc.tta_flips)
        for sid in y0.maps:
            np.testing.assert_array_equal(labels.maps[sid], y0.maps[sid])

    def test_single_cycle_runs_one_training_phase(self, trained_setup):
        bench, cfg, vectors = trained_setup
        sc = SelfCorrectionConfig(cycles=1, epochs_per_cycle=1, seed=11)
        final, labels, history = run_self_correction(
            vectors, bench.source, bench.target, sc, cfg)
        assert len(history) == 1
        assert history[0]["train_steps"] > 0
        assert labels.cycle == 1

    def test_target_with_labels_rejected(self, trained_setup):
        bench, cfg, vectors = trained_setup
        polluted = [DomainSample(image=s.image,
                                 label=bench.target_truth[s.sample_id],
                                 domain=s.domain, sample_id=s.sample_id)
                    for s in bench.target]
        sc = SelfCorrectionConfig(cycles=1, epochs_per_cycle=0, seed=11)
        with pytest.raises(DataError):
            run_self_correction(vectors, bench.source, polluted, sc, cfg)

    def test_cycle_artifacts_written(self, trained_setup, tmp_path):
        bench, cfg, vectors = trained_setup
        sc = SelfCorrectionConfig(cycles=2, epochs_per_cycle=1, seed=11)
        run_self_correction(vectors, bench.source, bench.target, sc, cfg,
                            out_dir=tmp_path)
        assert (tmp_path / "cycle_001" / "manifest.json").exists()
        assert (tmp_path / "cycle_002" / "pseudo" / "pseudo_exact.npz").exists()
        assert (tmp_path / "cycle_metrics.csv").exists()

    def test_soft_target_mode_runs(self, trained_setup):
        bench, cfg, vectors = trained_setup
        sc = SelfCorrectionConfig(cycles=1, epochs_per_cycle=1, seed=11,
                                  soft_targets=True)
        final, labels, history = run_self_correction(
            vectors, bench.source, bench.target, sc, cfg)
        assert history[0]["train_steps"] > 0


class TestPseudoArchive:
    def test_archive_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        labels = pls({"a": rng.random((8, 8)), "b": rng.random((8, 8))}, cycle=4)
        save_pseudo_archive(tmp_path, labels)
        back = load_pseudo_archive(tmp_path)
        assert back.cycle == 4
        for sid in labels.maps:
            np.testing.assert_array_equal(back.maps[sid], labels.maps[sid])
        assert (tmp_path / "a.png").exists()
