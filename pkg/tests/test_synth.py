"""Synthetic generators: spec validation, determinism, and oracle values.

Closed-form constants below were computed independently with the scipy
normal CDF and are frozen here; the module under test uses math.erfc.
"""

import json

import numpy as np
import pytest

from histobench.embeddings import join_manifest, read_embeddings, read_manifest
from histobench.errors import ConfigurationError
from histobench.expression import RegressionTask, run_hest_task
from histobench.synth import (
    DEFAULT_SUITE,
    SynthSpec,
    bayes_balanced_accuracy,
    class_centers,
    generate_suite,
    load_suite_spec,
    normal_cdf,
    synth_generate,
)

PHI_4 = 0.9999683287581669
PHI_3 = 0.9986501019683699
PHI_3_POW_20 = 0.9733454738861914
NONEMPTY_MASK_RATE = 0.9992020773370239
BAYES_K3_S2 = 0.969666490735761
PHI_4_NOISE_06 = 0.9996981779009333


def gaussian_spec(**overrides):
    base = dict(
        kind="gaussian-classification",
        dataset_id="toy-cls",
        dim=8,
        n_train=60,
        n_val=20,
        n_test=40,
        seed=5,
    )
    base.update(overrides)
    return SynthSpec(**base)


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError, match="unknown synthetic kind"):
            SynthSpec(kind="mixture-of-experts", dataset_id="x")

    def test_zero_dim(self):
        with pytest.raises(ConfigurationError, match="dim"):
            gaussian_spec(dim=0)

    def test_single_class(self):
        with pytest.raises(ConfigurationError, match="classes"):
            gaussian_spec(n_classes=1)

    def test_empty_train_part(self):
        with pytest.raises(ConfigurationError, match="train"):
            gaussian_spec(n_train=0)

    def test_negative_regression_noise(self):
        with pytest.raises(ConfigurationError, match="noise"):
            SynthSpec(kind="linear-regression", dataset_id="x", noise=-0.1)

    def test_witness_rate_bounds(self):
        with pytest.raises(ConfigurationError, match="witness_rate"):
            SynthSpec(kind="mil-bags", dataset_id="x", witness_rate=0.0)
        with pytest.raises(ConfigurationError, match="witness_rate"):
            SynthSpec(kind="mil-bags", dataset_id="x", witness_rate=1.2)

    def test_model_noise_alignment(self):
        with pytest.raises(ConfigurationError, match="model_ids"):
            gaussian_spec(model_ids=("a", "b"), model_noise=(0.0,))

    def test_duplicate_model_ids(self):
        with pytest.raises(ConfigurationError, match="duplicate model_id"):
            gaussian_spec(model_ids=("a", "a"), model_noise=(0.0, 0.1))


class TestOracleFormulas:
    def test_normal_cdf_matches_frozen_values(self):
        assert normal_cdf(4.0) == pytest.approx(PHI_4, abs=1e-15)
        assert normal_cdf(3.0) == pytest.approx(PHI_3, abs=1e-15)
        assert normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)

    def test_two_class_bayes_is_phi_of_separation(self):
        assert bayes_balanced_accuracy(2, 4.0) == pytest.approx(PHI_4, abs=1e-15)
        assert bayes_balanced_accuracy(2, 3.0) == pytest.approx(PHI_3, abs=1e-15)

    def test_three_class_bayes(self):
        assert bayes_balanced_accuracy(3, 2.0) == pytest.approx(BAYES_K3_S2, abs=1e-12)

    def test_feature_noise_rescales_separation(self):
        assert bayes_balanced_accuracy(2, 4.0, 0.6) == pytest.approx(
            PHI_4_NOISE_06, abs=1e-15
        )

    def test_centers_symmetric(self):
        assert class_centers(2, 4.0) == [-4.0, 4.0]
        assert class_centers(3, 2.0) == [-4.0, 0.0, 4.0]


class TestGaussianGeneration:
    def test_store_layout_and_shapes(self, tmp_path):
        art = synth_generate(gaussian_spec(), tmp_path)
        assert art.manifest_path == tmp_path / "manifests" / "toy-cls.csv"
        assert art.oracle_path == tmp_path / "oracles" / "toy-cls.json"
        assert len(art.embedding_paths) == 4  # 2 models x (cls, mean)
        manifest = read_manifest(art.manifest_path, "toy-cls")
        assert manifest.n_items == 120
        assert manifest.splits.count("train") == 60
        assert manifest.splits.count("val") == 20
        assert manifest.splits.count("test") == 40

    def test_labels_balanced_within_parts(self, tmp_path):
        art = synth_generate(gaussian_spec(), tmp_path)
        manifest = read_manifest(art.manifest_path, "toy-cls")
        for part in ("train", "val", "test"):
            labels = [
                int(l)
                for l, s in zip(manifest.labels, manifest.splits)
                if s == part
            ]
            assert labels.count(0) == labels.count(1) == len(labels) // 2

    def test_oracle_document_contents(self, tmp_path):
        art = synth_generate(gaussian_spec(separation=4.0), tmp_path)
        doc = json.loads(art.oracle_path.read_text(encoding="utf-8"))
        assert doc == art.oracle
        assert doc["bayes_balanced_accuracy"] == pytest.approx(PHI_4, abs=1e-15)
        per_model = doc["bayes_balanced_accuracy_per_model"]
        assert per_model["synth-a"] == pytest.approx(PHI_4, abs=1e-15)
        assert per_model["synth-b"] == pytest.approx(PHI_4_NOISE_06, abs=1e-15)

    def test_signal_lands_on_first_axis(self, tmp_path):
        art = synth_generate(gaussian_spec(), tmp_path)
        matrix = read_embeddings(
            tmp_path / "embeddings" / "toy-cls" / "synth-a" / "cls.pemb",
            "synth-a",
            "toy-cls",
        )
        manifest = read_manifest(art.manifest_path, "toy-cls")
        bound = join_manifest(matrix, manifest)
        x0 = bound.X[:, 0]
        assert x0[bound.labels == 0].mean() < -3
        assert x0[bound.labels == 1].mean() > 3

    def test_mean_token_file_differs_but_aligns(self, tmp_path):
        synth_generate(gaussian_spec(), tmp_path)
        base = tmp_path / "embeddings" / "toy-cls" / "synth-a"
        cls = read_embeddings(base / "cls.pemb", "synth-a", "toy-cls")
        mean = read_embeddings(base / "mean.pemb", "synth-a", "toy-cls")
        assert cls.item_ids == mean.item_ids
        assert cls.dim == mean.dim
        assert not np.array_equal(cls.items, mean.items)

    def test_generation_deterministic(self, tmp_path):
        a_root = tmp_path / "a"
        b_root = tmp_path / "b"
        art_a = synth_generate(gaussian_spec(), a_root)
        art_b = synth_generate(gaussian_spec(), b_root)
        for path_a, path_b in zip(
            (art_a.manifest_path, art_a.oracle_path, *art_a.embedding_paths),
            (art_b.manifest_path, art_b.oracle_path, *art_b.embedding_paths),
        ):
            assert path_a.read_bytes() == path_b.read_bytes()

    def test_seed_changes_bytes(self, tmp_path):
        art_a = synth_generate(gaussian_spec(seed=5), tmp_path / "a")
        art_b = synth_generate(gaussian_spec(seed=6), tmp_path / "b")
        assert art_a.embedding_paths[0].read_bytes() != art_b.embedding_paths[0].read_bytes()


class TestRegressionGeneration:
    def test_noiseless_targets_follow_true_map(self, tmp_path):
        spec = SynthSpec(
            kind="linear-regression",
            dataset_id="toy-genes",
            dim=8,
            n_patients=3,
            spots_per_patient=10,
            noise=0.0,
            seed=9,
        )
        art = synth_generate(spec, tmp_path)
        doc = json.loads(art.oracle_path.read_text(encoding="utf-8"))
        W = np.asarray(doc["true_weights"])
        intercept = np.asarray(doc["true_intercept"])
        assert W.shape == (50, 8)
        assert doc["expected_per_gene_r"] == 1.0
        matrix = read_embeddings(
            tmp_path / "embeddings" / "toy-genes" / "synth-a" / "cls.pemb",
            "synth-a",
            "toy-genes",
        )
        manifest = read_manifest(art.manifest_path, "toy-genes")
        bound = join_manifest(matrix, manifest)
        # float32 embedding rows vs float64 generation: targets were computed
        # from the full-precision features, so agreement is near single precision
        reconstructed = bound.X.astype(np.float64) @ W.T + intercept
        assert np.allclose(reconstructed, bound.targets, atol=1e-4)

    def test_noiseless_run_scores_near_one(self, tmp_path):
        spec = SynthSpec(
            kind="linear-regression",
            dataset_id="toy-genes",
            dim=8,
            n_patients=3,
            spots_per_patient=30,
            noise=0.0,
            seed=9,
        )
        art = synth_generate(spec, tmp_path)
        matrix = read_embeddings(
            tmp_path / "embeddings" / "toy-genes" / "synth-a" / "cls.pemb",
            "synth-a",
            "toy-genes",
        )
        bound = join_manifest(matrix, read_manifest(art.manifest_path, "toy-genes"))
        result = run_hest_task(bound, RegressionTask(task_id="toy-genes"))
        assert len(result.fold_scores) == 3
        assert result.mean >= 0.99

    def test_noisy_model_degrades_but_correlates(self, tmp_path):
        spec = SynthSpec(
            kind="linear-regression",
            dataset_id="toy-genes",
            dim=8,
            n_patients=3,
            spots_per_patient=30,
            noise=0.0,
            seed=9,
        )
        art = synth_generate(spec, tmp_path)
        manifest = read_manifest(art.manifest_path, "toy-genes")
        scores = {}
        for model in ("synth-a", "synth-b"):
            matrix = read_embeddings(
                tmp_path / "embeddings" / "toy-genes" / model / "cls.pemb",
                model,
                "toy-genes",
            )
            bound = join_manifest(matrix, manifest)
            scores[model] = run_hest_task(bound, RegressionTask(task_id="toy-genes")).mean
        assert scores["synth-b"] < scores["synth-a"]
        assert scores["synth-b"] > 0.5


class TestMilGeneration:
    def setup_method(self):
        self.spec = SynthSpec(
            kind="mil-bags",
            dataset_id="toy-bags",
            dim=8,
            n_train=20,
            n_val=6,
            n_test=10,
            seed=7,
        )

    def test_oracle_closed_forms(self, tmp_path):
        art = synth_generate(self.spec, tmp_path)
        doc = art.oracle
        assert doc["bag_positive_rate"] == pytest.approx(NONEMPTY_MASK_RATE, abs=1e-15)
        assert doc["threshold_specificity"] == pytest.approx(PHI_3_POW_20, abs=1e-15)
        assert doc["threshold_sensitivity_floor"] == pytest.approx(PHI_3, abs=1e-15)
        assert doc["threshold_balanced_accuracy_floor"] == pytest.approx(
            (PHI_3 + PHI_3_POW_20) / 2, abs=1e-15
        )

    def test_bag_structure(self, tmp_path):
        art = synth_generate(self.spec, tmp_path)
        manifest = read_manifest(
            art.manifest_path, "toy-bags", task_kind="slide-classification"
        )
        assert manifest.n_items == 36 * 20
        slides = sorted(set(manifest.slide_ids))
        assert len(slides) == 36
        by_slide = {}
        for slide, label, split in zip(
            manifest.slide_ids, manifest.labels, manifest.splits
        ):
            by_slide.setdefault(slide, set()).add((int(label), split))
        for slide, tags in by_slide.items():
            assert len(tags) == 1, f"bag {slide} mixes labels or splits"

    def test_positive_bags_hold_a_witness(self, tmp_path):
        art = synth_generate(self.spec, tmp_path)
        matrix = read_embeddings(
            tmp_path / "embeddings" / "toy-bags" / "synth-a" / "cls.pemb",
            "synth-a",
            "toy-bags",
        )
        manifest = read_manifest(
            art.manifest_path, "toy-bags", task_kind="slide-classification"
        )
        bound = join_manifest(matrix, manifest)
        x0 = bound.X[:, 0]
        for slide in sorted(set(bound.slide_ids)):
            rows = [i for i, s in enumerate(bound.slide_ids) if s == slide]
            label = int(bound.labels[rows[0]])
            has_high = bool((x0[rows] > 0).any())
            # background sits at -3, witnesses at +3; the midpoint separates them
            assert has_high == (label == 1), slide


class TestSuite:
    def test_generate_suite_covers_registry_datasets(self, tmp_path):
        arts = generate_suite(tmp_path)
        ids = [a.dataset_id for a in arts]
        assert ids == ["synth-patch", "synth-grid", "synth-bags", "synth-genes"]
        for art in arts:
            assert art.manifest_path.exists()
            assert art.oracle_path.exists()
            for path in art.embedding_paths:
                assert path.exists()

    def test_default_suite_matches_synthetic_registry(self):
        from histobench.registry import synthetic_registry

        reg_ids = set(synthetic_registry().task_ids)
        suite_ids = {spec.dataset_id for spec in DEFAULT_SUITE}
        assert suite_ids == reg_ids

    def test_load_suite_spec_round_trip(self, tmp_path):
        path = tmp_path / "suite.json"
        path.write_text(
            json.dumps(
                [
                    {
                        "kind": "gaussian-classification",
                        "dataset_id": "mini",
                        "dim": 4,
                        "n_train": 10,
                        "n_val": 0,
                        "n_test": 10,
                        "model_ids": ["m1"],
                        "model_noise": [0.0],
                    }
                ]
            ),
            encoding="utf-8",
        )
        specs = load_suite_spec(path)
        assert len(specs) == 1
        assert specs[0].dataset_id == "mini"
        assert specs[0].model_ids == ("m1",)

    def test_load_suite_spec_bad_field(self, tmp_path):
        path = tmp_path / "suite.json"
        path.write_text(json.dumps([{"kind": "mil-bags", "bogus": 1}]), encoding="utf-8")
        with pytest.raises(ConfigurationError, match="entry 0"):
            load_suite_spec(path)
