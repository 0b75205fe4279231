import numpy as np
import pytest

from sm2.core import ConfigError
from sm2.dataio import (CsvSchema, DataParseError, LinearRegressionSpec, QuadraticBowlSpec, TwoGaussiansSpec,
                        build_store, count_batches, generate_synthetic, iter_batches, load_csv,
                        split_indices, write_csv)


class TestSplit:
    def test_disjoint_cover(self):
        train, hold = split_indices(1000, 0.1, seed=3)
        assert len(hold) == 100 and len(train) == 900
        assert sorted(np.concatenate([train, hold]).tolist()) == list(range(1000))

    def test_seeded(self):
        np.testing.assert_array_equal(split_indices(500, 0.1, 1)[0], split_indices(500, 0.1, 1)[0])
        assert not np.array_equal(split_indices(500, 0.1, 1)[0], split_indices(500, 0.1, 2)[0])

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_indices(10, 1.0, 0)


class TestSynthetic:
    def test_linear_regression_recoverable(self):
        ds = generate_synthetic(LinearRegressionSpec(n_samples=2000, input_dim=3, noise_sigma=0.0), seed=0)
        x = np.hstack([ds.inputs, np.ones((ds.n_samples, 1))])
        coef, *_ = np.linalg.lstsq(x, ds.targets, rcond=None)
        np.testing.assert_allclose(coef[:3], np.array(ds.provenance["weights"]), atol=1e-10)
        assert ds.task == "regression"

    def test_two_gaussians_labels(self):
        ds = generate_synthetic(TwoGaussiansSpec(n_samples=2000, input_dim=3), seed=1)
        assert set(np.unique(ds.targets)) == {0, 1}
        assert ds.task == "classification"
        # first coordinate separates the classes
        m0 = ds.inputs[ds.targets == 0, 0].mean()
        m1 = ds.inputs[ds.targets == 1, 0].mean()
        assert m1 - m0 == pytest.approx(2.0, abs=0.15)

    def test_same_seed_same_data(self):
        a = generate_synthetic(TwoGaussiansSpec(n_samples=300), seed=4)
        b = generate_synthetic(TwoGaussiansSpec(n_samples=300), seed=4)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)

    def test_bowl_hessian_exact(self):
        spec = QuadraticBowlSpec(n_samples=1024, input_dim=5, condition_number=20.0, lambda_max=3.0)
        ds = generate_synthetic(spec, seed=2)
        lambdas = 3.0 * np.geomspace(1 / 20, 1, 5)
        np.testing.assert_allclose(ds.hessian, np.diag(np.append(lambdas, 1.0)), atol=1e-12)
        assert ds.lambda_max == pytest.approx(3.0)
        assert np.linalg.eigvalsh(ds.hessian).max() == pytest.approx(ds.lambda_max)

    def test_bowl_condition_number(self):
        ds = generate_synthetic(QuadraticBowlSpec(n_samples=512, input_dim=6, condition_number=10.0), seed=5)
        w = np.linalg.eigvalsh(ds.hessian[:-1, :-1])
        assert w.max() / w.min() == pytest.approx(10.0, rel=1e-12)

    def test_separable_limit(self):
        from sm2.trainer import BuiltinLearnerSpec, LearnerKind, make_learner
        ds = generate_synthetic(TwoGaussiansSpec(n_samples=1000, input_dim=2, separation=40.0), seed=0)
        learner = make_learner(BuiltinLearnerSpec(LearnerKind.LOGISTIC_CLASSIFIER, 2, 2))
        learner.params = {"W": np.array([[-1.0, 1.0], [0.0, 0.0]]), "b": np.zeros(2)}
        assert learner.evaluate(*ds.holdout())[0] == 1.0

    def test_bowl_divisibility(self):
        with pytest.raises(ValueError, match="multiple of 8"):
            generate_synthetic(QuadraticBowlSpec(n_samples=100, input_dim=4), seed=0)

    def test_unknown_spec(self):
        with pytest.raises(ValueError):
            generate_synthetic(object(), seed=0)


class TestCsv:
    def test_round_trip(self, tmp_path, regression):
        schema = write_csv(regression, tmp_path / "d.csv", ["target"])
        back = load_csv(tmp_path / "d.csv", schema, seed=0)
        np.testing.assert_array_equal(back.inputs, regression.inputs)
        np.testing.assert_array_equal(back.targets, regression.targets)

    def test_classification(self, tmp_path, gaussians):
        schema = write_csv(gaussians, tmp_path / "c.csv", ["label"])
        back = load_csv(tmp_path / "c.csv", schema)
        assert back.targets.dtype == np.int64
        np.testing.assert_array_equal(back.targets, gaussians.targets)

    def test_three_lines(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("a,target\n1,2\n3,4\n")
        ds = load_csv(p, CsvSchema(["target"]), holdout_fraction=0.5)
        assert ds.n_samples == 2

    def test_bad_value_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,target\n1,2,3\n4,x,6\n")
        with pytest.raises(DataParseError) as exc:
            load_csv(p, CsvSchema(["target"]))
        assert exc.value.line == 3
        assert "'b'" in str(exc.value)

    def test_nan_rejected(self, tmp_path):
        p = tmp_path / "nan.csv"
        p.write_text("a,target\n1,2\nnan,3\n")
        with pytest.raises(DataParseError, match="line 3"):
            load_csv(p, CsvSchema(["target"]))

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("a,target\n1,2,3\n")
        with pytest.raises(DataParseError, match="line 2"):
            load_csv(p, CsvSchema(["target"]))

    def test_missing_target(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataParseError, match="line 1"):
            load_csv(p, CsvSchema(["target"]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_csv(tmp_path / "nope.csv", CsvSchema(["t"]))


def tiny(n=64):
    from sm2.dataio import Dataset
    x = np.arange(n, dtype=float)[:, None]
    return Dataset(x, x.copy(), np.arange(n), np.array([], dtype=np.int64), "regression")


class TestMicroBatchStore:
    def test_micro_blocks(self):
        store = build_store(tiny(), [8, 16, 32])
        assert store.n_blocks == 8 and store.micro_batch_size == 8

    def test_eight_and_twelve(self):
        with pytest.raises(ConfigError, match="12"):
            build_store(tiny(), [8, 12])

    def test_capacity_four(self):
        store = build_store(tiny(), [8, 32], capacity=4)
        peak = 0
        for _ in iter_batches(store, 32):
            peak = max(peak, store.resident_count)
        assert peak <= 4 and store.peak_resident <= 4

    def test_identity_pass_through(self):
        store = build_store(tiny(), [8])
        batches = list(iter_batches(store, 8))
        np.testing.assert_array_equal(np.concatenate([b[0] for b in batches]).ravel(), np.arange(64))

    def test_same_global_order(self):
        store = build_store(tiny(), [8, 32])
        big = list(iter_batches(store, 32))
        assert len(big) == 2 and all(len(b[0]) == 32 for b in big)
        np.testing.assert_array_equal(np.concatenate([b[0] for b in big]).ravel(), np.arange(64))

    def test_concatenation_preserves_order(self, gaussians):
        store = build_store(gaussians, [8, 32])
        small = list(iter_batches(store, 8))
        big = list(iter_batches(store, 32))
        assert len(big) == len(small) // 4
        np.testing.assert_array_equal(big[0][0], np.concatenate([s[0] for s in small[:4]]))
        np.testing.assert_array_equal(big[3][1], np.concatenate([s[1] for s in small[12:16]]))

    def test_drop_last(self, gaussians):
        store = build_store(gaussians, [100])
        n_train = len(gaussians.train_idx)
        assert store.n_blocks == n_train // 100
        assert all(len(x) == 100 for x, _ in iter_batches(store, 100))

    def test_fraction(self, gaussians):
        store = build_store(gaussians, [8, 64])
        n = count_batches(store, 64, 0.25)
        assert n == int(store.n_blocks * 0.25) // 8
        assert len(list(iter_batches(store, 64, 0.25))) == n

    def test_fifo_capacity(self, gaussians):
        store = build_store(gaussians, [8, 32], capacity=6)
        batches = list(iter_batches(store, 32))
        assert store.peak_resident <= 6
        assert store.eviction_log[:2] == [0, 1]
        assert len(batches) == store.n_blocks // 4

    def test_capacity_too_small(self, gaussians):
        store = build_store(gaussians, [8, 64], capacity=4)
        with pytest.raises(ConfigError, match="capacity"):
            next(iter_batches(store, 64))

    def test_divisibility_names_candidate(self, gaussians):
        with pytest.raises(ConfigError, match="24"):
            build_store(gaussians, [16, 24])

    def test_unknown_candidate(self, gaussians):
        store = build_store(gaussians, [8])
        with pytest.raises(ConfigError):
            next(iter_batches(store, 16))
