import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tabcl.data import (ADULT_SCHEMA, DataError, Marginals, NormKind, SchemaHint, bundled_path,
                        concat, corrupt, from_arrays, load_adult, load_csv, normalize,
                        quantile_bins, standardize, subsample, take, write_csv)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


MIXED = "a,b,color,label\n1.5,2,red,yes\n-0.5,4,blue,no\n3,0.25,red,yes\n"


class TestLoadCsv:
    def test_header_only(self, tmp_path):
        ds = load_csv(_write(tmp_path, "a,b,y\n"), SchemaHint("y"))
        assert ds.n == 0

    def test_mixed_columns(self, tmp_path):
        ds = load_csv(_write(tmp_path, MIXED), SchemaHint("label"))
        assert (ds.n, ds.d) == (3, 4)
        assert ds.columns[2].categories == ("blue", "red")
        np.testing.assert_array_equal(ds.features[:, 2:], [[0, 1], [1, 0], [0, 1]])
        np.testing.assert_array_equal(ds.target, [1, 0, 1])
        assert ds.target_names == ("no", "yes")

    def test_round_trip(self, tmp_path):
        ds = load_csv(_write(tmp_path, MIXED), SchemaHint("label"))
        write_csv(ds, tmp_path / "out.csv", "label")
        back = load_csv(tmp_path / "out.csv", SchemaHint("label"))
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.target, ds.target)

    def test_round_trip_regression(self, tmp_path, rng):
        x = rng.normal(size=(20, 3)) * 1e3
        ds = from_arrays(x, rng.normal(size=20), task="regression")
        write_csv(ds, tmp_path / "r.csv", "y")
        back = load_csv(tmp_path / "r.csv", SchemaHint("y", task="regression"))
        np.testing.assert_array_equal(back.features, x)
        np.testing.assert_array_equal(back.target, ds.target)

    def test_missing_value_reports_row(self, tmp_path):
        with pytest.raises(DataError, match="row 1"):
            load_csv(_write(tmp_path, "a,y\n1,x\n?,y\n"), SchemaHint("y"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="expected 2 cells"):
            load_csv(_write(tmp_path, "a,y\n1,x\n2\n"), SchemaHint("y"))

    def test_missing_target_column(self, tmp_path):
        with pytest.raises(DataError, match="target column"):
            load_csv(_write(tmp_path, "a,b\n1,2\n"), SchemaHint("y"))

    def test_declared_numeric_with_text(self, tmp_path):
        with pytest.raises(DataError, match="unparseable"):
            load_csv(_write(tmp_path, "a,y\nfoo,x\n"), SchemaHint("y", kinds={"a": "numeric"}))

    def test_drop_and_declared_categorical(self, tmp_path):
        ds = load_csv(_write(tmp_path, MIXED), SchemaHint("label", kinds={"b": "categorical"},
                                                            drop=["a"]))
        assert [c.name for c in ds.columns] == ["b", "color"]
        assert ds.d == 3 + 2

    def test_one_hot_blocks_have_single_one(self):
        ds = load_adult()
        for col, sl in zip(ds.columns, ds.blocks()):
            if col.kind == "categorical":
                np.testing.assert_array_equal(ds.features[:, sl].sum(axis=1), 1.0)

    def test_bundled_adult(self):
        ds = load_csv(bundled_path("adult_5000.csv"), ADULT_SCHEMA)
        assert ds.n == 5000
        assert ds.target_names == ("<=50K", ">50K")
        assert np.isfinite(ds.features).all()


class TestNormalize:
    def test_l2_rows(self, rng):
        ds = normalize(from_arrays(rng.normal(size=(50, 6)), np.zeros(50)), NormKind.L2)
        np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0, atol=1e-12)

    def test_l1_rows(self, rng):
        ds = normalize(from_arrays(rng.normal(size=(50, 6)), np.zeros(50)), "l1")
        np.testing.assert_allclose(np.abs(ds.features).sum(axis=1), 1.0, atol=1e-12)

    def test_zero_row_unchanged(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0]])
        ds = normalize(from_arrays(x, [0, 0]), "l2")
        np.testing.assert_array_equal(ds.features, [[0, 0], [0.6, 0.8]])

    def test_double_normalization_rejected(self, rng):
        ds = normalize(from_arrays(rng.normal(size=(3, 2)), [0, 1, 0]), "l2")
        with pytest.raises(ValueError):
            normalize(ds, "l1")

    @settings(max_examples=100)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)), st.sampled_from(["l1", "l2"]))
    def test_unit_rows_are_fixed_points(self, x, kind):
        once = normalize(from_arrays(x, np.zeros(4)), kind).features
        twice = normalize(from_arrays(once, np.zeros(4)), kind).features
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_standardize_numeric_only(self, tmp_path):
        ds = standardize(load_csv(_write(tmp_path, MIXED), SchemaHint("label")))
        np.testing.assert_allclose(ds.features[:, :2].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.features[:, :2].std(axis=0), 1.0)
        np.testing.assert_array_equal(ds.features[:, 2:], [[0, 1], [1, 0], [0, 1]])
        assert ds.standardized

    def test_fingerprint_tracks_preprocessing(self, rng):
        ds = from_arrays(rng.normal(size=(5, 2)), np.zeros(5))
        prints = {ds.fingerprint(), normalize(ds, "l2").fingerprint(),
                  normalize(ds, "l1").fingerprint(), standardize(ds).fingerprint()}
        assert len(prints) == 4


class TestCorrupt:
    def test_rate_zero(self, rng):
        x = rng.normal(size=(20, 5))
        np.testing.assert_array_equal(corrupt(x, Marginals.from_features(x), 0.0, rng), x)

    def test_rate_one_draws_from_pools(self, rng):
        x = rng.normal(size=(30, 4))
        pool = rng.normal(size=(10, 4))
        out = corrupt(x, Marginals.from_features(pool), 1.0, rng)
        for j in range(4):
            assert np.isin(out[:, j], pool[:, j]).all()

    def test_corrupted_fraction(self):
        x = np.zeros((2000, 5))
        pool = np.ones((50, 5))
        out = corrupt(x, Marginals.from_features(pool), 0.3, 0)
        assert abs(out.mean() - 0.3) < 0.02

    def test_seed_reproducible(self, rng):
        x = rng.normal(size=(40, 6))
        m = Marginals.from_features(x)
        np.testing.assert_array_equal(corrupt(x, m, 0.5, 11), corrupt(x, m, 0.5, 11))

    def test_one_hot_blocks_move_together(self):
        ds = load_adult(max_rows=300)
        out = corrupt(ds.features, Marginals.from_dataset(ds), 0.8, 0)
        for col, sl in zip(ds.columns, ds.blocks()):
            if col.kind == "categorical":
                np.testing.assert_array_equal(out[:, sl].sum(axis=1), 1.0)
                assert set(np.unique(out[:, sl])) <= {0.0, 1.0}

    def test_bad_rate(self, rng):
        x = rng.normal(size=(3, 2))
        with pytest.raises(ValueError):
            corrupt(x, Marginals.from_features(x), 1.5, rng)


class TestTake:
    def test_identity(self, blobs):
        out = take(blobs, np.arange(blobs.n))
        np.testing.assert_array_equal(out.features, blobs.features)
        np.testing.assert_array_equal(out.target, blobs.target)

    def test_empty(self, blobs):
        assert take(blobs, []).n == 0

    def test_concat_oracle(self, blobs):
        a, b = np.arange(0, 50), np.arange(120, 170)
        joined = concat(take(blobs, a), take(blobs, b))
        direct = take(blobs, np.concatenate([a, b]))
        np.testing.assert_array_equal(joined.features, direct.features)
        np.testing.assert_array_equal(joined.target, direct.target)

    def test_out_of_range(self, blobs):
        with pytest.raises(IndexError):
            take(blobs, [blobs.n])


class TestHelpers:
    def test_subsample_keeps_order(self, blobs):
        sub = subsample(blobs, 50, seed=3)
        assert sub.n == 50
        rows = [int(np.flatnonzero((blobs.features == r).all(axis=1))[0]) for r in sub.features]
        assert rows == sorted(rows)

    def test_quantile_bins_balanced(self, rng):
        labels = quantile_bins(rng.normal(size=1000), 10)
        assert set(labels) == set(range(10))
        assert np.bincount(labels).min() >= 95

    def test_quantile_bins_constant_target(self):
        np.testing.assert_array_equal(quantile_bins(np.ones(20), 10), 0)
