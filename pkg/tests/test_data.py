import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from vflbayes.data import (
    HEART_SCHEMA,
    DataError,
    GeneratorSpec,
    SchemaConfig,
    gen_logistic,
    gen_multilevel_poisson,
    generate,
    heart_like_frame,
    kfold,
    load_and_preprocess,
    load_dataset,
    save_dataset,
    vertical_partition,
)
from vflbayes.mathcore import ShapeError


def test_logistic_shapes_and_splits():
    d2, truths = gen_logistic(GeneratorSpec("logistic", n=500, p=20, J=2))
    assert d2.n == 500 and d2.block_sizes == [10, 10]
    assert set(np.unique(d2.y)) <= {0.0, 1.0}
    assert len([k for k in truths if k.startswith("beta")]) == 20 and truths["b"] == 0.0
    d10, _ = gen_logistic(GeneratorSpec("logistic", n=500, p=20, J=10))
    assert d10.block_sizes == [2] * 10


def test_logistic_design_is_standard_normal():
    d, _ = gen_logistic(GeneratorSpec("logistic", n=5000, p=4, J=2, seed=3))
    x = np.hstack(d.blocks)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)
    assert np.all(np.abs(x.std(axis=0) - 1) < 0.05)


def test_generators_deterministic():
    for fam in ("logistic", "linear-gaussian", "poisson-multilevel"):
        spec = GeneratorSpec(fam, n=50, p=4, J=2, seed=9)
        a, _ = generate(spec)
        b, _ = generate(GeneratorSpec(fam, n=50, p=4, J=2, seed=9))
        np.testing.assert_array_equal(a.y, b.y)
        for xa, xb in zip(a.blocks, b.blocks):
            np.testing.assert_array_equal(xa, xb)
    c, _ = generate(GeneratorSpec("poisson-multilevel", n=50, p=4, J=2, seed=10))
    assert not np.array_equal(c.blocks[0], a.blocks[0])


def test_generator_spec_validation():
    with pytest.raises(DataError):
        GeneratorSpec("logistic", p=5, J=2)
    with pytest.raises(DataError):
        GeneratorSpec("logistic", p=5, J=2, block_sizes=[2, 2])
    assert GeneratorSpec("logistic", p=5, J=2, block_sizes=[3, 2]).block_sizes == [3, 2]
    with pytest.raises(DataError):
        generate(GeneratorSpec("gamma", p=2, J=1))


def test_multilevel_poisson():
    d, truths = gen_multilevel_poisson(GeneratorSpec("poisson-multilevel", n=2000, p=4, J=2, intercept=-3.0))
    pop = np.exp(d.offset)
    np.testing.assert_allclose(pop, np.round(pop), rtol=1e-12)
    pop = np.round(pop)
    assert pop.min() >= 250 and pop.max() <= 350
    counts = np.bincount(d.group, minlength=5)
    assert counts.size == 5 and chisquare(counts).pvalue > 0.01
    assert all(np.all(y == np.round(y)) and y >= 0 for y in d.y[:10])
    assert len(truths) == 1 + 2 * 3 * 5 * 2


def test_multilevel_clips_extreme_predictor():
    spec = GeneratorSpec("poisson-multilevel", n=200, p=2, J=1, intercept=40.0)
    with pytest.warns(UserWarning, match="clipped"):
        d, _ = gen_multilevel_poisson(spec)
    assert np.all(np.isfinite(d.y))


def test_vertical_partition_cases():
    x = np.arange(24.0).reshape(4, 6)
    (only,) = vertical_partition(x, [6])
    np.testing.assert_array_equal(only, x)
    parts = vertical_partition(x, [1, 3, 2])
    np.testing.assert_array_equal(np.hstack(parts), x)
    assert [p.shape[1] for p in parts] == [1, 3, 2]
    with pytest.raises(ShapeError):
        vertical_partition(x, [2, 2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=5), st.integers(1, 9))
def test_partition_round_trip(sizes, n):
    x = np.random.default_rng(n).normal(size=(n, sum(sizes)))
    np.testing.assert_array_equal(np.hstack(vertical_partition(x, sizes)), x)


def test_kfold_heart_sizes():
    f = kfold(918, 10, seed=1)
    sizes = np.bincount(f)
    assert sizes.size == 10 and set(sizes) <= {91, 92} and sizes.sum() == 918
    np.testing.assert_array_equal(kfold(918, 10, seed=1), f)
    assert not np.array_equal(kfold(918, 10, seed=2), f)


def test_kfold_loo_and_errors():
    assert sorted(kfold(7, 7)) == list(range(7))
    with pytest.raises(DataError):
        kfold(3, 4)


def _frame():
    return pd.DataFrame({
        "a": [1.0, 2.0, 3.0, 4.0],
        "const": [5.0, 5.0, 5.0, 5.0],
        "c": ["x", "y", "z", "x"],
        "y": [0, 1, 1, 0],
    })


def test_preprocess_zscore_onehot_and_drop():
    schema = SchemaConfig(continuous=["a", "const"], categorical=["c"], response="y")
    with pytest.warns(UserWarning, match="constant"):
        data, pre = load_and_preprocess(_frame(), schema)
    (block,) = data.blocks
    assert data.truths["_columns"] == [["a", "c=x", "c=y", "c=z"]]
    np.testing.assert_allclose(block[:, 0].mean(), 0, atol=1e-15)
    np.testing.assert_allclose(block[:, 0].std(), 1)
    np.testing.assert_array_equal(block[:, 1:].sum(axis=1), 1.0)
    np.testing.assert_array_equal(data.y, [0, 1, 1, 0])


def test_preprocess_uses_train_rows_only():
    schema = SchemaConfig(continuous=["a"], categorical=["c"], response="y")
    df = _frame()
    base, _ = load_and_preprocess(df, schema, train_rows=[0, 1, 2])
    perturbed = df.copy()
    perturbed.loc[3, "a"] = 1e6
    again, _ = load_and_preprocess(perturbed, schema, train_rows=[0, 1, 2])
    np.testing.assert_array_equal(base.blocks[0][:3], again.blocks[0][:3])


def test_preprocess_errors_and_unseen_level():
    schema = SchemaConfig(continuous=["a"], categorical=["c"], response="y")
    with pytest.raises(DataError, match="missing"):
        load_and_preprocess(_frame().drop(columns="a"), schema)
    bad = _frame().astype({"a": object})
    bad.loc[1, "a"] = "oops"
    with pytest.raises(DataError, match="non-numeric"):
        load_and_preprocess(bad, schema)
    with pytest.warns(UserWarning, match="unseen"):
        data, _ = load_and_preprocess(_frame(), schema, train_rows=[0, 1, 3])
    np.testing.assert_array_equal(data.blocks[0][2, 1:], 0.0)
    with pytest.raises(DataError):
        SchemaConfig(continuous=["a"], categorical=["a"], response="y")
    with pytest.raises(DataError):
        SchemaConfig(continuous=["a"], categorical=[], response="a")


def test_heart_schema_split():
    df = heart_like_frame()
    assert df.shape == (918, 12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        data, _ = load_and_preprocess(df, HEART_SCHEMA)
    names = data.truths["_columns"]
    assert [n.split("=")[0] for n in names[0]][0] == "Age"
    assert {n.split("=")[0] for n in names[0]} == {"Age", "Sex", "ChestPainType", "RestingBP", "Cholesterol"}
    assert {n.split("=")[0] for n in names[1]} == {"FastingBS", "RestingECG", "MaxHR", "ExerciseAngina",
                                                    "Oldpeak", "ST_Slope"}


def test_csv_path_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    _frame().to_csv(path, index=False)
    schema = SchemaConfig(continuous=["a"], categorical=["c"], response="y")
    a, _ = load_and_preprocess(str(path), schema)
    b, _ = load_and_preprocess(_frame(), schema)
    np.testing.assert_array_equal(a.blocks[0], b.blocks[0])


def test_dataset_directory_round_trip(tmp_path):
    d, _ = generate(GeneratorSpec("poisson-multilevel", n=40, p=4, J=2))
    save_dataset(d, tmp_path / "ds", generator={"family": "poisson-multilevel"})
    e = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(e.y, d.y)
    np.testing.assert_array_equal(e.group, d.group)
    np.testing.assert_allclose(e.offset, d.offset, rtol=0, atol=0)
    for a, b in zip(d.blocks, e.blocks):
        np.testing.assert_array_equal(a, b)
    assert e.truths == d.truths
    with pytest.raises(DataError):
        load_dataset(tmp_path)
