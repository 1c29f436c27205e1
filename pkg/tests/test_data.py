import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpmf.data import (
    MetricsRecord,
    RatingsMatrix,
    load_model,
    load_ratings,
    save_model,
    save_ratings_mm,
    split_train_test,
    synthetic_ratings,
    write_metrics_json,
    write_metrics_text,
)
from bpmf.errors import DataFormatError
from bpmf.rng import Side, StreamKey, stream_for


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


GOOD_MM = """%%MatrixMarket matrix coordinate real general
% a comment
3 2 3
1 1 2.5
2 2 -1.0
3 1 4
"""


def test_matrixmarket_round_trip(tmp_path):
    r = load_ratings(_write(tmp_path, "r.mm", GOOD_MM))
    assert (r.n_users, r.n_movies, r.nnz) == (3, 2, 3)
    users, movies, values = r.triplets()
    path = str(tmp_path / "w.mm")
    save_ratings_mm(path, r.n_users, r.n_movies, users, movies, values)
    again = load_ratings(path)
    assert np.array_equal(np.c_[again.triplets()], np.c_[r.triplets()])


@pytest.mark.parametrize(
    "text",
    [
        "%%MatrixMarket matrix array real general\n3 2\n1\n2\n3\n4\n5\n6\n",  # not coordinate
        "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n",  # bad field
        "%%MatrixMarket matrix coordinate real symmetric\n1 1 1\n1 1 1\n",  # bad symmetry
        "not a matrixmarket file\n1 1 1\n",  # wrong banner, wrong triplet shape
        "%%MatrixMarket matrix coordinate real general\n3 2\n1 1 1\n",  # short size line
        "%%MatrixMarket matrix coordinate real general\n3 2 2\n1 1 1\n",  # count mismatch
        "%%MatrixMarket matrix coordinate real general\n3 2 1\n0 1 1\n",  # 1-based floor
        "%%MatrixMarket matrix coordinate real general\n3 2 1\n4 1 1\n",  # row out of range
        "%%MatrixMarket matrix coordinate real general\n3 2 1\n1 3 1\n",  # col out of range
        "%%MatrixMarket matrix coordinate real general\n3 2 1\n1.5 1 1\n",  # fractional index
        "%%MatrixMarket matrix coordinate real general\n3 2 2\n1 1 1\n1 1 2\n",  # duplicate
        "%%MatrixMarket matrix coordinate real general\n3 2 1\n1 1 nan\n",  # non-finite
    ],
)
def test_matrixmarket_rejects_bad_input(tmp_path, text):
    with pytest.raises(DataFormatError):
        load_ratings(_write(tmp_path, "bad.mm", text))


def test_csv_basic_and_header(tmp_path):
    r = load_ratings(_write(tmp_path, "r.csv", "user,movie,rating\n0,1,2.5\n2,0,1.0\n"))
    assert (r.n_users, r.n_movies, r.nnz) == (3, 2, 2)
    bare = load_ratings(_write(tmp_path, "b.csv", "0,1,2.5\n2,0,1.0\n"))
    assert np.array_equal(np.c_[bare.triplets()], np.c_[r.triplets()])


def test_csv_extra_columns_ignored(tmp_path):
    r = load_ratings(_write(tmp_path, "r.csv", "0,0,3.0,946824059\n1,1,4.0,946824090\n"))
    assert r.nnz == 2 and r.triplets()[2][1] == 4.0


@pytest.mark.parametrize(
    "text",
    [
        "0,1\n",  # too few columns
        "0,1,x\n",  # unparseable value
        "-1,0,3.0\n",  # negative index
        "0.5,0,3.0\n",  # fractional index
        "0,0,1.0\n0,0,2.0\n",  # duplicate
        "",  # nothing at all
    ],
)
def test_csv_rejects_bad_input(tmp_path, text):
    with pytest.raises(DataFormatError):
        load_ratings(_write(tmp_path, "bad.csv", text))


def test_ratings_matrix_validation():
    with pytest.raises(DataFormatError):
        RatingsMatrix(2, 2, [0, 0], [0, 0], [1.0, 2.0])  # duplicate
    with pytest.raises(DataFormatError):
        RatingsMatrix(2, 2, [0], [2], [1.0])  # column out of range
    with pytest.raises(DataFormatError):
        RatingsMatrix(2, 2, [0], [0], [np.inf])
    with pytest.raises(DataFormatError):
        RatingsMatrix(2, 2, [0, 1], [0], [1.0])  # ragged triplets


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_dual_orientation_consistent(key):
    gen = np.random.Generator(np.random.Philox(key=key))
    m, n = int(gen.integers(1, 12)), int(gen.integers(1, 12))
    mask = gen.random((m, n)) < 0.4
    users, movies = np.nonzero(mask)
    values = gen.standard_normal(users.size)
    r = RatingsMatrix(m, n, users, movies, values)
    from_users = {
        (u, int(mv), float(val))
        for u in range(m)
        for mv, val in zip(*r.user_slice(u))
    }
    from_movies = {
        (int(us), mv, float(val))
        for mv in range(n)
        for us, val in zip(*r.movie_slice(mv))
    }
    expected = set(zip(users.tolist(), movies.tolist(), values.tolist()))
    assert from_users == expected == from_movies
    assert r.user_counts().sum() == r.nnz == r.movie_counts().sum()


def test_split_counts_and_disjointness():
    gen = stream_for(StreamKey(1, 3, Side.NOISE, 0))
    users, movies, values, _, _ = synthetic_ratings(40, 30, 2, 0.3, 0.1, gen)
    split_gen = stream_for(StreamKey(1, 2, Side.NOISE, 0))
    (tr_u, tr_m, tr_v), (te_u, te_m, te_v) = split_train_test(
        users, movies, values, 0.2, split_gen
    )
    n = users.size
    assert te_u.size == int(round(0.2 * n))
    assert tr_u.size + te_u.size == n
    all_pairs = set(zip(users.tolist(), movies.tolist()))
    train_pairs = set(zip(tr_u.tolist(), tr_m.tolist()))
    test_pairs = set(zip(te_u.tolist(), te_m.tolist()))
    assert train_pairs | test_pairs == all_pairs
    assert not (train_pairs & test_pairs)


def test_split_is_deterministic():
    gen = stream_for(StreamKey(9, 3, Side.NOISE, 0))
    users, movies, values, _, _ = synthetic_ratings(20, 20, 2, 0.3, 0.1, gen)
    first = split_train_test(users, movies, values, 0.25,
                             stream_for(StreamKey(9, 2, Side.NOISE, 0)))
    second = split_train_test(users, movies, values, 0.25,
                              stream_for(StreamKey(9, 2, Side.NOISE, 0)))
    for a, b in zip(first, second):
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_train_test(np.zeros(1, int), np.zeros(1, int), np.zeros(1), 1.0,
                         stream_for(StreamKey(0, 2, Side.NOISE, 0)))


def test_synthetic_statistics():
    gen = stream_for(StreamKey(3, 3, Side.NOISE, 0))
    users, movies, values, u_true, v_true = synthetic_ratings(300, 200, 8, 0.2, 0.1, gen)
    assert u_true.shape == (300, 8) and v_true.shape == (200, 8)
    # observed cells ~ Binomial(300*200, 0.2)
    assert abs(users.size - 12_000) < 5 * np.sqrt(60_000 * 0.2 * 0.8)
    resid = values - np.einsum("ij,ij->i", u_true[users], v_true[movies])
    assert abs(resid.std() - 0.1) < 0.01
    # dot products have roughly unit variance by the factor scaling
    assert 0.7 < values.std() < 1.4


def test_model_round_trip(tmp_path):
    gen = np.random.Generator(np.random.Philox(key=2))
    u = gen.standard_normal((7, 3))
    v = gen.standard_normal((5, 3))
    prefix = str(tmp_path / "model")
    save_model(prefix, u, v, meta={"k": 3, "seed": 1, "iterations": 10})
    u2, v2, meta = load_model(prefix)
    assert np.array_equal(u, u2) and np.array_equal(v, v2)
    assert meta["k"] == 3 and meta["iterations"] == 10


def test_metrics_text_is_exact_and_reparsable(tmp_path):
    records = [
        MetricsRecord(0, 1.5, 1.5, wall_seconds=0.123, updates_per_second=10.0),
        MetricsRecord(1, 1.0 / 3.0, 0.2999999999999999),
    ]
    path = str(tmp_path / "m.txt")
    write_metrics_text(path, records)
    lines = open(path).read().splitlines()
    assert lines[0] == "iter=0 rmse_sample=1.5 rmse_avg=1.5"
    assert lines[1] == f"iter=1 rmse_sample={1.0 / 3.0!r} rmse_avg={0.2999999999999999!r}"
    # repr round-trips doubles exactly
    assert float(lines[1].split("rmse_sample=")[1].split()[0]) == 1.0 / 3.0


def test_metrics_json_carries_timings(tmp_path):
    records = [MetricsRecord(0, 1.0, 1.0, wall_seconds=0.5, comm_seconds=0.1)]
    path = str(tmp_path / "m.json")
    write_metrics_json(path, records, config={"k": 8})
    blob = json.load(open(path))
    assert blob["config"]["k"] == 8
    assert blob["records"][0]["comm_seconds"] == 0.1
    assert blob["records"][0]["iteration"] == 0
