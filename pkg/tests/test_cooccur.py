import numpy as np
import pytest

from geln.cooccur import (
    RAW,
    ROW_STOCHASTIC,
    CooccurrenceCounts,
    CorrelationMatrix,
    build_conditional_matrix,
    canonical_mode,
    correlation_from_dataset,
    count_cooccurrence,
    load_cm_csv,
    normalize_matrix,
    save_cm_csv,
)
from geln.dataset import Dataset, LabelSchema

from conftest import make_case
from oracles import conditional_matrix


def _yes(schema, cat):
    return schema.index(cat, "yes")


def test_abc_counts(abc_dataset):
    s = abc_dataset.schema
    M = count_cooccurrence(abc_dataset).M
    A, B, C = (_yes(s, c) for c in "ABC")
    assert (M[A, A], M[B, B], M[C, C]) == (3, 2, 1)
    assert (M[A, B], M[A, C], M[B, C]) == (2, 1, 1)
    np.testing.assert_array_equal(M, M.T)


def test_abc_conditional(abc_dataset):
    s = abc_dataset.schema
    CM = correlation_from_dataset(abc_dataset).CM
    A, B, C = (_yes(s, c) for c in "ABC")
    assert CM[A, B] == pytest.approx(2 / 3, abs=1e-15)
    assert CM[B, A] == 1.0
    assert CM[A, C] == pytest.approx(1 / 3, abs=1e-15)
    assert CM[B, C] == 0.5
    assert CM[A, A] == CM[B, B] == CM[C, C] == 1.0


def test_zero_occurrence_row_is_zero(abc_dataset):
    # "A/no" never occurs in the toy set
    s = abc_dataset.schema
    CM = correlation_from_dataset(abc_dataset).CM
    row = s.index("A", "no")
    assert np.all(CM[row] == 0.0)
    assert CM[row, row] == 0.0


def test_single_case_and_single_class():
    schema = LabelSchema.from_pairs([("k", ["a", "b", "c"])])
    ds = Dataset(schema, [make_case("x", "train", {"k": "b"})], {"clinical": 3, "dermoscopy": 2})
    counts = count_cooccurrence(ds)
    np.testing.assert_array_equal(np.diag(counts.M), [0, 1, 0])
    assert counts.M.sum() == 1
    single = CooccurrenceCounts(np.array([[4]]), 4)
    np.testing.assert_array_equal(build_conditional_matrix(single).CM, [[1.0]])


def test_test_split_ignored_and_empty_rejected(abc_dataset):
    extra = make_case("t0", "test", {"A": "no", "B": "no", "C": "no"})
    with_test = abc_dataset.with_cases(list(abc_dataset.cases) + [extra])
    assert count_cooccurrence(with_test) == count_cooccurrence(abc_dataset)
    only_test = abc_dataset.with_cases([extra])
    with pytest.raises(ValueError, match="empty"):
        count_cooccurrence(only_test)


def test_duplicating_cases_doubles_counts(abc_dataset):
    dup = [make_case(c.id + "b", c.split, c.labels) for c in abc_dataset.cases]
    doubled = abc_dataset.with_cases(list(abc_dataset.cases) + dup)
    np.testing.assert_array_equal(count_cooccurrence(doubled).M, 2 * count_cooccurrence(abc_dataset).M)
    np.testing.assert_array_equal(correlation_from_dataset(doubled).CM, correlation_from_dataset(abc_dataset).CM)


def _random_dataset(rng, n_cases=None, max_cats=5, max_classes=None):
    n_cats = int(rng.integers(2, max_cats + 1))
    sizes = rng.integers(2, 4, size=n_cats)
    schema = LabelSchema.from_pairs([(f"k{i}", [f"v{j}" for j in range(sz)]) for i, sz in enumerate(sizes)])
    n = int(rng.integers(1, 51)) if n_cases is None else n_cases
    cases = []
    for c in range(n):
        labels = {name: classes[int(rng.integers(len(classes)))] for name, classes in schema.categories}
        cases.append(make_case(f"r{c}", str(rng.choice(["train", "val"])), labels, rng=rng))
    return Dataset(schema, cases, {"clinical": 3, "dermoscopy": 2})


def _label_sets(ds):
    return [[ds.schema.index(cat, c.labels[cat]) for cat in ds.schema.names] for c in ds.cases]


@pytest.mark.parametrize("seed", range(10))
def test_matches_counting_oracle(seed):
    ds = _random_dataset(np.random.default_rng(seed))
    expected, occ, co = conditional_matrix(_label_sets(ds), ds.schema.n_classes)
    counts = count_cooccurrence(ds)
    np.testing.assert_array_equal(counts.M, np.array(co))
    np.testing.assert_allclose(build_conditional_matrix(counts).CM, expected, rtol=0, atol=1e-12)


def test_invariants_hold(small_synth):
    counts = count_cooccurrence(small_synth)
    M, s = counts.M, small_synth.schema
    assert np.all(M <= np.minimum.outer(np.diag(M), np.diag(M)))
    assert np.all(np.diag(M) <= counts.n_cases)
    cm = build_conditional_matrix(counts).CM
    assert cm.min() >= 0 and cm.max() <= 1
    for block in s.blocks:
        sub = cm[block, block]
        assert np.all(sub[~np.eye(sub.shape[0], dtype=bool)] == 0)
    seen = np.diag(M) > 0
    np.testing.assert_allclose(cm[seen] * np.diag(M)[seen, None], M[seen], rtol=1e-15)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    ds = _random_dataset(rng, n_cases=40)
    shuffled = ds.with_cases([ds.cases[i] for i in rng.permutation(len(ds))])
    assert count_cooccurrence(shuffled) == count_cooccurrence(ds)
    np.testing.assert_array_equal(correlation_from_dataset(shuffled).CM, correlation_from_dataset(ds).CM)


def test_row_stochastic_example():
    counts = CooccurrenceCounts(np.zeros((3, 3), dtype=np.int64), 0)
    raw = CorrelationMatrix(np.array([[1.0, 2 / 3, 1 / 3], [0, 0, 0], [0, 0, 1.0]]), RAW, counts)
    out = normalize_matrix(raw, "row-stochastic")
    assert out.mode == ROW_STOCHASTIC
    np.testing.assert_allclose(out.CM[0], [0.5, 1 / 3, 1 / 6], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(out.CM[1], 0.0)
    ident = CorrelationMatrix(np.eye(3), RAW, counts)
    np.testing.assert_array_equal(normalize_matrix(ident, ROW_STOCHASTIC).CM, np.eye(3))
    assert normalize_matrix(ident, "raw") is ident


def test_row_stochastic_rows_sum_to_one(small_synth):
    cm = correlation_from_dataset(small_synth, "row_stochastic").CM
    sums = cm.sum(axis=1)
    nz = sums > 0
    np.testing.assert_allclose(sums[nz], 1.0, atol=1e-12)


def test_mode_errors():
    with pytest.raises(ValueError, match="unknown"):
        canonical_mode("softmax")
    counts = CooccurrenceCounts(np.eye(2, dtype=np.int64), 1)
    stoch = CorrelationMatrix(np.eye(2), ROW_STOCHASTIC, counts)
    with pytest.raises(ValueError):
        normalize_matrix(stoch, RAW)


def test_csv_round_trip(tmp_path, small_synth):
    cm = correlation_from_dataset(small_synth).CM
    keys = small_synth.schema.class_keys
    path = save_cm_csv(cm, keys, tmp_path / "cm.csv")
    header = path.read_text().splitlines()[0]
    assert header.split(",")[1] == "Diag/BCC"
    back, back_keys = load_cm_csv(path)
    assert back_keys == list(keys)
    np.testing.assert_array_equal(back, cm)
