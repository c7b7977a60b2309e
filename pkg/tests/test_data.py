import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cace_ipw.data import (
    ColumnSchema,
    DataError,
    Dataset,
    from_rows,
    load_dataset,
    save_dataset,
    validate,
)
from util import make_dataset

BASIC = ColumnSchema(cluster="cluster", treat="treat", receipt="receipt", outcome="y")


def _load(text: str, schema: ColumnSchema = BASIC) -> Dataset:
    return load_dataset(io.StringIO(text), schema)


def test_minimal_file_loads():
    d = _load("cluster,treat,receipt,y\na,1,1,2.0\na,1,0,1.0\nb,0,0,0.5\nb,0,1,1.5\n")
    assert d.m == 2 and d.n == 4
    assert d.m_t == 1 and d.m_c == 1
    assert d.cluster_ids == ("a", "b")
    assert list(d.treat) == [1, 1, 0, 0]


def test_mixed_treatment_cluster_is_rejected():
    text = "cluster,treat,receipt,y\nA,1,1,2.0\nA,0,0,1.0\nB,0,0,0.5\n"
    with pytest.raises(DataError, match="mixed treatment in cluster A"):
        _load(text)


def test_missing_column_names_the_column():
    with pytest.raises(DataError, match="missing column 'receipt'"):
        _load("cluster,treat,y\na,1,2.0\n")


def test_malformed_number_names_row_and_column():
    text = "cluster,treat,receipt,y\na,1,1,2.0\na,1,0,oops\nb,0,0,0.5\n"
    with pytest.raises(DataError) as err:
        _load(text)
    assert "oops" in str(err.value)
    assert err.value.row == 2
    assert err.value.column == "y"


def test_non_binary_receipt_names_row_and_column():
    text = "cluster,treat,receipt,y\na,1,2,1.0\nb,0,0,0.5\n"
    with pytest.raises(DataError) as err:
        _load(text)
    assert err.value.column == "receipt"
    assert err.value.row == 1


def test_empty_input_and_header_only():
    with pytest.raises(DataError, match="header row is mandatory"):
        _load("")
    with pytest.raises(DataError, match="no data rows"):
        _load("cluster,treat,receipt,y\n")


def test_ragged_row_is_rejected():
    text = "cluster,treat,receipt,y\na,1,1,2.0\na,1,0\nb,0,0,0.5\n"
    with pytest.raises(DataError):
        _load(text)


def test_round_trip_is_bit_for_bit(tmp_path):
    awkward = [0.1 + 0.2, -0.0, 1e-17, 123456789.123456789, -2.5e300, float(np.nextafter(1.0, 2.0))]
    d = make_dataset(
        ["a"] * 3 + ["b"] * 3,
        [1, 1, 1, 0, 0, 0],
        [1, 0, 1, 0, 1, 0],
        awkward,
        {"x1": awkward[::-1]},
        wls=("x1",),
    )
    schema = ColumnSchema(cluster="cluster", treat="treat", receipt="receipt", outcome="y",
                          covariates_wls=("x1",))
    path = tmp_path / "rt.csv"
    save_dataset(d, str(path), schema)
    d2 = load_dataset(str(path), schema)
    assert d2.outcome.tobytes() == d.outcome.tobytes()
    assert d2.covariates["x1"].tobytes() == d.covariates["x1"].tobytes()
    assert d2.cluster_ids == d.cluster_ids
    # a second save of the reloaded data reproduces the same bytes
    buf1, buf2 = io.StringIO(), io.StringIO()
    save_dataset(d, buf1, schema)
    save_dataset(d2, buf2, schema)
    assert buf1.getvalue() == buf2.getvalue()


def test_from_rows_groups_by_first_appearance():
    d = from_rows(
        ["b", "a", "b", "a"],
        [0, 1, 0, 1],
        [1, 0, 0, 1],
        [1.0, 2.0, 3.0, 4.0],
        {},
    )
    assert d.cluster_ids == ("b", "a")
    assert list(d.outcome) == [1.0, 3.0, 2.0, 4.0]
    assert list(d.treat) == [0, 0, 1, 1]


def test_from_rows_length_mismatch():
    with pytest.raises(DataError, match="column length mismatch"):
        from_rows(["a", "b"], [1, 0], [1], [1.0, 2.0], {})


@given(
    st.lists(st.sampled_from("abcd"), min_size=4, max_size=24).filter(
        lambda ids: len(set(ids)) >= 2
    ),
    st.randoms(use_true_random=False),
)
def test_cluster_starts_partition_rows(ids, rnd):
    # give every cluster label a fixed arm so the build is always legal,
    # and make sure both arms appear
    arm_of = {label: (0 if label in "ab" else 1) for label in "abcd"}
    if len({arm_of[i] for i in ids}) < 2:
        ids = ids + (["a"] if arm_of[ids[0]] == 1 else ["c"])
    n = len(ids)
    d = from_rows(
        ids,
        [arm_of[i] for i in ids],
        [rnd.randint(0, 1) for _ in range(n)],
        [rnd.uniform(-2, 2) for _ in range(n)],
        {},
    )
    starts = d.cluster_starts
    assert starts[0] == 0 and starts[-1] == d.n == n
    assert (np.diff(starts) > 0).all()
    # row_cluster covers every row exactly once with contiguous labels
    rc = d.row_cluster
    for k in range(d.m):
        seg = rc[starts[k]:starts[k + 1]]
        assert (seg == k).all()
    # first-appearance order is preserved
    seen = []
    for i in ids:
        if i not in seen:
            seen.append(i)
    assert d.cluster_ids == tuple(seen)


def test_validate_reports_rates_and_counts(trial_m30):
    rep = validate(trial_m30)
    assert rep.n_clusters_t + rep.n_clusters_c == trial_m30.m
    t_rows = trial_m30.treat == 1
    assert rep.receipt_rate_t == pytest.approx(float(trial_m30.receipt[t_rows].mean()), abs=1e-15)
    assert rep.receipt_rate_c == pytest.approx(float(trial_m30.receipt[~t_rows].mean()), abs=1e-15)
    assert rep.warnings == ()


def test_validate_flags_degenerate_receipt():
    d = make_dataset(
        ["a", "a", "b", "b", "c", "c"],
        [1, 1, 1, 1, 0, 0],
        [1, 0, 0, 1, 1, 1],
        [0.1] * 6,
    )
    rep = validate(d)
    assert any("degenerate receipt in control group" in w for w in rep.warnings)
    assert not any("treatment group" in w for w in rep.warnings)


def test_validate_flags_single_cluster_arms():
    d = make_dataset(["a", "a", "b", "b"], [1, 1, 0, 0], [1, 0, 0, 1], [0.0, 1.0, 2.0, 3.0])
    rep = validate(d)
    assert any("fewer than 2 treatment clusters" in w for w in rep.warnings)
    assert any("fewer than 2 control clusters" in w for w in rep.warnings)


def test_validate_is_pure(trial_tiny):
    before = trial_tiny.outcome.copy()
    rep1 = validate(trial_tiny)
    rep2 = validate(trial_tiny)
    assert rep1 == rep2
    assert np.array_equal(trial_tiny.outcome, before)


def test_arrays_are_frozen(trial_tiny):
    with pytest.raises(ValueError):
        trial_tiny.outcome[0] = 99.0
    with pytest.raises(ValueError):
        trial_tiny.treat[0] = 0


def test_large_two_arm_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    n_t, n_c = 854, 756
    cluster = [f"t{j:02d}" for j in range(15) for _ in range(n_t // 15)]
    cluster += ["t14"] * (n_t - len(cluster))
    ctrl = [f"c{j:02d}" for j in range(15) for _ in range(n_c // 15)]
    ctrl += ["c14"] * (n_c - len(ctrl))
    cluster += ctrl
    treat = [1] * n_t + [0] * n_c
    receipt = (rng.random(n_t + n_c) < 0.6).astype(int).tolist()
    y = rng.normal(size=n_t + n_c).tolist()
    d = make_dataset(cluster, treat, receipt, y)
    assert (d.n_t, d.n_c) == (854, 756)
    assert d.m == 30
    path = tmp_path / "big.csv"
    save_dataset(d, str(path), BASIC)
    d2 = load_dataset(str(path), BASIC)
    assert d2.n_t == 854 and d2.n_c == 756
    assert d2.outcome.tobytes() == d.outcome.tobytes()


def test_matrix_stacks_named_covariates(trial_m30):
    x = trial_m30.matrix(("x1", "x2"))
    assert x.shape == (trial_m30.n, 2)
    assert np.array_equal(x[:, 0], trial_m30.covariates["x1"])
    with pytest.raises(DataError, match="unknown covariate"):
        trial_m30.matrix(("nope",))


def test_declared_covariate_must_exist():
    with pytest.raises(DataError, match="declared covariates not present"):
        make_dataset(["a", "a", "b", "b"], [1, 1, 0, 0], [1, 0, 0, 1], [0.0] * 4, wls=("ghost",))


def test_save_dataset_appends_extra_columns(tmp_path):
    d = make_dataset(["a", "a", "b", "b"], [1, 1, 0, 0], [1, 0, 0, 1], [1.0, 2.0, 3.0, 4.0])
    path = tmp_path / "w.csv"
    save_dataset(d, str(path), BASIC, extra_columns={"weight": np.array([0.5, 1.0, 1.0, 0.25])})
    lines = path.read_text().splitlines()
    assert lines[0] == "cluster,treat,receipt,y,weight"
    assert lines[1].endswith("0.5")
