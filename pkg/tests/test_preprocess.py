import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtri

from gmmfad.model import DataMatrix
from gmmfad.preprocess import (
    EmptyCsv,
    NonNumericCell,
    RaggedRow,
    feature_tie_counts,
    gaussian_distributional_transform,
    load_csv,
)


# ------------------------------------------------------------------- load_csv


def test_plain_numeric_file(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("1,2\n3,4\n5,6\n")
    data = load_csv(f)
    np.testing.assert_array_equal(data.values, [[1, 2], [3, 4], [5, 6]])
    assert data.labels is None


def test_header_row_skipped(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("a,b\n1,2\n3,4\n")
    data = load_csv(f, has_header=True)
    np.testing.assert_array_equal(data.values, [[1, 2], [3, 4]])


def test_categorical_labels_first_appearance_order(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("M,1.5,2\nB,0.5,1\nM,2.5,3\n")
    data, mapping = load_csv(f, label_column=0, return_mapping=True)
    np.testing.assert_array_equal(data.labels, [0, 1, 0])
    assert mapping == {"M": 0, "B": 1}
    np.testing.assert_array_equal(data.values[:, 0], [1.5, 0.5, 2.5])


def test_label_column_by_name_needs_header(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("cls,x,y\nM,1,2\nB,3,4\n")
    data = load_csv(f, has_header=True, label_column="cls")
    np.testing.assert_array_equal(data.labels, [0, 1])
    f2 = tmp_path / "m2.csv"
    f2.write_text("M,1,2\nB,3,4\n")
    with pytest.raises(ValueError):
        load_csv(f2, label_column="cls")


def test_ragged_row_names_line(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("1,2\n3\n5,6\n")
    with pytest.raises(RaggedRow) as exc:
        load_csv(f)
    assert exc.value.line == 2
    assert "line 2" in str(exc.value)


def test_non_numeric_cell_names_line_and_column(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("1,2\n3,oops\n")
    with pytest.raises(NonNumericCell) as exc:
        load_csv(f)
    assert exc.value.line == 2
    assert exc.value.column == 2


def test_empty_file_rejected(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("")
    with pytest.raises(EmptyCsv):
        load_csv(f)


def test_blank_lines_skipped_but_line_numbers_preserved(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("1,2\n\n3,4\n\n5,x\n")
    with pytest.raises(NonNumericCell) as exc:
        load_csv(f)
    assert exc.value.line == 5


# ------------------------------------------------------------------------ GDT


def test_gdt_three_point_feature_by_hand():
    data = DataMatrix(values=np.array([[1.0], [2.0], [3.0]]))
    out = gaussian_distributional_transform(data)
    want = ndtri(np.array([1 / 6, 3 / 6, 5 / 6]))
    np.testing.assert_allclose(out.values[:, 0], want, atol=1e-12)
    assert out.values[1, 0] == pytest.approx(0.0, abs=1e-15)


def test_gdt_preserves_strict_order(rng):
    col = np.sort(rng.standard_normal(40))
    data = DataMatrix(values=col[:, None])
    out = gaussian_distributional_transform(data)
    assert np.all(np.diff(out.values[:, 0]) > 0)


def test_gdt_output_is_nearly_standard_normal(rng):
    n = 400
    raw = np.exp(rng.standard_normal((n, 3)) * 2.0)  # heavily skewed input
    out = gaussian_distributional_transform(DataMatrix(values=raw))
    for j in range(3):
        col = out.values[:, j]
        assert abs(col.mean()) < 0.1 / np.sqrt(n)
        assert abs(col.var() - 1.0) < 0.1


def test_gdt_handles_ties_by_average_rank():
    data = DataMatrix(values=np.array([[1.0], [1.0], [2.0], [3.0]]))
    out = gaussian_distributional_transform(data)
    # tied pair shares the average rank 1.5 -> u = 1/4
    np.testing.assert_allclose(out.values[0, 0], ndtri(0.25), atol=1e-12)
    assert out.values[0, 0] == out.values[1, 0]


def test_gdt_constant_feature_warns_and_zeroes():
    data = DataMatrix(values=np.column_stack([np.full(5, 3.0),
                                              np.arange(5.0)]))
    with pytest.warns(RuntimeWarning):
        out = gaussian_distributional_transform(data)
    np.testing.assert_array_equal(out.values[:, 0], np.zeros(5))
    assert np.all(np.isfinite(out.values))


def test_gdt_never_produces_infinities(rng):
    vals = rng.standard_normal((500, 2)) * 100
    out = gaussian_distributional_transform(DataMatrix(values=vals))
    assert np.all(np.isfinite(out.values))


@given(st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=60,
                unique=True))
def test_gdt_invariant_to_monotone_transforms(col):
    base = np.asarray(col, dtype=np.float64)[:, None]
    out_base = gaussian_distributional_transform(DataMatrix(values=base))
    # strictly monotone map: ranks unchanged, so output identical
    mapped = np.sign(base) * np.log1p(np.abs(base)) * 3.0 + 7.0
    out_mapped = gaussian_distributional_transform(DataMatrix(values=mapped))
    np.testing.assert_allclose(out_base.values, out_mapped.values, atol=1e-12)


def test_gdt_preserves_labels(rng):
    data = DataMatrix(values=rng.standard_normal((10, 2)),
                      labels=np.arange(10) % 2)
    out = gaussian_distributional_transform(data)
    np.testing.assert_array_equal(out.labels, data.labels)


def test_feature_tie_counts(rng):
    data = DataMatrix(values=np.array([[1.0, 5.0], [1.0, 6.0], [2.0, 7.0]]))
    counts = feature_tie_counts(data)
    assert counts[0] > 0
    assert counts[1] == 0
