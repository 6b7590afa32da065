import numpy as np
import pytest

from fbsvie_lab.errors import ResourceCapError, ValidationError
from fbsvie_lab.fields import TriangularField, check_memory


def test_below_diagonal_zeroed_on_construction():
    vals = np.ones((4, 4, 1))
    F = TriangularField(vals, 4)
    for t in range(4):
        for s in range(4):
            expect = 1.0 if s >= t else 0.0
            assert F.values[t, s, 0] == expect


def test_row_column_diag_consistency():
    rng = np.random.default_rng(1)
    F = TriangularField(rng.normal(size=(5, 5, 3)), 5)
    for t in range(5):
        row = F.row(t)
        assert row.shape == (5 - t, 3)
        for s in range(t, 5):
            assert np.array_equal(F.value(t, s), row[s - t])
    for s in range(5):
        col = F.column(s)
        assert col.shape == (s + 1, 3)
        for t in range(s + 1):
            assert np.array_equal(col[t], F.value(t, s))
    d = F.diag()
    assert d.shape == (5, 3)
    assert np.array_equal(d[2], F.value(2, 2))


def test_constant_rows_semantics():
    row = np.arange(4.0).reshape(1, 4, 1)
    F = TriangularField(row, 4)
    assert F.constant_rows
    # every row shares the same s-profile
    assert np.array_equal(F.row(2), row[0, 2:])
    assert np.array_equal(F.value(0, 3), F.value(3, 3))
    col = F.column(2)
    assert col.shape == (3, 1)
    assert np.all(col == 2.0)
    assert np.array_equal(F.diag()[:, 0], np.arange(4.0))


def test_read_below_diagonal_rejected():
    F = TriangularField.zeros(3)
    with pytest.raises(ValidationError):
        F.value(2, 1)


def test_shape_validation():
    with pytest.raises(ValidationError):
        TriangularField(np.zeros((3, 4, 1)), 4)  # bad t-axis
    with pytest.raises(ValidationError):
        TriangularField(np.zeros((4, 3, 1)), 4)  # bad s-axis
    with pytest.raises(ValidationError):
        TriangularField(np.zeros((4, 4)), 4)  # missing path axis


def test_mark_axis():
    F = TriangularField.zeros(3, n_paths=2, n_marks=5)
    assert F.with_marks and F.n_marks == 5 and F.n_paths == 2
    assert F.row(1).shape == (2, 5, 2)


def test_sub_scale_mixed_layouts():
    rng = np.random.default_rng(2)
    const = TriangularField(rng.normal(size=(1, 4, 1)), 4)
    full = TriangularField(rng.normal(size=(4, 4, 2)), 4)
    diff = full.sub(const)
    for t in range(4):
        for s in range(t, 4):
            want = full.value(t, s) - const.value(t, s)
            assert np.allclose(diff.value(t, s), want)
    doubled = const.scale(2.0)
    assert np.array_equal(doubled.values, 2.0 * const.values)


def test_memory_cap():
    check_memory(100, cap_mb=1.0)  # fine
    with pytest.raises(ResourceCapError):
        check_memory(10**9, cap_mb=1.0)
    with pytest.raises(ResourceCapError):
        TriangularField.zeros(2000, n_paths=1000, cap_mb=10.0)
    # no cap means no check
    TriangularField.zeros(10, n_paths=10, cap_mb=None)
