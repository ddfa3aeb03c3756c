import numpy as np
import pytest

from contractmpc.validation import (
    as_float_matrix,
    as_float_vector,
    check_in_range,
    check_nonnegative_matrix,
    check_positive_int,
    check_spd,
)


def test_vector_coercion():
    v = as_float_vector([1, 2, 3], "v")
    assert v.dtype == np.float64
    assert v.shape == (3,)


def test_vector_size_and_shape_errors():
    with pytest.raises(ValueError, match="v must have 2 entries"):
        as_float_vector([1.0, 2.0, 3.0], "v", size=2)
    with pytest.raises(ValueError, match="1-D"):
        as_float_vector([[1.0]], "v")
    with pytest.raises(ValueError, match="non-finite"):
        as_float_vector([1.0, np.nan], "v")


def test_matrix_coercion_and_errors():
    a = as_float_matrix([[1, 2], [3, 4]], "a")
    assert a.shape == (2, 2)
    with pytest.raises(ValueError, match="shape"):
        as_float_matrix(a, "a", shape=(3, 2))
    with pytest.raises(ValueError, match="2-D"):
        as_float_matrix([1.0, 2.0], "a")
    with pytest.raises(ValueError, match="non-finite"):
        as_float_matrix([[np.inf, 0.0], [0.0, 1.0]], "a")


def test_spd_accepts_and_symmetrizes():
    a = np.array([[2.0, 0.3 + 5e-10], [0.3, 1.0]])
    out = check_spd(a, "P")
    assert np.allclose(out, out.T)


def test_spd_rejections():
    with pytest.raises(ValueError, match="symmetric"):
        check_spd([[1.0, 0.5], [-0.5, 1.0]], "P")
    with pytest.raises(ValueError, match="positive definite"):
        check_spd([[1.0, 2.0], [2.0, 1.0]], "P")
    with pytest.raises(ValueError, match="square"):
        check_spd(np.ones((2, 3)), "P")


def test_nonnegative_matrix():
    check_nonnegative_matrix([[0.0, 1.0]], "L")
    with pytest.raises(ValueError, match="non-negative"):
        check_nonnegative_matrix([[0.0, -1e-12]], "L")


def test_in_range_bounds():
    assert check_in_range(0.5, "x", lo=0.0, hi=1.0) == 0.5
    assert check_in_range(0.0, "x", lo=0.0) == 0.0
    with pytest.raises(ValueError, match="> 0"):
        check_in_range(0.0, "x", lo=0.0, lo_open=True)
    with pytest.raises(ValueError, match="< 1"):
        check_in_range(1.0, "x", hi=1.0, hi_open=True)
    with pytest.raises(ValueError, match="finite"):
        check_in_range(np.inf, "x")


def test_positive_int():
    assert check_positive_int(3, "n") == 3
    assert check_positive_int(3.0, "n") == 3
    for bad in (0, -1, 2.5):
        with pytest.raises(ValueError):
            check_positive_int(bad, "n")
