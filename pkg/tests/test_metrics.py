import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from robustvi.families import VariationalParams, packed_from_chol
from robustvi.metrics import (
    load_reference_moments, moment_distance, params_distance, save_reference_moments,
    variational_moments,
)

vec = arrays(float, 3, elements=st.floats(-100, 100, allow_nan=False))


def sym(a):
    return a + a.T


def test_examples():
    I = np.eye(2)
    d = moment_distance(np.zeros(2), I, np.zeros(2), I)
    assert (d.d_mu, d.d_sigma, d.d) == (0.0, 0.0, 0.0)
    d = moment_distance(np.array([3.0, 4.0]), I, np.zeros(2), I)
    assert d.d_mu == 5.0 and d.d == 5.0
    d = moment_distance(np.zeros(2), 2 * I, np.zeros(2), I)
    assert d.d_sigma == pytest.approx(1.1892, abs=1e-4)


def test_variational_moment_examples():
    mean, cov = variational_moments(VariationalParams.standard("full_rank", 3))
    np.testing.assert_array_equal(mean, np.zeros(3))
    np.testing.assert_allclose(cov, np.eye(3))
    mf = VariationalParams("mean_field", np.zeros(2), np.log([2.0, 3.0]))
    np.testing.assert_allclose(variational_moments(mf)[1], np.diag([4.0, 9.0]))
    fr = VariationalParams("full_rank", np.zeros(2), packed_from_chol(np.array([[1.0, 0], [1, 1]])))
    np.testing.assert_allclose(variational_moments(fr)[1], [[1, 1], [1, 2]])


@given(vec, vec, arrays(float, (3, 3), elements=st.floats(-10, 10)), arrays(float, (3, 3), elements=st.floats(-10, 10)))
def test_symmetry(m1, m2, a, b):
    d1 = moment_distance(m1, sym(a), m2, sym(b))
    d2 = moment_distance(m2, sym(b), m1, sym(a))
    assert d1.d_mu == d2.d_mu and d1.d_sigma == pytest.approx(d2.d_sigma, rel=1e-12)
    assert d1.d == pytest.approx(np.hypot(d1.d_mu, d1.d_sigma))


@given(vec, vec, vec)
def test_triangle_inequality_for_means(a, b, c):
    S = np.eye(3)
    ab = moment_distance(a, S, b, S).d_mu
    bc = moment_distance(b, S, c, S).d_mu
    ac = moment_distance(a, S, c, S).d_mu
    assert ac <= ab + bc + 1e-9


quarters = st.integers(-40, 40).map(lambda v: v / 4)


@given(arrays(float, (3, 3), elements=quarters), arrays(float, (3, 3), elements=quarters))
def test_sigma_distance_zero_iff_equal(a, b):
    d = moment_distance(np.zeros(3), sym(a), np.zeros(3), sym(b)).d_sigma
    assert (d == 0.0) == np.array_equal(sym(a), sym(b))


def test_errors():
    with pytest.raises(ValueError):
        moment_distance(np.zeros(2), np.eye(3), np.zeros(2), np.eye(3))
    with pytest.raises(ValueError):
        moment_distance(np.zeros(2), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), np.eye(2))


def test_params_distance():
    q = VariationalParams.standard("full_rank", 2)
    d = params_distance(q, (np.array([3.0, 4.0]), np.eye(2)))
    assert d.d_mu == 5.0 and d.d_sigma == 0.0


def test_reference_file_roundtrip(tmp_path):
    path = tmp_path / "ref.json"
    save_reference_moments(path, [1.0, 2.0], [[1.0, 0.5], [0.5, 2.0]])
    mean, cov = load_reference_moments(path, dim=2)
    np.testing.assert_array_equal(mean, [1, 2])
    np.testing.assert_array_equal(cov, [[1, 0.5], [0.5, 2]])
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"mean": [0, 0], "covariance": [1, 0, 0, 1]}))
    np.testing.assert_array_equal(load_reference_moments(flat)[1], np.eye(2))
    with pytest.raises(ValueError, match="dimension"):
        load_reference_moments(path, dim=3)
    bad = tmp_path / "bad.json"
    bad.write_text('{"mean": [0, 0],\n "covariance": [1, 0, 0]}')
    with pytest.raises(ValueError, match="3 entries"):
        load_reference_moments(bad)
    broken = tmp_path / "broken.json"
    broken.write_text('{"mean": [0,\n 0\n')
    with pytest.raises(ValueError, match="broken.json:"):
        load_reference_moments(broken)
