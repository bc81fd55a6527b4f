import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace.optensor import (
    CoefficientTensor,
    LameModuli,
    TensorError,
    block,
    lame_distinguished_theta,
    lame_tensor,
    laplacian_tensor,
    lh_margin,
    same_operator,
    symbol,
    symbol_inverse,
    symmetrize,
    tensor_from_literal,
    tensor_to_literal,
    transpose_tensor,
)


def scalar(A):
    return CoefficientTensor.from_scalar_matrix(A)


class TestEllipticity:
    def test_identity_margin_is_one(self):
        assert lh_margin(laplacian_tensor(3)).lh_margin == pytest.approx(1.0, abs=1e-12)

    def test_indefinite_is_flagged(self):
        rep = lh_margin(scalar(np.diag([1.0, -1.0])))
        assert rep.lh_margin <= -1.0 + 1e-12
        assert not rep.elliptic

    @pytest.mark.parametrize("theta", [0.0, 0.5, 0.9, 1.0])
    def test_lame_margin(self, theta):
        rep = lh_margin(lame_tensor(LameModuli(1, 1), theta, 3))
        assert rep.lh_margin == pytest.approx(1.0, abs=0.05)

    def test_rejects_zero_samples(self):
        with pytest.raises(TensorError):
            lh_margin(laplacian_tensor(2), num_samples=0)

    def test_deterministic(self):
        A = lame_tensor(LameModuli(2, 1), 0.3, 3)
        assert lh_margin(A, seed=5).lh_margin == lh_margin(A, seed=5).lh_margin


class TestSymmetrizeAndTranspose:
    def test_symmetrize_splits_off_diagonal(self):
        S = symmetrize(scalar([[1.0, 1.0], [0.0, 1.0]]))
        assert S.scalar_matrix()[0, 1] == 0.5
        assert S.scalar_matrix()[1, 0] == 0.5

    def test_symmetric_fixed_point(self):
        A = scalar([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_array_equal(symmetrize(A).a, A.a)

    def test_same_operator_after_symmetrize(self):
        A = scalar([[1.0, 1.0], [0.0, 1.0]])
        assert same_operator(A, symmetrize(A))

    def test_antisymmetric_perturbation(self):
        A = scalar([[2.0, 0.5], [0.5, 1.0]])
        assert same_operator(A, scalar([[2.0, 3.5], [-2.5, 1.0]]))
        assert not same_operator(A, scalar([[2.0, 0.5], [0.5, 1.5]]))

    def test_lame_family_same_operator(self):
        m = LameModuli(1, 1)
        assert same_operator(lame_tensor(m, 0.0, 3), lame_tensor(m, 1.0, 3))

    def test_transpose_symmetric_scalar(self):
        A = scalar([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_array_equal(transpose_tensor(A).a, A.a)

    def test_transpose_involution(self):
        A = lame_tensor(LameModuli(1, 0.3), 0.2, 3)
        np.testing.assert_array_equal(transpose_tensor(transpose_tensor(A)).a, A.a)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            laplacian_tensor(2) + laplacian_tensor(3)


class TestSymbol:
    @given(st.floats(0, 2 * np.pi))
    def test_identity_symbol_minus_one(self, phi):
        xi = np.array([np.cos(phi), np.sin(phi)])
        assert symbol(laplacian_tensor(2), xi)[0, 0] == pytest.approx(-1.0)

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=2).filter(lambda v: np.hypot(*v) > 0.1))
    def test_homogeneity(self, xi):
        A = scalar([[2.0, 0.5], [0.5, 1.0]])
        xi = np.array(xi)
        np.testing.assert_allclose(symbol(A, 2 * xi), 4 * symbol(A, xi), rtol=1e-13)

    def test_lame_normal_symbol(self):
        m = LameModuli(1, 1)
        A = lame_tensor(m, lame_distinguished_theta(m), 3)
        e3 = np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(symbol(A, e3), -np.diag([1.0, 1.0, 3.0]), atol=1e-14)
        np.testing.assert_allclose(symbol_inverse(A, e3), -np.diag([1.0, 1.0, 1 / 3]), atol=1e-14)

    def test_identity_inverse(self):
        xi = np.array([0.6, 0.0, 0.8]) * 2
        assert symbol_inverse(laplacian_tensor(3), xi)[0, 0] == pytest.approx(-1 / 4)

    def test_zero_xi_rejected(self):
        with pytest.raises(TensorError):
            symbol_inverse(laplacian_tensor(2), [0.0, 0.0])


class TestLame:
    def test_entry(self):
        A = lame_tensor(LameModuli(1, 1), 0.0, 3)
        # alpha=1, beta=2, r=1, s=2 in 1-based indexing
        assert A.a[0, 1, 0, 1] == 2.0

    @pytest.mark.parametrize("mu, lam, expected", [(1, 1, 0.5), (1, -1, 0.0), (2, -1, 0.4)])
    def test_distinguished_theta(self, mu, lam, expected):
        assert lame_distinguished_theta(LameModuli(mu, lam)) == pytest.approx(expected)

    def test_normal_block(self):
        m = LameModuli(1, 1)
        A = lame_tensor(m, lame_distinguished_theta(m), 3)
        np.testing.assert_allclose(block(A, 2, 2), np.diag([1.0, 1.0, 3.0]))

    @pytest.mark.parametrize("mu, lam", [(0, 1), (-1, 0), (1, -2.5)])
    def test_invalid_moduli(self, mu, lam):
        with pytest.raises(TensorError):
            LameModuli(mu, lam)


class TestLiteral:
    def test_round_trip(self):
        A = lame_tensor(LameModuli(1, 0.5), 0.3, 3)
        np.testing.assert_array_equal(tensor_from_literal(tensor_to_literal(A)).a, A.a)

    def test_entries_form(self):
        lit = {"n": 2, "M": 1, "entries": [{"alpha": 1, "beta": 1, "r": 1, "s": 1, "re": 4},
                                           {"alpha": 1, "beta": 1, "r": 2, "s": 2, "re": 1, "im": 0.5}]}
        np.testing.assert_array_equal(tensor_from_literal(lit).scalar_matrix(), np.diag([4.0, 1 + 0.5j]))

    def test_shorthands(self):
        assert tensor_from_literal({"laplacian": {"n": 3}}).n == 3
        A = tensor_from_literal({"scalar_matrix": [[2, [0.5, 0.1]], [[0.5, 0.1], 1]]})
        assert A.scalar_matrix()[0, 1] == 0.5 + 0.1j
        L = tensor_from_literal({"lame": {"mu": 1, "lambda": 1, "theta": "distinguished"}})
        np.testing.assert_array_equal(L.a, lame_tensor(LameModuli(1, 1), 0.5, 3).a)

    @pytest.mark.parametrize(
        "lit",
        [
            {},
            {"n": 2, "M": 1},
            {"n": 2, "M": 1, "entries": 5},
            {"n": 2, "M": 1, "entries": [{"alpha": 1, "beta": 1, "r": 1}]},
            {"n": 2, "M": 1, "entries": [{"alpha": 1, "beta": 1, "r": 3, "s": 1}]},
            {"n": 2, "M": 1, "entries": [{"alpha": 1, "beta": 1, "r": 1, "s": 1, "bogus": 0}]},
            {"n": 2, "M": 1, "entries": [{"alpha": 1, "beta": 1, "r": 1, "s": 1, "re": "x"}]},
            {"lame": {"mu": 1}},
            {"lame": {"mu": 1, "lambda": 1, "extra": 2}},
            {"laplacian": {}},
            {"scalar_matrix": [[1, "a"]]},
        ],
    )
    def test_malformed(self, lit):
        with pytest.raises(TensorError):
            tensor_from_literal(lit)
