import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace.kernels import (
    ANALYTIC_GRADIENT,
    LINEAR_SOLVE,
    BranchCutError,
    export_kernel_csv,
    harmonic_poisson,
    harmonic_system,
    kernel_integral,
    lame_k,
    lame_poisson,
    lame_system,
    match_lame,
    q_family,
    scalar_fundamental,
    scalar_grad_fundamental,
    scalar_poisson,
    scalar_system,
    sphere_area,
    system_for_tensor,
)
from halfspace.optensor import LameModuli, TensorError, lame_tensor, laplacian_tensor

LAME11 = LameModuli(1, 1)


def assert_rel_close(a, b, tol):
    """Entrywise gap relative to the largest entry of ``b``."""
    assert np.max(np.abs(a - b)) <= tol * np.max(np.abs(b))


points2 = st.lists(st.floats(-50, 50), min_size=2, max_size=2).map(np.array)


@pytest.mark.parametrize("m, expected", [(1, 2 * np.pi), (2, 4 * np.pi), (3, 2 * np.pi**2)])
def test_sphere_area(m, expected):
    assert sphere_area(m) == pytest.approx(expected, rel=1e-15)


class TestHarmonic:
    @pytest.mark.parametrize("n, expected", [(2, 1 / np.pi), (3, 1 / (2 * np.pi))])
    def test_value_at_origin(self, n, expected):
        assert harmonic_poisson(n)(np.zeros(n - 1))[0, 0] == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("n", [2, 3])
    def test_unit_integral(self, n):
        integral, _ = kernel_integral(harmonic_poisson(n))
        assert abs(integral[0, 0] - 1) < 1e-6

    def test_extension_value(self):
        K = harmonic_poisson(2).extend()
        assert K(np.array([0.0, 2.0]))[0, 0] == pytest.approx(1 / (2 * np.pi), rel=1e-15)

    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
    def test_dilation_preserves_integral(self, t):
        P = harmonic_poisson(2)
        from halfspace.kernels import MatrixKernel

        Pt = MatrixKernel(2, 1, lambda xp: P.dilate(np.full(xp.shape[:-1], t), xp))
        assert kernel_integral(Pt)[0][0, 0] == pytest.approx(1.0, abs=1e-8)

    @given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 5))
    def test_extension_homogeneity(self, lam, x, t):
        K = harmonic_poisson(2).extend()
        p = np.array([x, t])
        np.testing.assert_allclose(K(lam * p), lam ** (-1) * K(p), rtol=1e-12)

    def test_dilate_rejects_nonpositive_t(self):
        with pytest.raises(ValueError):
            harmonic_poisson(2).dilate(0.0, [0.0])


class TestScalar:
    @given(points2.map(lambda v: v[:1]))
    def test_identity_reduces_to_harmonic(self, xp):
        assert scalar_poisson(np.eye(2))(xp)[0, 0] == pytest.approx(harmonic_poisson(2)(xp)[0, 0], rel=1e-14)

    def test_diag_value(self):
        assert scalar_poisson(np.diag([4.0, 1.0]))(np.zeros(1))[0, 0].real == pytest.approx(1 / (2 * np.pi), rel=1e-14)

    def test_integral_nondiagonal(self):
        integral, _ = kernel_integral(scalar_poisson([[2.0, 0.5], [0.5, 1.0]]))
        assert abs(integral[0, 0] - 1) < 1e-6

    def test_fundamental_values(self):
        E3 = scalar_fundamental(np.eye(3))
        assert E3(np.array([0.0, 0.6, 0.8]))[0, 0].real == pytest.approx(-1 / (4 * np.pi), rel=1e-14)
        E2 = scalar_fundamental(np.eye(2))
        assert abs(E2(np.array([0.6, 0.8]))[0, 0]) < 1e-15

    @pytest.mark.parametrize("A", [np.eye(3), [[2, 0.5, 0], [0.5, 1, 0.2], [0, 0.2, 1.5]], np.diag([1, 2 + 0.5j, 1])])
    def test_gradient_matches_differences(self, A):
        E = scalar_fundamental(A)
        rng = np.random.default_rng(3)
        for x in rng.uniform(-2, 2, (20, 3)):
            if np.linalg.norm(x) < 0.3:
                continue
            h = 1e-5 * (1 + np.linalg.norm(x))
            fd = np.array([(E(x + h * e) - E(x - h * e))[0, 0] / (2 * h) for e in np.eye(3)])
            g = scalar_grad_fundamental(A, x)
            assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-7

    def test_branch_cut(self):
        with pytest.raises(BranchCutError):
            scalar_poisson(np.diag([-1.0, 1.0]))(np.array([[2.0]]))


class TestLame:
    def test_values_at_origin(self):
        P = lame_poisson(LAME11, 3)(np.zeros(2))
        assert P[2, 2].real == pytest.approx(1 / np.pi, rel=1e-14)
        assert P[0, 0].real == pytest.approx(1 / (4 * np.pi), rel=1e-14)
        assert P[0, 2] == 0

    @given(points2)
    def test_lambda_minus_mu_is_harmonic(self, xp):
        P = lame_poisson(LameModuli(1, -1), 3)(xp)
        np.testing.assert_allclose(P, harmonic_poisson(3)(xp)[0, 0] * np.eye(3), rtol=1e-13, atol=1e-300)

    def test_k_values(self):
        k = lame_k(LAME11, 3, [0.0, 0.0, 1.0])
        assert k[2, 2] == pytest.approx(1 / (2 * np.pi), rel=1e-14)
        assert k[0, 0] == pytest.approx(1 / (8 * np.pi), rel=1e-14)

    @given(points2)
    def test_p_equals_2k(self, xp):
        P = lame_poisson(LAME11, 3)(xp)
        assert_rel_close(P, 2 * lame_k(LAME11, 3, np.append(xp, 1.0)), 1e-13)

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1))
    def test_k_even_homogeneous(self, x):
        x = np.array(x)
        k = lame_k(LAME11, 3, x)
        assert_rel_close(lame_k(LAME11, 3, -x), k, 1e-14)
        assert_rel_close(lame_k(LAME11, 3, 2 * x), k / 8, 1e-13)

    @pytest.mark.parametrize("mod", [LameModuli(1, 1), LameModuli(1, 0), LameModuli(1, -0.5)])
    def test_unit_integral(self, mod):
        integral, _ = kernel_integral(lame_poisson(mod, 3))
        assert np.max(np.abs(integral - np.eye(3))) < 1e-6

    def test_k_origin_rejected(self):
        with pytest.raises(ValueError):
            lame_k(LAME11, 3, np.zeros(3))


class TestQFamily:
    @given(points2)
    @settings(deadline=None)
    def test_identity_both_routes(self, xp):
        system = harmonic_system(3)
        analytic = system.Q.eval_all(xp)
        solved = q_family(laplacian_tensor(3), system.P).eval_all(xp)
        expected = np.append(xp, 1.0)[:, None, None] * system.P(xp)[None] / 2
        np.testing.assert_allclose(analytic, expected, rtol=1e-13, atol=1e-300)
        np.testing.assert_allclose(solved, expected, rtol=1e-13, atol=1e-300)

    def test_provenance(self):
        assert harmonic_system(2).Q.provenance == ANALYTIC_GRADIENT
        sys = lame_system(LAME11, 3)
        assert sys.Q.provenance == LINEAR_SOLVE
        assert sys.Q.solve_residual < 1e-8

    def test_lame_reconstruction_of_normal_kernel(self):
        sys = lame_system(LAME11, 3)
        A = sys.tensor
        xp = np.random.default_rng(4).uniform(-3, 3, (50, 2))
        Q = sys.Q.eval_all(xp)
        Ann_inv = np.linalg.inv(A.a[:, :, 2, 2])
        recon = 0.5 * sys.P(xp) @ Ann_inv - sum(Q[s] @ A.a[:, :, s, 2] @ Ann_inv for s in range(2))
        assert np.max(np.abs(recon - Q[2])) < 1e-8

    def test_decay_constant_stable(self):
        Q = lame_system(LAME11, 3).Q
        dirs = np.array([[1.0, 0.0], [0.6, 0.8], [-0.28, 0.96]])
        ratios = []
        for r in np.logspace(0, 3, 7):
            vals = np.linalg.norm(Q.eval_all(r * dirs), axis=(-2, -1)).max(axis=0)
            ratios.append(np.max(vals) * (1 + r) ** 2)
        assert max(ratios) / min(ratios) < 3

    def test_non_distinguished_rejected(self):
        with pytest.raises(TensorError, match="unsatisfiable"):
            q_family(lame_tensor(LAME11, 1.0, 3), lame_poisson(LAME11, 3))


class TestSystems:
    def test_dispatch(self):
        assert system_for_tensor(laplacian_tensor(2)).name == "laplacian(n=2)"
        assert system_for_tensor(lame_tensor(LameModuli(2, 1), 0.9, 3)).lame == LameModuli(2, 1)

    def test_match_lame(self):
        assert match_lame(lame_tensor(LameModuli(1, 0.5), 0.2, 3)) == LameModuli(1, 0.5)
        assert match_lame(laplacian_tensor(2)) is None

    def test_csv_export(self):
        text = export_kernel_csv(harmonic_poisson(2), [[0.0], [1.0]])
        lines = text.strip().split("\n")
        assert lines[0] == "x1,alpha,beta,re,im"
        assert float(lines[1].split(",")[3]) == 1 / math.pi
        assert lines[2].split(",")[3] == f"{1 / (2 * math.pi):.17g}"
