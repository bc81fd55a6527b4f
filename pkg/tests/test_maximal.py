import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace.datum import make_datum
from halfspace.kernels import harmonic_system
from halfspace.maximal import (
    ConeSpec,
    EmptyConeError,
    hl_maximal,
    hl_maximal_grid,
    lp_norm,
    nearest_node,
    nt_trace,
    ntmax,
    ntmax_grid,
    sobolev_norm,
    wellposedness_report,
)
from halfspace.solver import BoundaryData, GridSpec, solve_dirichlet

H2 = harmonic_system(2)


def data(name, R, N, ell=0, **params):
    return BoundaryData.from_datum(make_datum(name, 1, 1, **params), GridSpec(2, R, N), ell)


def box_solution(x):
    """Harmonic extension of the indicator of ``[-1, 1]``."""
    y, t = x[:, 0], x[:, 1]
    return (np.arctan((1 - y) / t) + np.arctan((1 + y) / t)) / np.pi


@pytest.fixture(scope="module")
def gauss():
    return data("gaussian", 8.0, 513, ell=1, sigma=1.0)


@pytest.fixture(scope="module")
def cone(gauss):
    return ConeSpec.geometric(1.0, 0.25, 2.0, gauss.grid.spacing)


class TestConeSpec:
    def test_geometric_levels(self):
        c = ConeSpec.geometric(1.0, 0.5, 2.0, 0.1, ratio=2.0)
        assert c.t_levels == (0.5, 1.0, 2.0)

    @given(st.floats(0.2, 3.0), st.floats(-2, 2))
    @settings(max_examples=25, deadline=None)
    def test_samples_inside_cone(self, kappa, x):
        c = ConeSpec.geometric(kappa, 0.25, 1.0, 0.05)
        pts = c.sample([x])
        assert np.all(np.abs(pts[:, 0] - x) < kappa * pts[:, 1])

    def test_aperture_nesting(self):
        small = ConeSpec.geometric(0.5, 0.25, 1.0, 0.05).sample([0.0])
        big = {tuple(p) for p in ConeSpec.geometric(1.0, 0.25, 1.0, 0.05).sample([0.0])}
        assert all(tuple(p) in big for p in small)

    @pytest.mark.parametrize("kwargs", [dict(kappa=0.0), dict(spacing=-1.0), dict(t_levels=(0.0,))])
    def test_invalid(self, kwargs):
        args = dict(kappa=1.0, t_levels=(1.0,), spacing=0.1) | kwargs
        with pytest.raises(ValueError):
            ConeSpec(**args)

    def test_empty(self):
        with pytest.raises(EmptyConeError):
            ConeSpec(1.0, (), 0.1).sample([0.0])


class TestHardyLittlewood:
    def test_box_far_point(self):
        # M 1_[0,1](2) = 1/4; on the grid the best cube holds 128 of 513 cells
        f = data("box", 4.0, 1025, half_width=0.5, center=0.5)
        assert hl_maximal(f, [2.0]) == pytest.approx(128 / 513, rel=1e-12)
        assert abs(hl_maximal(f, [2.0]) - 0.25) < f.grid.spacing

    def test_constant(self):
        f = data("constant", 8.0, 257, amplitude=[-3.0])
        M = hl_maximal_grid(f.values, f.grid)
        assert M[128] == pytest.approx(3.0, rel=1e-14)

    def test_dominates_modulus(self, gauss):
        M = hl_maximal_grid(gauss.values, gauss.grid)
        assert np.all(M >= np.abs(gauss.values[:, 0]) - 1e-15)

    def test_nearest_node_outside(self, gauss):
        with pytest.raises(ValueError):
            nearest_node(gauss.grid, [9.0])


class TestNorms:
    def test_box_l2(self):
        f = data("box", 4.0, 1025, half_width=0.5, center=0.5)
        assert abs(lp_norm(f.values, f.grid, 2) - 1) < f.grid.spacing

    def test_gaussian_l2(self):
        # sigma = 1/sqrt(2): int exp(-2 y^2) = sqrt(pi/2)
        f = data("gaussian", 8.0, 1025, sigma=1 / np.sqrt(2))
        assert lp_norm(f.values, f.grid, 2) == pytest.approx((np.pi / 2) ** 0.25, rel=1e-12)

    def test_sobolev_order_zero(self, gauss):
        assert sobolev_norm(gauss, 2, 0) == lp_norm(gauss.values, gauss.grid, 2)

    def test_sobolev_adds_derivative(self, gauss):
        d1 = lp_norm(gauss.derivative((1,)), gauss.grid, 3)
        assert sobolev_norm(gauss, 3, 1) == pytest.approx(lp_norm(gauss.values, gauss.grid, 3) + d1)

    @pytest.mark.parametrize("p", [1.0, 0.5])
    def test_p_rejected(self, gauss, p):
        with pytest.raises(ValueError):
            lp_norm(gauss.values, gauss.grid, p)

    def test_sobolev_order_limit(self, gauss):
        with pytest.raises(ValueError):
            sobolev_norm(gauss, 2, 2)


class TestNontangential:
    def test_constant_field(self, cone):
        assert ntmax(lambda x: np.full(len(x), -2.5), cone, [0.3]) == 2.5

    def test_monotone_in_aperture(self):
        narrow = ConeSpec.geometric(0.5, 0.25, 2.0, 1 / 64)
        wide = ConeSpec.geometric(1.0, 0.25, 2.0, 1 / 64)
        for x in (0.0, 1.5, -3.0):
            assert ntmax(box_solution, narrow, [x]) <= ntmax(box_solution, wide, [x])

    def test_box_against_dense_sweep(self, cone):
        best = 0.0
        for t in np.linspace(0.25, 2.0, 2001):
            y = np.linspace(-t, t, 401)[1:-1]
            best = max(best, float(box_solution(np.c_[y, np.full_like(y, t)]).max()))
        assert abs(ntmax(box_solution, cone, [0.0]) - best) < 1e-3

    def test_grid_matches_pointwise(self, gauss, cone):
        nt = ntmax_grid(H2, gauss, cone, 1)
        for x in (0.0, 1.0, -2.0):
            direct = ntmax(lambda p: solve_dirichlet(H2, gauss, p).values, cone, [x])
            assert nt[0][nearest_node(gauss.grid, [x])] == pytest.approx(direct, abs=1e-13)

    def test_grid_requires_matching_spacing(self, gauss):
        with pytest.raises(ValueError):
            ntmax_grid(H2, gauss, ConeSpec.geometric(1.0, 0.25, 2.0, 0.1))


class TestTrace:
    def test_constant_exact(self, cone):
        tr = nt_trace(lambda x: np.full((len(x), 1), 2.0), cone, [0.0])
        assert tr.value[0] == 2.0 and tr.converged

    def test_heaviside_jump_flagged(self, cone):
        tr = nt_trace(lambda x: 0.5 + np.arctan(x[:, 0] / x[:, 1]) / np.pi, cone, [0.0])
        assert tr.value[0] == pytest.approx(0.5, abs=1e-12)
        assert not tr.converged

    def test_smooth_converges(self):
        # levels stay at least 16 grid cells above the boundary
        f = data("gaussian", 8.0, 8193, sigma=1.0)
        low = ConeSpec.geometric(1.0, 1 / 32, 1 / 8, f.grid.spacing)
        tr = nt_trace(lambda p: solve_dirichlet(H2, f, p).values, low, [0.5])
        assert tr.converged
        assert abs(tr.value[0] - np.exp(-0.125)) < 1e-3

    def test_levels_checked(self, cone):
        with pytest.raises(ValueError):
            nt_trace(lambda x: np.ones(len(x)), cone, [0.0], levels=[1.0])


class TestReport:
    def test_scale_invariance(self, gauss, cone):
        a = wellposedness_report(H2, gauss, 2.0, 1, cone)
        scaled = data("gaussian", 8.0, 513, ell=1, sigma=1.0, amplitude=[3.5])
        b = wellposedness_report(H2, scaled, 2.0, 1, cone)
        assert b.empirical_C == pytest.approx(a.empirical_C, rel=1e-12)

    def test_json_and_csv(self, gauss, cone):
        r = wellposedness_report(H2, gauss, 2.0, 0, cone)
        js = r.to_json()
        assert set(js) == {"p", "ell", "kappa", "values", "datum_norm", "empirical_C", "grid"}
        assert r.to_csv().split("\n")[0] == "x1,N_grad0"

    def test_order_limit(self, gauss, cone):
        with pytest.raises(ValueError):
            wellposedness_report(H2, gauss, 2.0, 2, cone)
