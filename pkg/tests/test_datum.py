import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace.datum import (
    Box,
    Constant,
    DatumError,
    Gaussian,
    Heaviside,
    Lorentzian,
    MollifiedBox,
    PolyGaussian,
    make_datum,
    parse_datum_spec,
)

SMOOTH = [Gaussian(0.7, 0.3), PolyGaussian(2, 1.2, -0.5), MollifiedBox(1.0, 0.3, 0.2), Lorentzian(0.8, 0.1)]


@pytest.mark.parametrize("profile", SMOOTH, ids=lambda p: type(p).__name__)
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_derivatives_match_differences(profile, k):
    y = np.linspace(-3, 3, 41)
    h = 1e-4
    fd = (profile(y + h, k - 1) - profile(y - h, k - 1)) / (2 * h)
    scale = max(1.0, np.max(np.abs(fd)))
    assert np.max(np.abs(fd - profile(y, k))) < 1e-6 * scale


def test_gaussian_closed_form():
    g = Gaussian(1.0, 0.0)
    y = np.array([0.0, 1.0, -2.0])
    np.testing.assert_allclose(g(y), np.exp(-y**2 / 2), rtol=1e-15)
    np.testing.assert_allclose(g(y, 1), -y * np.exp(-y**2 / 2), rtol=1e-14)


@pytest.mark.parametrize("profile, exact", [(Gaussian(1.0), np.sqrt(2 * np.pi)), (Lorentzian(2.0), np.inf),
                                            (MollifiedBox(1.0, 0.25), 2.0), (Box(1.5), 3.0)])
def test_l1(profile, exact):
    if np.isinf(exact):
        assert np.isinf(profile.l1(0))
    else:
        assert profile.l1(0) == pytest.approx(exact, rel=1e-8)


@given(st.floats(0.5, 10.0))
@settings(max_examples=20, deadline=None)
def test_tail_bounds_dominate(R):
    g = Gaussian(1.0, 0.5)
    y = np.linspace(R, R + 30, 3001)
    assert g.tail_sup(R, 0) >= np.max(np.abs(g(y))) * (1 - 1e-12)
    assert g.tail_sup(R, 0) >= np.max(np.abs(g(-y))) * (1 - 1e-12)


def test_indicators_have_no_derivatives():
    for p in (Heaviside(), Box()):
        with pytest.raises(DatumError):
            p(np.zeros(1), 1)
    assert Heaviside()(np.array([0.0]))[0] == 0.5
    assert Box(1.0)(np.array([1.0]))[0] == 0.5


def test_constant_tails():
    c = Constant(2.0)
    assert c.tail_sup(100.0, 0) == 2.0
    assert np.isinf(c.tail_l1(100.0, 0))
    assert c.tail_l1(100.0, 1) == 0


class TestCatalog:
    @pytest.mark.parametrize("name", ["gaussian", "poly_gaussian", "mollified_box", "lorentzian", "two_bumps", "constant"])
    @pytest.mark.parametrize("dim", [1, 2])
    def test_shapes(self, name, dim):
        d = make_datum(name, dim, 3)
        y = np.zeros((5, dim))
        assert d(y).shape == (5, 3)

    def test_default_amplitude(self):
        d = make_datum("gaussian", 1, 3)
        np.testing.assert_allclose(d(np.zeros((1, 1)))[0], [1.0, -0.5, 1 / 3])

    def test_separable_derivative(self):
        d = make_datum("gaussian", 2, 1, sigma=1.0, center=[0.5, -0.5])
        y = np.array([[0.2, 0.7]])
        h = 1e-5
        fd = (d(y + [0, h], (1, 0)) - d(y - [0, h], (1, 0))) / (2 * h)
        assert abs(fd - d(y, (1, 1)))[0, 0] < 1e-8

    def test_two_bumps(self):
        d = make_datum("two_bumps", 1, 1)
        assert d(np.array([[-1.0]]))[0, 0].real == pytest.approx(1.0, abs=1e-3)
        assert d(np.array([[1.5]]))[0, 0].real == pytest.approx(-0.5, abs=1e-3)

    def test_order_limit(self):
        d = make_datum("gaussian", 1, 1)
        with pytest.raises(DatumError):
            d(np.zeros((1, 1)), (5,))

    @pytest.mark.parametrize("args", [("nope",), ("gaussian",)])
    def test_errors(self, args):
        with pytest.raises(DatumError):
            if args[0] == "nope":
                make_datum("nope", 1, 1)
            else:
                make_datum("gaussian", 1, 1, bogus=1)

    def test_amplitude_shape(self):
        with pytest.raises(DatumError):
            make_datum("gaussian", 1, 2, amplitude=[1.0])


class TestSpecParsing:
    @pytest.mark.parametrize(
        "text, expected",
        [
            ("gaussian", ("gaussian", {})),
            ("gaussian(sigma=1)", ("gaussian", {"sigma": 1})),
            ("mollified_box(half_width=2.0, eps=0.1, center=[1, 2])", ("mollified_box", {"half_width": 2.0, "eps": 0.1, "center": [1, 2]})),
        ],
    )
    def test_parse(self, text, expected):
        assert parse_datum_spec(text) == expected

    @pytest.mark.parametrize("text", ["gaussian(1)", "gaussian(sigma=x)", "3abc", "gaussian(sigma=)"])
    def test_malformed(self, text):
        with pytest.raises(DatumError):
            parse_datum_spec(text)
