"""Boundary data catalog with analytic tangential derivatives.

Every catalog datum is a finite sum of separable terms
``amplitude * prod_i g_i(y_i)``, where each ``g_i`` is a one-dimensional
profile that knows its derivatives and crude tail bounds.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite
from scipy.integrate import quad
from scipy.special import erf

MAX_ORDER = 4


class DatumError(ValueError):
    pass


# offsets past the truncation radius at which tail sups are sampled
_TAIL_OFFSETS = np.concatenate([np.linspace(0.0, 20.0, 2001), np.logspace(np.log10(20.0), 7, 300)])


class Profile:
    """One-dimensional profile ``g`` with derivatives ``g^(k)``."""

    max_order = MAX_ORDER
    scale = 1.0

    def __call__(self, y, k: int = 0) -> np.ndarray:
        if k > self.max_order:
            raise DatumError(f"{self!r} has derivatives up to order {self.max_order} only")
        return self._eval(np.asarray(y, dtype=float), k)

    def _eval(self, y, k):
        raise NotImplementedError

    def sup(self, k: int) -> float:
        return self.tail_sup(-np.inf, k)

    def l1(self, k: int) -> float:
        return self.tail_l1(-np.inf, k)

    def tail_sup(self, R: float, k: int) -> float:
        """Sampled ``sup_{|y| >= R} |g^(k)(y)|``."""
        if R == -np.inf:
            y = self.center + np.concatenate([-_TAIL_OFFSETS[::-1], _TAIL_OFFSETS]) * self.scale
        else:
            y = np.concatenate([R + _TAIL_OFFSETS * self.scale, -R - _TAIL_OFFSETS * self.scale])
        return float(np.max(np.abs(self(y, k))))

    def tail_l1(self, R: float, k: int) -> float:
        f = lambda y: abs(float(self(np.array(y), k)))
        if R == -np.inf:
            c, w = self.center, 8 * self.scale
            return sum(
                quad(f, lo, hi, limit=200)[0]
                for lo, hi in [(-np.inf, c - w), (c - w, c + w), (c + w, np.inf)]
            )
        return quad(f, R, np.inf, limit=200)[0] + quad(f, -np.inf, -R, limit=200)[0]


@dataclass(frozen=True)
class Gaussian(Profile):
    sigma: float = 1.0
    center: float = 0.0

    @property
    def scale(self):
        return self.sigma

    def _eval(self, y, k):
        c = self.sigma * math.sqrt(2)
        z = (y - self.center) / c
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        return (-1 / c) ** k * hermite.hermval(z, coef) * np.exp(-(z**2))


@dataclass(frozen=True)
class PolyGaussian(Profile):
    """``(y - center)^power * exp(-(y - center)^2 / (2 sigma^2))``."""

    power: int = 1
    sigma: float = 1.0
    center: float = 0.0

    @property
    def scale(self):
        return self.sigma

    def _eval(self, y, k):
        u = y - self.center
        g = Gaussian(self.sigma, self.center)
        out = np.zeros_like(u)
        for j in range(min(k, self.power) + 1):
            dpoly = math.perm(self.power, j) * u ** (self.power - j)
            out = out + math.comb(k, j) * dpoly * g(y, k - j)
        return out


@dataclass(frozen=True)
class MollifiedBox(Profile):
    """Indicator of ``[center - half_width, center + half_width]`` convolved with a Gaussian of width ``eps``."""

    half_width: float = 1.0
    eps: float = 0.25
    center: float = 0.0

    @property
    def scale(self):
        return self.eps

    def _eval(self, y, k):
        u = y - self.center
        c = self.eps * math.sqrt(2)
        if k == 0:
            return 0.5 * (erf((u + self.half_width) / c) - erf((u - self.half_width) / c))
        pdf = Gaussian(self.eps, 0.0)
        norm = 1 / (self.eps * math.sqrt(2 * math.pi))
        return norm * (pdf(u + self.half_width, k - 1) - pdf(u - self.half_width, k - 1))


@dataclass(frozen=True)
class Lorentzian(Profile):
    """``1 / (1 + ((y - center) / width)^2)``."""

    width: float = 1.0
    center: float = 0.0

    @property
    def scale(self):
        return self.width

    def _eval(self, y, k):
        u = y - self.center
        b = self.width
        val = (b / 2j) * (-1) ** k * math.factorial(k) * ((u - 1j * b) ** (-k - 1) - (u + 1j * b) ** (-k - 1))
        return val.real

    def tail_l1(self, R, k):
        if k == 0:
            return np.inf
        return super().tail_l1(R, k)


@dataclass(frozen=True)
class Constant(Profile):
    value: float = 1.0
    center: float = 0.0

    def _eval(self, y, k):
        return np.full_like(y, self.value if k == 0 else 0.0)

    def tail_sup(self, R, k):
        return abs(self.value) if k == 0 else 0.0

    def tail_l1(self, R, k):
        return np.inf if (k == 0 and self.value != 0) else 0.0


@dataclass(frozen=True)
class Heaviside(Profile):
    """``1_{(center, inf)}`` with the midpoint value 1/2 at the jump; no derivatives."""

    center: float = 0.0
    max_order = 0

    def _eval(self, y, k):
        return np.where(y > self.center, 1.0, np.where(y == self.center, 0.5, 0.0))

    def tail_sup(self, R, k):
        return 1.0

    def tail_l1(self, R, k):
        return np.inf


@dataclass(frozen=True)
class Box(Profile):
    """``1_{[center - half_width, center + half_width]}`` with value 1/2 at the endpoints; no derivatives."""

    half_width: float = 1.0
    center: float = 0.0
    max_order = 0

    def _eval(self, y, k):
        d = np.abs(y - self.center)
        return np.where(d < self.half_width, 1.0, np.where(d == self.half_width, 0.5, 0.0))

    def tail_sup(self, R, k):
        return 1.0 if R <= abs(self.center) + self.half_width else 0.0

    def tail_l1(self, R, k):
        lo, hi = self.center - self.half_width, self.center + self.half_width
        if R < 0:
            return hi - lo
        return max(0.0, hi - max(lo, R)) + max(0.0, min(hi, -R) - lo)


@dataclass(frozen=True)
class SeparableTerm:
    profiles: tuple
    amplitude: tuple

    def __call__(self, y: np.ndarray, gamma: tuple) -> np.ndarray:
        v = np.ones(y.shape[:-1])
        for i, (g, k) in enumerate(zip(self.profiles, gamma)):
            v = v * g(y[..., i], k)
        return v[..., None] * np.asarray(self.amplitude, dtype=complex)


def _prod(vals):
    out = 1.0
    for v in vals:
        if v == 0:
            return 0.0
        out *= v
    return out


@dataclass(frozen=True)
class Datum:
    """Finite sum of separable terms on R^{dim} with ``M`` components."""

    terms: tuple
    name: str = "datum"

    @property
    def dim(self) -> int:
        return len(self.terms[0].profiles)

    @property
    def M(self) -> int:
        return len(self.terms[0].amplitude)

    @property
    def max_order(self) -> int:
        return min(g.max_order for t in self.terms for g in t.profiles)

    @property
    def scale(self) -> float:
        return min(g.scale for t in self.terms for g in t.profiles)

    def __call__(self, y, gamma=None) -> np.ndarray:
        """``d^gamma f(y)`` for points of shape ``(..., dim)``; returns ``(..., M)``."""
        y = np.asarray(y, dtype=float)
        gamma = tuple(gamma) if gamma is not None else (0,) * self.dim
        if sum(gamma) > self.max_order:
            raise DatumError(f"{self.name}: derivatives of order {sum(gamma)} are not available")
        return sum(t(y, gamma) for t in self.terms)

    def tail_sup(self, R: float, gamma) -> float:
        """Bound for ``sup |d^gamma f|`` outside the box ``[-R, R]^dim``."""
        return _cached_tail(self, R, tuple(gamma), "sup")

    def tail_l1(self, R: float, gamma) -> float:
        """Bound for ``int |d^gamma f|`` outside the box ``[-R, R]^dim``."""
        return _cached_tail(self, R, tuple(gamma), "l1")


@lru_cache(maxsize=4096)
def _cached_tail(datum: Datum, R: float, gamma: tuple, kind: str) -> float:
    total = 0.0
    for t in datum.terms:
        amp = float(np.linalg.norm(t.amplitude))
        if amp == 0:
            continue
        parts = []
        for i, (g, k) in enumerate(zip(t.profiles, gamma)):
            others = [
                (h.sup(kk) if kind == "sup" else h.l1(kk))
                for j, (h, kk) in enumerate(zip(t.profiles, gamma))
                if j != i
            ]
            own = g.tail_sup(R, k) if kind == "sup" else g.tail_l1(R, k)
            parts.append(_prod([own] + others))
        total += amp * (max(parts) if kind == "sup" else sum(parts))
    return total


# -- catalog ---------------------------------------------------------------

_PROFILES = {
    "gaussian": Gaussian,
    "poly_gaussian": PolyGaussian,
    "mollified_box": MollifiedBox,
    "lorentzian": Lorentzian,
    "constant": Constant,
    "heaviside": Heaviside,
    "box": Box,
}


def _amplitude(amplitude, M: int) -> tuple:
    if amplitude is None:
        amp = np.zeros(M)
        amp[0] = 1.0
        if M > 1:
            amp[:] = [1.0 / (i + 1) * (-1) ** i for i in range(M)]
        return tuple(complex(a) for a in amp)
    amp = np.atleast_1d(np.asarray(amplitude, dtype=complex))
    if amp.shape != (M,):
        raise DatumError(f"amplitude must have {M} components, got {amp.shape}")
    return tuple(complex(a) for a in amp)


def make_datum(name: str, dim: int, M: int, amplitude=None, **params) -> Datum:
    """Catalog datum: profile ``name`` in the first axis, matching factors in the others.

    Profiles in the other axes are Gaussians of the same width for compactly
    concentrated profiles, and copies of the profile otherwise.  A ``center``
    parameter may be a scalar (applied to the first axis) or a list.
    """
    if name == "two_bumps":
        a = make_datum("gaussian", dim, M, amplitude, sigma=params.get("sigma", 0.6), center=params.get("c1", -1.0))
        amp2 = tuple(-0.5 * np.asarray(a.terms[0].amplitude))
        b = make_datum("gaussian", dim, M, amp2, sigma=params.get("sigma", 0.6), center=params.get("c2", 1.5))
        return Datum(a.terms + b.terms, name="two_bumps")
    if name not in _PROFILES:
        raise DatumError(f"unknown catalog datum '{name}' (known: {sorted(list(_PROFILES) + ['two_bumps'])})")
    cls = _PROFILES[name]
    centers = params.pop("center", 0.0)
    centers = list(np.atleast_1d(centers).astype(float))
    if len(centers) == 1:
        centers = centers + [0.0] * (dim - 1)
    if len(centers) != dim:
        raise DatumError(f"center must have 1 or {dim} entries")
    try:
        profiles = [cls(center=centers[0], **params)]
    except TypeError as exc:
        raise DatumError(f"bad parameters for '{name}': {exc}") from None
    for i in range(1, dim):
        if name in ("constant", "heaviside", "lorentzian"):
            prof = Constant(1.0) if name != "lorentzian" else cls(center=centers[i], **params)
        elif name == "box":
            prof = cls(center=centers[i], **params)
        else:
            width = getattr(profiles[0], "sigma", None) or getattr(profiles[0], "half_width", 1.0)
            prof = Gaussian(width, centers[i])
        profiles.append(prof)
    return Datum((SeparableTerm(tuple(profiles), _amplitude(amplitude, M)),), name=name)


_SPEC_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def parse_datum_spec(spec: str) -> tuple[str, dict]:
    """Parse ``"gaussian(sigma=1, center=0.5)"`` into ``("gaussian", {...})``."""
    m = _SPEC_RE.match(spec)
    if not m:
        raise DatumError(f"malformed datum spec {spec!r}")
    name, args = m.group(1), m.group(2)
    params = {}
    if args and args.strip():
        try:
            call = ast.parse(f"f({args})", mode="eval").body
        except SyntaxError:
            raise DatumError(f"malformed datum arguments in {spec!r}") from None
        if call.args:
            raise DatumError("datum parameters must be given as key=value")
        for kw in call.keywords:
            try:
                params[kw.arg] = ast.literal_eval(kw.value)
            except ValueError:
                raise DatumError(f"non-literal value for '{kw.arg}' in {spec!r}") from None
    return name, params
