"""Cones, nontangential and Hardy-Littlewood maximal functions, and norms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import maximum_filter, maximum_filter1d

from .solver import (
    BoundaryData,
    GridConvolver,
    GridSpec,
    expand_derivative,
    multi_indices,
    resolve_system,
)


class EmptyConeError(ValueError):
    pass


@dataclass(frozen=True)
class ConeSpec:
    """Sampled cone ``{(x' + y', t) : |y'| < kappa t}``.

    At each level ``t`` the offsets are lattice points ``j * spacing`` strictly
    inside the ball of radius ``kappa t``, so samples for a smaller aperture are
    a subset of those for a larger one.
    """

    kappa: float
    t_levels: tuple
    spacing: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if any(t <= 0 for t in self.t_levels):
            raise ValueError("t levels must be positive")

    @classmethod
    def geometric(cls, kappa: float, t_min: float, t_max: float, spacing: float, ratio: float = 2**0.25) -> ConeSpec:
        if not (0 < t_min <= t_max) or ratio <= 1:
            raise ValueError("need 0 < t_min <= t_max and ratio > 1")
        count = int(math.floor(math.log(t_max / t_min) / math.log(ratio) + 1e-9)) + 1
        return cls(kappa, tuple(t_min * ratio**i for i in range(count)), spacing)

    @classmethod
    def for_grid(cls, grid: GridSpec, kappa: float = 1.0, ratio: float = 2**0.25) -> ConeSpec:
        """Levels from the grid spacing up to ``R/4``."""
        return cls.geometric(kappa, grid.spacing, grid.half_width / 4, grid.spacing, ratio)

    def offsets(self, t: float, dim: int) -> np.ndarray:
        m = int(math.ceil(self.kappa * t / self.spacing))
        j = np.arange(-m, m + 1)
        mesh = np.stack(np.meshgrid(*([j] * dim), indexing="ij"), axis=-1).reshape(-1, dim) * self.spacing
        return mesh[np.linalg.norm(mesh, axis=-1) < self.kappa * t]

    def angular_samples(self, t: float, dim: int) -> int:
        return len(self.offsets(t, dim))

    def sample(self, xprime) -> np.ndarray:
        """All cone points ``(y', t)`` over all levels, shape ``(K, n)``."""
        xp = np.atleast_1d(np.asarray(xprime, dtype=float))
        dim = xp.shape[0]
        pts = [
            np.concatenate([xp + off, np.full((len(off), 1), t)], axis=1)
            for t in self.t_levels
            for off in [self.offsets(t, dim)]
        ]
        if not pts:
            raise EmptyConeError("cone has no sample points")
        return np.concatenate(pts, axis=0)


def _modulus(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    return np.abs(v) if v.ndim == 1 else np.linalg.norm(v, axis=-1)


def ntmax(field_eval: Callable[[np.ndarray], np.ndarray], cone: ConeSpec, xprime) -> float:
    """Largest ``|u|`` over the cone sample at ``x'``.

    ``field_eval`` maps points of shape ``(K, n)`` to values ``(K, m)`` or ``(K,)``.
    """
    pts = cone.sample(xprime)
    if len(pts) == 0:
        raise EmptyConeError("cone has no sample points")
    return float(np.max(_modulus(field_eval(pts))))


@dataclass(frozen=True)
class TraceEstimate:
    value: np.ndarray
    last_value: np.ndarray
    oscillation: float
    converged: bool


def nt_trace(field_eval, cone: ConeSpec, xprime, levels=None, tol: float = 5e-2) -> TraceEstimate:
    """Boundary value of ``u`` at ``x'`` from decreasing cone levels.

    The estimate extrapolates the two lowest axis values linearly in ``t``.
    ``oscillation`` is the spread of ``u`` over the cone samples of the lowest
    three levels; above ``tol`` (relative to ``max(1, |value|)``) the estimate
    is flagged as not converged.
    """
    levels = sorted(cone.t_levels if levels is None else levels, reverse=True)
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    if any(b >= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly decreasing")
    xp = np.atleast_1d(np.asarray(xprime, dtype=float))
    axis_pts = np.array([np.concatenate([xp, [t]]) for t in levels[-2:]])
    v_prev, v_last = np.atleast_2d(np.asarray(field_eval(axis_pts)).reshape(2, -1))
    rho = levels[-2] / levels[-1]
    value = (rho * v_last - v_prev) / (rho - 1)
    low = ConeSpec(cone.kappa, tuple(levels[-3:]), cone.spacing)
    samples = np.asarray(field_eval(low.sample(xp))).reshape(len(low.sample(xp)), -1)
    spread = float(np.max(np.linalg.norm(samples[:, None, :] - samples[None, :, :], axis=-1))) if len(samples) > 1 else 0.0
    scale = max(1.0, float(np.linalg.norm(value)))
    return TraceEstimate(value, v_last, spread, spread <= tol * scale)


# -- Hardy-Littlewood -------------------------------------------------------------


def _box_sums(a: np.ndarray, m: int) -> np.ndarray:
    """Sum of ``a`` over the cube of ``2m+1`` cells per axis around each node (zero outside)."""
    out = a
    for axis in range(a.ndim):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        c = np.pad(np.cumsum(out, axis=axis), pad)
        idx = np.arange(n)
        hi = np.clip(idx + m + 1, 0, n)
        lo = np.clip(idx - m, 0, n)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def hl_maximal_grid(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Centered maximal function on the grid over cubes of ``2m+1`` cells, ``m in {0, 1, 2, 4, ...}``.

    Each node carries the cell of side ``h'`` around it; ``f`` vanishes off the grid.
    """
    a = np.asarray(values)
    if a.ndim == grid.dim + 1:
        a = np.linalg.norm(a, axis=-1)
    a = np.abs(a)
    best = a.copy()
    m = 1
    while m <= grid.points_per_axis:
        best = np.maximum(best, _box_sums(a, m) / (2 * m + 1) ** grid.dim)
        m *= 2
    return best


def hl_maximal(f, xprime) -> float:
    """Maximal function of boundary data ``f`` at the grid node nearest ``x'``."""
    grid = f.grid
    idx = nearest_node(grid, xprime)
    return float(hl_maximal_grid(f.values, grid)[idx])


def nearest_node(grid: GridSpec, xprime) -> tuple:
    xp = np.atleast_1d(np.asarray(xprime, dtype=float))
    i = np.rint((xp + grid.half_width) / grid.spacing).astype(int)
    if np.any(i < 0) or np.any(i >= grid.points_per_axis):
        raise ValueError("point outside the grid")
    return tuple(i)


# -- norms ---------------------------------------------------------------------------


def lp_norm(g_grid: np.ndarray, grid: GridSpec, p: float, mask=None) -> float:
    """Trapezoidal ``(int |g|^p)^{1/p}``; vector values use the Euclidean modulus."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    a = np.asarray(g_grid)
    if a.ndim == grid.dim + 1:
        a = np.linalg.norm(a, axis=-1)
    a = np.abs(a)
    w = grid.weights
    if mask is not None:
        a, w = a[mask], w[mask]
    if math.isinf(p):
        return float(np.max(a))
    return float(np.sum(w * a**p) ** (1 / p))


def sobolev_norm(f: BoundaryData, p: float, ell: int) -> float:
    """``sum_{|gamma| <= ell} ||d^gamma f||_p``."""
    if ell > f.ell:
        raise ValueError(f"data carry derivatives to order {f.ell} only")
    return sum(
        lp_norm(f.derivative(g), f.grid, p) for k in range(ell + 1) for g in multi_indices(f.grid.dim, k)
    )


# -- grid-wide nontangential maximal functions -----------------------------------------


def _disk_max(a: np.ndarray, radius_cells: float) -> np.ndarray:
    """Max of ``a`` over lattice offsets ``|j| < radius_cells`` (zero outside the array)."""
    m = int(math.ceil(radius_cells))
    if a.ndim == 1:
        return maximum_filter1d(a, 2 * m - 1, mode="constant", cval=0.0)
    if a.ndim == 2:
        out = np.zeros_like(a)
        for dy in range(-m, m + 1):
            rem = radius_cells**2 - dy * dy
            if rem <= 0:
                continue
            half = int(math.ceil(math.sqrt(rem))) - 1
            row = maximum_filter1d(a, 2 * half + 1, axis=1, mode="constant", cval=0.0)
            shifted = np.zeros_like(a)
            if dy >= 0:
                shifted[: a.shape[0] - dy] = row[dy:]
            else:
                shifted[-dy:] = row[: a.shape[0] + dy]
            out = np.maximum(out, shifted)
        return out
    j = np.arange(-m, m + 1)
    mesh = np.stack(np.meshgrid(*([j] * a.ndim), indexing="ij"), axis=-1)
    foot = np.linalg.norm(mesh, axis=-1) < radius_cells
    return maximum_filter(a, footprint=foot, mode="constant", cval=0.0)


def gradient_moduli(conv: GridConvolver, t: float, expansions: dict) -> dict:
    """``|nabla^k u|(., t)`` on the grid for each order ``k`` in ``expansions``.

    ``expansions[k]`` lists ``(weight, TermExpansion)`` pairs; the weight is the
    multinomial count of the multi-index, so that the sum is the full tensor norm.
    """
    hats = conv.kernel_hats(t)
    out = {}
    for k, items in expansions.items():
        acc = 0.0
        for weight, exp in items:
            v = conv.apply(hats, exp)
            acc = acc + weight * np.sum(np.abs(v) ** 2, axis=-1)
        out[k] = np.sqrt(acc)
    return out


def derivative_expansions(tensor, ell: int) -> dict:
    n = tensor.n
    out = {}
    for k in range(ell + 1):
        out[k] = [
            (math.factorial(k) / math.prod(math.factorial(a) for a in alpha), expand_derivative(tensor, alpha))
            for alpha in multi_indices(n, k)
        ]
    return out


def ntmax_grid(op, f: BoundaryData, cone: ConeSpec, ell: int = 0) -> dict:
    """``N(nabla^k u)`` at every grid node for ``k = 0..ell``."""
    system = resolve_system(op)
    if abs(cone.spacing - f.grid.spacing) > 1e-12 * f.grid.spacing:
        raise ValueError("cone lattice must match the grid spacing")
    conv = GridConvolver(system, f)
    exps = derivative_expansions(system.tensor, ell)
    result = {k: np.zeros(f.grid.shape) for k in range(ell + 1)}
    for t in cone.t_levels:
        mods = gradient_moduli(conv, t, exps)
        r = cone.kappa * t / f.grid.spacing
        for k in result:
            result[k] = np.maximum(result[k], _disk_max(mods[k], r))
    return result


@dataclass
class NormReport:
    p: float
    ell: int
    kappa: float
    values: list
    datum_norm: float
    empirical_C: float
    grid: dict = field(default_factory=dict)
    points: np.ndarray = field(default=None, repr=False)
    pointwise: dict = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "ell": self.ell,
            "kappa": self.kappa,
            "values": [float(v) for v in self.values],
            "datum_norm": float(self.datum_norm),
            "empirical_C": float(self.empirical_C),
            "grid": self.grid,
        }

    def to_csv(self) -> str:
        dim = self.points.shape[-1]
        head = [f"x{i + 1}" for i in range(dim)] + [f"N_grad{k}" for k in range(self.ell + 1)]
        rows = [",".join(head)]
        for i, x in enumerate(self.points):
            rows.append(",".join([f"{c:.17g}" for c in x] + [f"{self.pointwise[k][i]:.17g}" for k in range(self.ell + 1)]))
        return "\n".join(rows) + "\n"


def wellposedness_report(op, f: BoundaryData, p: float, ell: int, cone: ConeSpec, nt: dict = None) -> NormReport:
    """Norms ``||N(nabla^k u)||_p`` over the inner half of the grid and ``||f||_{L^p_ell}``.

    ``N`` is evaluated at nodes with ``|x'|_inf <= R/2``, where the data
    truncation is controlled; the datum norm uses the whole grid.  A
    precomputed ``ntmax_grid`` result of order ``>= ell`` may be passed as ``nt``.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    if ell > f.ell:
        raise ValueError(f"data carry derivatives to order {f.ell} only")
    if nt is None:
        nt = ntmax_grid(op, f, cone, ell)
    elif max(nt) < ell:
        raise ValueError("precomputed maximal functions do not reach order ell")
    mask = f.grid.inner_mask(0.5)
    values = [lp_norm(nt[k], f.grid, p, mask) for k in range(ell + 1)]
    dn = sobolev_norm(f, p, ell)
    if dn == 0:
        raise ValueError("datum has zero norm")
    return NormReport(
        p, ell, cone.kappa, values, dn, sum(values) / dn, f.grid.to_json(),
        f.grid.points[mask], {k: nt[k][mask] for k in range(ell + 1)},
    )


def pointwise_bound_ratio(op, f: BoundaryData, cone: ConeSpec) -> float:
    """Largest ``N u / M f`` over the inner half of the grid."""
    nt = ntmax_grid(op, f, cone, 0)[0]
    mf = hl_maximal_grid(f.values, f.grid)
    mask = f.grid.inner_mask(0.5)
    return float(np.max(nt[mask] / mf[mask]))
