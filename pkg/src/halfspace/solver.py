"""Half-space Dirichlet solver by trapezoidal convolution with the Poisson kernel.

The boundary datum lives on a uniform tensor grid over ``[-R, R]^{n-1}``.
Solutions are evaluated pointwise by direct quadrature; ``GridConvolver``
evaluates the same trapezoid sums at every grid node at once via FFT.
"""

from __future__ import annotations

import io
import itertools
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional, Union

import numpy as np
import scipy.fft as sfft
from scipy.integrate import quad

from .datum import Datum
from .distinguished import is_distinguished
from .kernels import PoissonSystem, ScalarForm, sphere_area, system_for_tensor
from .optensor import CoefficientTensor, LameModuli, TensorError, block

MAX_ELL = 4
_CHUNK = 1 << 18  # kernel evaluations per quadrature block


class MarginError(ValueError):
    """Evaluation point too close to the edge of the data grid."""


class DataError(ValueError):
    """Boundary data missing or inconsistent."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    half_width: float
    points_per_axis: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.points_per_axis < 16:
            raise ValueError("points_per_axis must be >= 16")

    @property
    def dim(self) -> int:
        return self.n - 1

    @property
    def spacing(self) -> float:
        return 2 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.dim

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points_per_axis)

    @cached_property
    def points(self) -> np.ndarray:
        """Grid nodes, shape ``shape + (dim,)``."""
        mesh = np.meshgrid(*([self.nodes] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        w1 = np.full(self.points_per_axis, self.spacing)
        w1[[0, -1]] *= 0.5
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w

    def inner_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes with ``|x'|_inf <= fraction * R``."""
        return np.max(np.abs(self.points), axis=-1) <= fraction * self.half_width * (1 + 1e-12)

    def refined(self, factor: int = 2) -> GridSpec:
        return GridSpec(self.n, self.half_width, factor * (self.points_per_axis - 1) + 1)

    def to_json(self) -> dict:
        return {"n": self.n, "half_width": self.half_width, "points_per_axis": self.points_per_axis}


def multi_indices(dim: int, order: int):
    """All multi-indices of length ``dim`` and total order ``order``, in lexicographic order."""
    return [g for g in itertools.product(range(order + 1), repeat=dim) if sum(g) == order][::-1]


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Sampled boundary datum with its tangential derivatives up to order ``ell``.

    ``derivatives[gamma]`` has shape ``grid.shape + (M,)``.  Tail bounds for
    the datum outside the grid come from the catalog datum when there is one;
    otherwise the sup over the outermost grid layer stands in for the sup tail
    and the L^1 tail is unknown (infinite).
    """

    grid: GridSpec
    M: int
    derivatives: dict
    ell: int
    p: float = 2.0
    datum: Optional[Datum] = None

    def __post_init__(self):
        expected = {g for k in range(self.ell + 1) for g in multi_indices(self.grid.dim, k)}
        if set(self.derivatives) != expected:
            raise DataError(f"derivative arrays must be present exactly for |gamma| <= {self.ell}")
        for g, v in self.derivatives.items():
            if v.shape != self.grid.shape + (self.M,):
                raise DataError(f"derivative {g} has shape {v.shape}, expected {self.grid.shape + (self.M,)}")
            v.setflags(write=False)

    @classmethod
    def from_datum(cls, datum: Datum, grid: GridSpec, ell: int = 0, p: float = 2.0) -> BoundaryData:
        if datum.dim != grid.dim:
            raise DataError(f"datum lives in R^{datum.dim}, grid in R^{grid.dim}")
        if ell > min(datum.max_order, MAX_ELL):
            raise DataError(f"{datum.name}: derivatives to order {ell} are not available")
        derivs = {
            g: np.ascontiguousarray(datum(grid.points, g), dtype=complex)
            for k in range(ell + 1)
            for g in multi_indices(grid.dim, k)
        }
        return cls(grid, datum.M, derivs, ell, p, datum)

    @classmethod
    def from_values(cls, grid: GridSpec, values: np.ndarray, ell: int = 0, p: float = 2.0) -> BoundaryData:
        """Sampled data with second-order finite-difference derivatives (``ell <= 2``)."""
        values = np.asarray(values, dtype=complex)
        if ell > 2:
            raise DataError("finite-difference derivatives are supported for ell <= 2 only")
        if values.ndim == grid.dim:
            values = values[..., None]
        derivs = {}
        for k in range(ell + 1):
            for g in multi_indices(grid.dim, k):
                v = values
                for axis, order in enumerate(g):
                    for _ in range(order):
                        v = np.gradient(v, grid.spacing, axis=axis, edge_order=2)
                derivs[g] = np.ascontiguousarray(v)
        return cls(grid, values.shape[-1], derivs, ell, p, None)

    @property
    def values(self) -> np.ndarray:
        return self.derivatives[(0,) * self.grid.dim]

    def derivative(self, gamma) -> np.ndarray:
        gamma = tuple(int(g) for g in gamma)
        if gamma not in self.derivatives:
            raise DataError(f"derivative {gamma} not available (data carry order <= {self.ell})")
        return self.derivatives[gamma]

    def tail_sup(self, gamma) -> float:
        if self.datum is not None:
            return self.datum.tail_sup(self.grid.half_width, gamma)
        v = np.linalg.norm(self.derivative(gamma), axis=-1)
        edge = ~self.grid.inner_mask(1 - 1.5 / self.grid.points_per_axis)
        return float(np.max(v[edge]))

    def tail_l1(self, gamma) -> float:
        if self.datum is not None:
            return self.datum.tail_l1(self.grid.half_width, gamma)
        return math.inf

    def resolution_ok(self, points_per_width: float = 2.0) -> bool:
        """Whether the grid resolves the datum's smallest length scale."""
        if self.datum is None:
            return True
        return self.grid.spacing * points_per_width <= self.datum.scale


@dataclass
class GridField:
    """Values of a solution at half-space points, with truncation bounds."""

    points: np.ndarray  # (E, n)
    values: np.ndarray  # (E, M)
    trunc_bound: np.ndarray  # (E,)

    def to_csv(self) -> str:
        n = self.points.shape[1]
        buf = io.StringIO()
        buf.write(",".join([f"x{i + 1}" for i in range(n - 1)] + ["t", "component", "re", "im", "trunc_bound"]) + "\n")
        for x, v, b in zip(self.points, self.values, self.trunc_bound):
            xs = ",".join(f"{c:.17g}" for c in x)
            for a, z in enumerate(v):
                buf.write(f"{xs},{a + 1},{z.real:.17g},{z.imag:.17g},{b:.17g}\n")
        return buf.getvalue()


# -- operators -------------------------------------------------------------------


@lru_cache(maxsize=32)
def _system_cached(key: bytes, shape: tuple) -> PoissonSystem:
    a = np.frombuffer(key, dtype=complex).reshape(shape)
    return system_for_tensor(CoefficientTensor(a))


def resolve_system(op) -> PoissonSystem:
    """Accept a ``PoissonSystem`` or a ``CoefficientTensor`` and return the kernel bundle."""
    if isinstance(op, PoissonSystem):
        return op
    if isinstance(op, CoefficientTensor):
        return _system_cached(op.a.tobytes(), op.a.shape)
    raise TypeError(f"expected PoissonSystem or CoefficientTensor, got {type(op).__name__}")


def kernel_tags(n: int) -> list[str]:
    """Tags of the stored kernels: ``P`` and the tangential ``Q1..Q{n-1}``."""
    return ["P"] + [f"Q{j}" for j in range(1, n)]


def _parse_tag(tag: str, n: int) -> Optional[int]:
    if tag == "P":
        return None
    if tag.startswith("Q") and tag[1:].isdigit() and 1 <= int(tag[1:]) <= n:
        return int(tag[1:]) - 1
    raise ValueError(f"unknown kernel tag {tag!r}")


def _dilated(system: PoissonSystem, tags: list, t: np.ndarray, z: np.ndarray) -> dict:
    """``{tag: K_t(z)}`` with ``t`` broadcast against ``z[..., 0]``."""
    n = system.n
    t = np.broadcast_to(t, z.shape[:-1])
    scale = t[..., None, None] ** (1 - n)
    out = {}
    y = z / t[..., None]
    if "P" in tags:
        out["P"] = scale * system.P(y)
    qtags = [tg for tg in tags if tg != "P"]
    if qtags:
        Q = system.Q.eval_all(y)
        for tg in qtags:
            out[tg] = scale * Q[_parse_tag(tg, n)]
    return out


# -- truncation bounds -------------------------------------------------------------


def _poisson_tail_integral(n: int, t: float, d: float) -> float:
    """``int_{|z| >= d} t / (t^2 + |z|^2)^{n/2} dz`` over R^{n-1}."""
    dim = n - 1
    if dim == 1:
        return 2 * math.atan2(t, d)
    val = quad(lambda s: s ** (dim - 1) / (1 + s * s) ** (n / 2), d / t, np.inf)[0]
    return sphere_area(dim - 1) * val


def truncation_bound(system: PoissonSystem, tag: str, t: float, d: float, tail_sup: float, tail_l1: float) -> float:
    """Bound on the part of ``K_t * g`` coming from data outside the grid.

    ``d`` is the distance from the evaluation point to the complement of the
    grid box.  Two bounds are combined: sup of the data tail times the L^1
    norm of the kernel tail, and L^1 of the data tail times the kernel sup.
    """
    n = system.n
    if tag == "P":
        C = system.P.decay_constant
        a = C * tail_sup * _poisson_tail_integral(n, t, d) if tail_sup > 0 else 0.0
        b = C * t / (t * t + d * d) ** (n / 2) * tail_l1 if tail_l1 > 0 else 0.0
    else:
        C = system.Q[_parse_tag(tag, n)].decay_constant
        a = math.inf if tail_sup > 0 else 0.0
        b = C / (t + d) ** (n - 1) * tail_l1 if tail_l1 > 0 else 0.0
    return float(min(a, b))


def _check_margin(grid: GridSpec, xp: np.ndarray) -> np.ndarray:
    sup = np.max(np.abs(xp), axis=-1)
    if np.any(sup > 0.5 * grid.half_width * (1 + 1e-12)):
        raise MarginError(f"evaluation points must satisfy |x'|_inf <= R/2 = {0.5 * grid.half_width}")
    return grid.half_width - sup


# -- pointwise quadrature ----------------------------------------------------------


def _group_data(f: BoundaryData, group: list) -> tuple[np.ndarray, float, float]:
    """``sum C d^gamma f`` over ``(C, gamma)`` pairs, with its tail bounds."""
    g = np.zeros(f.grid.shape + (f.M,), dtype=complex)
    ts = tl = 0.0
    for C, gamma in group:
        g = g + f.derivative(gamma) @ np.asarray(C).T
        c = float(np.linalg.norm(C, 2))
        ts += c * f.tail_sup(gamma)
        tl += c * f.tail_l1(gamma)
    return g, ts, tl


def _quadrature(system, tag, f_grid: GridSpec, gw: np.ndarray, t: np.ndarray, xp: np.ndarray, threads: int = 1):
    Y = f_grid.points.reshape(-1, f_grid.dim)
    G = Y.shape[0]
    step = max(1, _CHUNK // G)
    chunks = [slice(i, i + step) for i in range(0, xp.shape[0], step)]

    def work(sl):
        z = xp[sl, None, :] - Y[None, :, :]
        K = _dilated(system, [tag], t[sl, None], z)[tag]
        val = np.einsum("egab,gb->ea", K, gw)
        # rounding floor: a few ulps of the absolute sum
        mag = np.einsum("eg,g->e", np.linalg.norm(K, axis=(-2, -1)), np.linalg.norm(gw, axis=-1))
        return np.concatenate([val, (8 * np.finfo(float).eps * mag)[:, None]], axis=1)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    out = np.concatenate(parts, axis=0) if parts else np.zeros((0, system.M + 1), dtype=complex)
    return out[:, :-1], out[:, -1].real


def _as_points(t, xprime, dim: int) -> tuple[np.ndarray, np.ndarray]:
    xp = np.asarray(xprime, dtype=float).reshape(-1, dim)
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (xp.shape[0],)).copy()
    if not np.all(t > 0):
        raise ValueError("t must be positive")
    return t, xp


def _convolve_groups(system, groups: dict, f: BoundaryData, t, xprime, threads: int = 1):
    t, xp = _as_points(t, xprime, f.grid.dim)
    d = _check_margin(f.grid, xp)
    w = f.grid.weights[..., None]
    total = np.zeros((xp.shape[0], system.M), dtype=complex)
    bound = np.zeros(xp.shape[0])
    for tag, group in groups.items():
        g, ts, tl = _group_data(f, group)
        val, rounding = _quadrature(system, tag, f.grid, (w * g).reshape(-1, f.M), t, xp, threads)
        total += val
        bound += rounding
        bound += [truncation_bound(system, tag, ti, di, ts, tl) for ti, di in zip(t, d)]
    return total, bound


@dataclass(frozen=True)
class Convolution:
    value: np.ndarray
    trunc_bound: float


def convolve(kernel_tag: str, op, f: BoundaryData, t: float, xprime, gamma=None, matrix=None) -> Convolution:
    """Trapezoidal value of ``(K_t * C d^gamma f)(x')`` for ``K`` one of ``P, Q1, ..``.

    ``matrix`` (default identity) is applied to the datum before convolving.
    """
    system = resolve_system(op)
    if system.M != f.M or system.n != f.grid.n:
        raise DataError("operator and boundary data dimensions disagree")
    _parse_tag(kernel_tag, system.n)
    gamma = tuple(gamma) if gamma is not None else (0,) * f.grid.dim
    C = np.eye(f.M) if matrix is None else np.asarray(matrix)
    val, bound = _convolve_groups(system, {kernel_tag: [(C, gamma)]}, f, [t], [xprime])
    return Convolution(val[0], float(bound[0]))


def solve_dirichlet(op, f: BoundaryData, eval_points, threads: int = 1) -> GridField:
    """``u(x', t) = (P_t * f)(x')`` at points ``(x', t)`` of shape ``(E, n)``."""
    system = resolve_system(op)
    if system.M != f.M or system.n != f.grid.n:
        raise DataError("operator and boundary data dimensions disagree")
    pts = np.asarray(eval_points, dtype=float).reshape(-1, system.n)
    zero = (0,) * f.grid.dim
    vals, bound = _convolve_groups(system, {"P": [(np.eye(f.M), zero)]}, f, pts[:, -1], pts[:, :-1], threads)
    return GridField(pts, vals, bound)


# -- closed forms --------------------------------------------------------------------


def _closed_form_points(grid: GridSpec, eval_points, n: int):
    pts = np.asarray(eval_points, dtype=float).reshape(-1, n)
    t, xp = _as_points(pts[:, -1], pts[:, :-1], n - 1)
    d = _check_margin(grid, xp)
    return pts, t, xp, d


def closed_form_scalar(A, f: BoundaryData, eval_points) -> GridField:
    """Scalar solution ``2t/(omega sqrt(det)) int f(y') <A_sym^{-1} X, X>^{-n/2} dy'`` with ``X = (x' - y', t)``.

    The truncation bound is the one of the kernel route.
    """
    form = ScalarForm(np.asarray(A, dtype=complex))
    n = form.n
    pts, t, xp, d = _closed_form_points(f.grid, eval_points, n)
    Y = f.grid.points.reshape(-1, n - 1)
    gw = (f.grid.weights[..., None] * f.values).reshape(-1, f.M)
    c = 2 / (form.omega * form.sqrt_det)
    out = np.zeros((pts.shape[0], f.M), dtype=complex)
    for i in range(pts.shape[0]):
        X = np.concatenate([xp[i] - Y, np.full((Y.shape[0], 1), t[i])], axis=1)
        w = form.quad(X)
        out[i] = c * t[i] * np.sum(w[:, None] ** (-n / 2) * gw, axis=0)
    return GridField(pts, out, _route_bound(resolve_system(CoefficientTensor.from_scalar_matrix(form.A_sym)), f, t, d))


def closed_form_lame(mod: LameModuli, f: BoundaryData, eval_points) -> GridField:
    """Lame solution as the sum of its isotropic and ``X X^T`` integrals, ``X = (x' - y', t)``."""
    n = f.grid.n
    if f.M != n:
        raise DataError("Lame data must have n components")
    pts, t, xp, d = _closed_form_points(f.grid, eval_points, n)
    mu, lam = mod.mu, mod.lam
    om = sphere_area(n - 1)
    c1 = 4 * mu / ((3 * mu + lam) * om)
    c2 = (mu + lam) / (3 * mu + lam) * 2 * n / om
    Y = f.grid.points.reshape(-1, n - 1)
    gw = (f.grid.weights[..., None] * f.values).reshape(-1, n)
    out = np.zeros((pts.shape[0], n), dtype=complex)
    for i in range(pts.shape[0]):
        X = np.concatenate([xp[i] - Y, np.full((Y.shape[0], 1), t[i])], axis=1)
        r2 = np.sum(X * X, axis=1)
        first = c1 * t[i] * np.sum(gw / r2[:, None] ** (n / 2), axis=0)
        proj = np.sum(X * gw, axis=1)
        second = c2 * t[i] * np.sum(X * (proj / r2 ** ((n + 2) / 2))[:, None], axis=0)
        out[i] = first + second
    from .kernels import lame_system

    return GridField(pts, out, _route_bound(lame_system(mod, n), f, t, d))


def _route_bound(system, f, t, d):
    zero = (0,) * f.grid.dim
    ts, tl = f.tail_sup(zero), f.tail_l1(zero)
    return np.array([truncation_bound(system, "P", ti, di, ts, tl) for ti, di in zip(t, d)])


# -- derivative expansions -------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionTerm:
    kernel_tag: str
    left_matrix_chain: np.ndarray
    right_matrix: np.ndarray
    gamma: tuple


@dataclass(frozen=True)
class TermExpansion:
    """``d^alpha (P_t * f) = sum_terms L (K_t * R d^gamma f)`` with ``|gamma| = order``."""

    alpha: tuple
    order: int
    terms: tuple

    def groups(self) -> dict:
        out = defaultdict(list)
        for term in self.terms:
            out[term.kernel_tag].append((term.left_matrix_chain @ term.right_matrix, term.gamma))
        return dict(out)

    def to_json(self) -> dict:
        def mat(C):
            return [[[z.real, z.imag] for z in row] for row in np.asarray(C, dtype=complex)]

        return {
            "alpha": list(self.alpha),
            "order": self.order,
            "terms": [
                {"kernel": tm.kernel_tag, "gamma": list(tm.gamma), "left": mat(tm.left_matrix_chain), "right": mat(tm.right_matrix)}
                for tm in self.terms
            ],
        }


@lru_cache(maxsize=64)
def _distinguished_cached(key: bytes, shape: tuple) -> bool:
    A = CoefficientTensor(np.frombuffer(key, dtype=complex).reshape(shape))
    return is_distinguished(A).verdict


def expand_derivative(A: CoefficientTensor, alpha) -> TermExpansion:
    """Rewrite ``d^alpha (P_t * f)`` as convolutions of ``P`` and tangential ``Q`` with ``d^gamma f``.

    ``alpha`` has ``n`` entries; the last is the order of the normal derivative.
    Tangential derivatives pass onto ``f``.  Each normal derivative turns a
    ``P`` term into ``-2 sum_{s<n, r} Q^(r) * A_rs d_s`` and a ``Q^(r)`` term
    (``r < n``) into ``Q^(n) * d_r``; every ``Q^(n)`` is then replaced by
    ``1/2 P * A_nn^{-1} - sum_{s<n} Q^(s) * A_sn A_nn^{-1}``.  All matrix
    factors act on the datum, so the left chain is the identity.
    """
    if isinstance(A, PoissonSystem):
        A = A.tensor
    n, M = A.n, A.M
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != n or min(alpha) < 0:
        raise ValueError(f"alpha must be a multi-index of length {n}")
    k = sum(alpha)
    if k > MAX_ELL:
        raise ValueError(f"derivatives of order > {MAX_ELL} are not supported")
    if not _distinguished_cached(A.a.tobytes(), A.a.shape):
        raise TensorError("expansion requires a distinguished coefficient tensor")

    blocks = [[block(A, r, s) for s in range(n)] for r in range(n)]
    Ann_inv = np.linalg.inv(blocks[n - 1][n - 1])
    tiny = 1e-14 * max(1.0, A.max_entry())

    def unit(s):
        e = [0] * (n - 1)
        e[s] = 1
        return tuple(e)

    def add_q(out, r, gamma, C):
        if r < n - 1:
            out[(r + 1, gamma)] += C
            return
        out[(0, gamma)] += 0.5 * Ann_inv @ C
        for s in range(n - 1):
            out[(s + 1, gamma)] += -blocks[s][n - 1] @ Ann_inv @ C

    # key (0 for P, j for Q^(j), gamma) -> right matrix
    terms = {(0, alpha[:-1]): np.eye(M, dtype=complex)}
    for _ in range(alpha[-1]):
        new = defaultdict(lambda: np.zeros((M, M), dtype=complex))
        for (j, gamma), C in terms.items():
            if j == 0:
                for s in range(n - 1):
                    g2 = tuple(a + b for a, b in zip(gamma, unit(s)))
                    for r in range(n):
                        if np.any(blocks[r][s]):
                            add_q(new, r, g2, -2 * blocks[r][s] @ C)
            else:
                g2 = tuple(a + b for a, b in zip(gamma, unit(j - 1)))
                add_q(new, n - 1, g2, C)
        terms = {key: C for key, C in new.items() if np.max(np.abs(C)) > tiny}

    eye = np.eye(M, dtype=complex)
    out = tuple(
        ExpansionTerm("P" if j == 0 else f"Q{j}", eye, C, gamma) for (j, gamma), C in sorted(terms.items())
    )
    return TermExpansion(alpha, k, out)


def evaluate_expansion(exp: TermExpansion, op, f: BoundaryData, t, xprime, threads: int = 1) -> Convolution:
    system = resolve_system(op)
    if exp.order > f.ell:
        raise DataError(f"expansion of order {exp.order} needs data with ell >= {exp.order}, got {f.ell}")
    val, bound = _convolve_groups(system, exp.groups(), f, [t], [xprime], threads)
    return Convolution(val[0], float(bound[0]))


def evaluate_expansion_at(exp: TermExpansion, op, f: BoundaryData, eval_points, threads: int = 1) -> GridField:
    """Vectorized ``evaluate_expansion`` over points ``(x', t)``."""
    system = resolve_system(op)
    if exp.order > f.ell:
        raise DataError(f"expansion of order {exp.order} needs data with ell >= {exp.order}, got {f.ell}")
    pts = np.asarray(eval_points, dtype=float).reshape(-1, system.n)
    vals, bound = _convolve_groups(system, exp.groups(), f, pts[:, -1], pts[:, :-1], threads)
    return GridField(pts, vals, bound)


# -- whole-grid evaluation -------------------------------------------------------------


class GridConvolver:
    """Trapezoid sums ``sum_y K_t(x - y) w_y g_y`` at every grid node ``x`` at once.

    The kernel is sampled on the grid of differences and the discrete linear
    convolution is done by zero-padded FFT.  Data transforms are cached, so
    many kernels and levels reuse them.
    """

    def __init__(self, system: PoissonSystem, f: BoundaryData):
        self.system = resolve_system(system)
        self.f = f
        grid = f.grid
        N = grid.points_per_axis
        self.N = N
        self.axes = tuple(range(grid.dim))
        self.fft_shape = (sfft.next_fast_len(3 * N - 2),) * grid.dim
        k = np.arange(-(N - 1), N) * grid.spacing
        mesh = np.meshgrid(*([k] * grid.dim), indexing="ij")
        self.diffs = np.stack(mesh, axis=-1)
        self._data_hat = {}
        self._groups = {}

    def _hat_data(self, gamma) -> np.ndarray:
        if gamma not in self._data_hat:
            g = self.f.grid.weights[..., None] * self.f.derivative(gamma)
            self._data_hat[gamma] = sfft.fftn(g, s=self.fft_shape, axes=self.axes)
        return self._data_hat[gamma]

    def kernel_hats(self, t: float, tags=None) -> dict:
        tags = tags or kernel_tags(self.system.n)
        K = _dilated(self.system, list(tags), np.float64(t), self.diffs)
        return {tg: sfft.fftn(v, s=self.fft_shape, axes=self.axes) for tg, v in K.items()}

    def _group_hat(self, exp: TermExpansion) -> dict:
        key = id(exp)
        if key not in self._groups:
            out = {}
            for tag, group in exp.groups().items():
                acc = 0
                for C, gamma in group:
                    d = self._hat_data(gamma)
                    acc = acc + sum(d[..., None, b] * C[:, b] for b in range(C.shape[1]))
                out[tag] = acc
            self._groups[key] = (exp, out)
        return self._groups[key][1]

    def apply(self, hats: dict, exp: TermExpansion) -> np.ndarray:
        """Grid values of the expansion, shape ``grid.shape + (M,)``."""
        total = 0
        for tag, g in self._group_hat(exp).items():
            K = hats[tag]
            total = total + sum(K[..., :, b] * g[..., None, b] for b in range(g.shape[-1]))
        full = sfft.ifftn(total, axes=self.axes)
        sl = tuple(slice(self.N - 1, 2 * self.N - 1) for _ in self.axes)
        return full[sl]
