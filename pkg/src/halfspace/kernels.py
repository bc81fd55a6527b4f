"""Closed-form kernels in the upper half-space.

Matrix kernels are vectorized: a kernel on R^{n-1} maps an array of points of
shape ``(..., n-1)`` to ``(..., M, M)``; space kernels take ``(..., n)``.  Row
index is the output component, column index the datum component, so that
``u = P_t * f`` reads ``u_g = sum_a (P_{ga})_t * f_a``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.integrate import quad_vec
from scipy.special import gamma as gamma_fn

from .optensor import (
    CoefficientTensor,
    LameModuli,
    TensorError,
    lame_distinguished_theta,
    lame_tensor,
    laplacian_tensor,
    same_operator,
    symmetrize,
)

ANALYTIC_GRADIENT = "analytic_gradient"
LINEAR_SOLVE = "linear_solve"


class BranchCutError(ValueError):
    """The quadratic form hits the branch cut of the principal power."""


def sphere_area(m: int) -> float:
    """Surface area of the unit sphere S^m in R^{m+1}."""
    if m < 0:
        raise ValueError("m must be >= 0")
    return float(2 * np.pi ** ((m + 1) / 2) / gamma_fn((m + 1) / 2))


def _radial_probe(dim: int, rng=None) -> np.ndarray:
    """Log-spaced radial sample along axis and diagonal directions in R^dim."""
    dirs = [np.eye(dim), -np.eye(dim)]
    if dim > 1:
        dirs.append(np.ones((1, dim)) / np.sqrt(dim))
    rng = rng or np.random.default_rng(0x5EED)
    g = rng.standard_normal((6, dim))
    dirs.append(g / np.linalg.norm(g, axis=1, keepdims=True))
    dirs = np.vstack(dirs)
    radii = np.concatenate([[0.0], np.logspace(-3, 6, 91)])
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)


class MatrixKernel:
    """Matrix-valued kernel on R^{n-1}, with its dilations ``F_t(x') = t^{1-n} F(x'/t)``."""

    def __init__(self, n: int, M: int, func: Callable[[np.ndarray], np.ndarray], name: str = "", decay_power: Optional[float] = None):
        self.n = n
        self.M = M
        self.name = name
        self._func = func
        # |F(x')| <= C (1 + |x'|)^{-decay_power}; n for Poisson kernels, n - 1 for Q.
        self.decay_power = float(n if decay_power is None else decay_power)

    def __repr__(self):
        return f"MatrixKernel({self.name!r}, n={self.n}, M={self.M})"

    def __call__(self, xp) -> np.ndarray:
        xp = np.asarray(xp, dtype=float)
        if xp.shape[-1] != self.n - 1:
            raise ValueError(f"{self.name}: points must have last axis {self.n - 1}, got {xp.shape}")
        return self._func(xp)

    def dilate(self, t: float, xp) -> np.ndarray:
        if not np.all(np.asarray(t) > 0):
            raise ValueError("dilation parameter t must be positive")
        t = np.asarray(t, dtype=float)
        xp = np.asarray(xp, dtype=float)
        return t[..., None, None] ** (1 - self.n) * self(xp / t[..., None])

    def extend(self) -> SpaceKernel:
        """The kernel ``K(x', t) = P_t(x')`` on the open upper half-space."""
        n = self.n

        def K(x):
            x = np.asarray(x, dtype=float)
            if not np.all(x[..., -1] > 0):
                raise ValueError("extended kernel is defined for x_n > 0 only")
            return self.dilate(x[..., -1], x[..., :-1])

        return SpaceKernel(n, self.M, K, homogeneity_degree=1 - n, name=f"ext({self.name})")

    def majorant_ratio(self, xp) -> np.ndarray:
        xp = np.asarray(xp, dtype=float)
        r = np.linalg.norm(xp, axis=-1)
        vals = np.linalg.norm(self(xp), axis=(-2, -1))
        if self.decay_power == self.n:
            return vals * (1 + r**2) ** (self.n / 2)
        return vals * (1 + r) ** self.decay_power

    @cached_property
    def decay_constant(self) -> float:
        """Sampled sup of ``|F(x')| (1 + |x'|^2)^{n/2}`` (or ``(1+|x'|)^p`` for slower kernels)."""
        c = float(np.max(self.majorant_ratio(_radial_probe(self.n - 1))))
        if not np.isfinite(c):
            raise ValueError(f"{self.name}: kernel is not finite on the probe sample")
        return c


class SpaceKernel:
    """Matrix-valued function on R^n minus the origin."""

    def __init__(self, n: int, M: int, func, homogeneity_degree: float, log_coefficient=None, name: str = ""):
        self.n = n
        self.M = M
        self._func = func
        self.homogeneity_degree = homogeneity_degree
        self.log_coefficient = None if log_coefficient is None else np.asarray(log_coefficient, dtype=complex)
        self.name = name

    def __repr__(self):
        return f"SpaceKernel({self.name!r}, n={self.n}, M={self.M})"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"{self.name}: points must have last axis {self.n}, got {x.shape}")
        if np.any(np.all(x == 0, axis=-1)):
            raise ValueError(f"{self.name}: not defined at the origin")
        return self._func(x)


def dilate(P: MatrixKernel, t: float, xprime) -> np.ndarray:
    return P.dilate(t, xprime)


def extend(P: MatrixKernel) -> SpaceKernel:
    return P.extend()


def _with_one(xp: np.ndarray) -> np.ndarray:
    return np.concatenate([xp, np.ones(xp.shape[:-1] + (1,))], axis=-1)


# -- harmonic and scalar kernels --------------------------------------------


def harmonic_poisson(n: int) -> MatrixKernel:
    if n < 2:
        raise ValueError("n must be >= 2")
    c = 2 / sphere_area(n - 1)

    def P(xp):
        r2 = np.sum(xp**2, axis=-1)
        return (c * (1 + r2) ** (-n / 2))[..., None, None].astype(complex)

    return MatrixKernel(n, 1, P, name=f"harmonic_poisson(n={n})")


class ScalarForm:
    """The quantities ``A_sym^{-1}``, ``sqrt(det A_sym)`` shared by all scalar formulas."""

    def __init__(self, A):
        A = np.asarray(A, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 2:
            raise TensorError("scalar coefficient matrix must be n x n with n >= 2")
        self.n = A.shape[0]
        self.A_sym = 0.5 * (A + A.T)
        self.inv = np.linalg.inv(self.A_sym)
        self.sqrt_det = np.sqrt(complex(np.linalg.det(self.A_sym)))
        self.omega = sphere_area(self.n - 1)

    def quad(self, x: np.ndarray) -> np.ndarray:
        """``<A_sym^{-1} x, x>`` (bilinear, principal-branch guarded)."""
        w = np.einsum("...r,rs,...s->...", x, self.inv, x)
        bad = (w.real <= 0) & (np.abs(w.imag) < 1e-14)
        if np.any(bad):
            where = np.asarray(x)[bad][0]
            raise BranchCutError(f"quadratic form on the branch cut at x={where.tolist()}")
        return w


def scalar_poisson(A) -> MatrixKernel:
    form = ScalarForm(A)
    n = form.n
    c = 2 / (form.omega * form.sqrt_det)

    def P(xp):
        w = form.quad(_with_one(xp))
        return (c * w ** (-n / 2))[..., None, None]

    return MatrixKernel(n, 1, P, name="scalar_poisson")


def scalar_fundamental(A) -> SpaceKernel:
    form = ScalarForm(A)
    n = form.n
    if n == 2:
        c = 1 / (4 * np.pi * form.sqrt_det)

        def E(x):
            return (c * np.log(form.quad(x)))[..., None, None]

        return SpaceKernel(2, 1, E, homogeneity_degree=0, log_coefficient=[[2 * c]], name="scalar_fundamental")

    c = -1 / ((n - 2) * form.omega * form.sqrt_det)

    def E(x):
        return (c * form.quad(x) ** ((2 - n) / 2))[..., None, None]

    return SpaceKernel(n, 1, E, homogeneity_degree=2 - n, name="scalar_fundamental")


def scalar_grad_fundamental(A, x) -> np.ndarray:
    """Gradient of the scalar fundamental solution, ``w^{-n/2} A_sym^{-1} x / (omega sqrt det)``."""
    form = A if isinstance(A, ScalarForm) else ScalarForm(A)
    x = np.asarray(x, dtype=float)
    w = form.quad(x)
    return (w ** (-form.n / 2))[..., None] * (x @ form.inv.T) / (form.omega * form.sqrt_det)


def scalar_k(A) -> SpaceKernel:
    form = ScalarForm(A)
    n = form.n

    def k(x):
        return (form.quad(x) ** (-n / 2) / (form.omega * form.sqrt_det))[..., None, None]

    return SpaceKernel(n, 1, k, homogeneity_degree=-n, name="scalar_k")


# -- Lame kernels -----------------------------------------------------------


def lame_poisson(mod: LameModuli, n: int) -> MatrixKernel:
    mu, lam = mod.mu, mod.lam
    om = sphere_area(n - 1)
    c1 = 4 * mu / (3 * mu + lam) / om
    c2 = (mu + lam) / (3 * mu + lam) * 2 * n / om
    I = np.eye(n)

    def P(xp):
        X = _with_one(xp)
        q = np.sum(X**2, axis=-1)
        out = c1 * q[..., None, None] ** (-n / 2) * I + c2 * X[..., :, None] * X[..., None, :] * q[..., None, None] ** (-(n + 2) / 2)
        return out.astype(complex)

    return MatrixKernel(n, n, P, name=f"lame_poisson(mu={mu}, lambda={lam}, n={n})")


def _lame_k_eval(mod: LameModuli, n: int, x: np.ndarray) -> np.ndarray:
    mu, lam = mod.mu, mod.lam
    om = sphere_area(n - 1)
    r2 = np.sum(x**2, axis=-1)[..., None, None]
    return (2 * mu / (3 * mu + lam)) * np.eye(n) / (om * r2 ** (n / 2)) + (
        (mu + lam) / (3 * mu + lam) * n / om
    ) * x[..., :, None] * x[..., None, :] / r2 ** ((n + 2) / 2)


def lame_k(mod: LameModuli, n: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise ValueError(f"x must have last axis {n}")
    if np.any(np.all(x == 0, axis=-1)):
        raise ValueError("lame_k is not defined at the origin")
    return _lame_k_eval(mod, n, x)


def lame_k_kernel(mod: LameModuli, n: int) -> SpaceKernel:
    return SpaceKernel(n, n, lambda x: _lame_k_eval(mod, n, x).astype(complex), homogeneity_degree=-n, name="lame_k")


# -- auxiliary kernels Q^(j) --------------------------------------------------


@dataclass
class AuxKernelFamily:
    """The kernels ``Q^(j)(x') = (d_j E)(x', 1)``, ``j = 0..n-1`` (the last one is normal)."""

    Q: list
    provenance: str
    solve_residual: float = 0.0
    _eval_all: Callable = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.Q)

    def __getitem__(self, j: int) -> MatrixKernel:
        return self.Q[j]

    def eval_all(self, xp) -> np.ndarray:
        """All ``Q^(j)(x')`` at once, shape ``(n, ..., M, M)``."""
        return self._eval_all(np.asarray(xp, dtype=float))

    def dilate_all(self, t: float, xp) -> np.ndarray:
        n = self.n
        return t ** (1 - n) * self.eval_all(np.asarray(xp, dtype=float) / t)


def identity_matrix_B(A: CoefficientTensor) -> np.ndarray:
    """``B[(s, alpha), (r, beta)] = 2 a^{beta alpha}_{rs}``, the matrix of the Q-identity at t = 1."""
    n, M = A.n, A.M
    return 2 * A.a.transpose(3, 1, 2, 0).reshape(n * M, n * M)


class _IdentitySolver:
    """Solves ``2 a^{ba}_{rs} Q^(r)_{gb}(x') = (x', 1)_s P_{ga}(x')`` for all ``Q``."""

    def __init__(self, A: CoefficientTensor, P: MatrixKernel):
        self.A, self.P = A, P
        self.B = identity_matrix_B(A)
        cond = np.linalg.cond(self.B)
        self.least_squares = not np.isfinite(cond) or cond > 1e8
        if not self.least_squares:
            self.lu = sla.lu_factor(self.B)

    def rhs(self, xp: np.ndarray) -> tuple[np.ndarray, tuple]:
        n, M = self.A.n, self.A.M
        lead = xp.shape[:-1]
        X = _with_one(xp).reshape(-1, n)
        Pv = self.P(xp).reshape(-1, M, M)  # [i, g, a]
        # rhs[(s, a), (i, g)]
        rhs = np.einsum("is,iga->saig", X, Pv).reshape(n * M, -1)
        return rhs, lead

    def __call__(self, xp: np.ndarray) -> np.ndarray:
        n, M = self.A.n, self.A.M
        rhs, lead = self.rhs(xp)
        if self.least_squares:
            q = np.linalg.lstsq(self.B, rhs, rcond=None)[0]
        else:
            q = sla.lu_solve(self.lu, rhs)
        # q[(r, b), (i, g)] -> Q[r, i, g, b]
        q = q.reshape(n, M, -1, M).transpose(0, 2, 3, 1)
        return q.reshape((n,) + lead + (M, M))

    def residual(self, xp: np.ndarray) -> float:
        n, M = self.A.n, self.A.M
        rhs, _ = self.rhs(xp)
        Q = self(xp).reshape(n, -1, M, M)
        q = Q.transpose(0, 3, 1, 2).reshape(n * M, -1)
        return float(np.max(np.abs(self.B @ q - rhs)))


def q_family(A: CoefficientTensor, P: MatrixKernel, gradE: Optional[Callable] = None) -> AuxKernelFamily:
    """Auxiliary kernels ``Q^(j)``.

    With ``gradE`` (a vectorized map ``x -> d_r E_{gb}(x)``, shape ``(..., n, M, M)``)
    they are read off the gradient of the fundamental solution.  Without it, the
    identity ``2 a^{ba}_{rs} Q^(r)_{gb} = (x', 1)_s P_{ga}`` at ``t = 1`` is solved
    pointwise; the system matrix does not depend on ``x'`` and is factored once.
    """
    n, M = A.n, A.M
    if P.n != n or P.M != M:
        raise ValueError("kernel and tensor dimensions disagree")

    if gradE is not None:

        def eval_all(xp):
            G = np.asarray(gradE(_with_one(xp)), dtype=complex)  # (..., n, M, M)
            return np.moveaxis(G, -3, 0)

        provenance, residual = ANALYTIC_GRADIENT, 0.0
    else:
        solver = _IdentitySolver(A, P)
        probe = _radial_probe(n - 1)[::7]
        residual = solver.residual(probe)
        if residual > 1e-8:
            raise TensorError(
                f"kernel identity unsatisfiable: tensor likely not distinguished (residual {residual:.3e})"
            )
        eval_all, provenance = solver, LINEAR_SOLVE

    Q = [
        MatrixKernel(n, M, (lambda xp, j=j: eval_all(xp)[j]), name=f"Q^({j + 1})", decay_power=n - 1)
        for j in range(n)
    ]
    return AuxKernelFamily(Q, provenance, residual, eval_all)


def grad_fundamental_from_k(A: CoefficientTensor, k: Callable) -> Callable:
    """Gradient of E recovered from ``a^{ba}_{rs} d_r E_{gb}(x) = x_s k_{ga}(x)``.

    Returns a vectorized map ``x -> G[..., r, gamma, beta]``.
    """
    n, M = A.n, A.M
    B = identity_matrix_B(A) / 2
    lu = sla.lu_factor(B)

    def gradE(x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        X = x.reshape(-1, n)
        kv = np.asarray(k(X), dtype=complex).reshape(-1, M, M)
        rhs = np.einsum("is,iga->saig", X, kv).reshape(n * M, -1)
        q = sla.lu_solve(lu, rhs).reshape(n, M, -1, M).transpose(2, 0, 3, 1)  # [i, r, g, b]
        return q.reshape(lead + (n, M, M))

    return gradE


# -- bundles ---------------------------------------------------------------


@dataclass
class PoissonSystem:
    """An operator together with its distinguished tensor and kernels."""

    name: str
    tensor: CoefficientTensor
    P: MatrixKernel
    Q: AuxKernelFamily
    k: SpaceKernel
    E: Optional[SpaceKernel] = None
    gradE: Optional[Callable] = None
    lame: Optional[LameModuli] = None
    scalar_matrix: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.tensor.n

    @property
    def M(self) -> int:
        return self.tensor.M


def _scalar_pieces(A):
    form = ScalarForm(A)

    def gradE(x):
        return scalar_grad_fundamental(form, x)[..., :, None, None]

    return form, gradE


def harmonic_system(n: int) -> PoissonSystem:
    A = np.eye(n)
    _, gradE = _scalar_pieces(A)
    P = harmonic_poisson(n)
    return PoissonSystem(
        f"laplacian(n={n})", laplacian_tensor(n), P, q_family(laplacian_tensor(n), P, gradE),
        scalar_k(A), scalar_fundamental(A), gradE, scalar_matrix=A,
    )


def scalar_system(A) -> PoissonSystem:
    A = np.asarray(A, dtype=complex)
    form, gradE = _scalar_pieces(A)
    T = CoefficientTensor.from_scalar_matrix(form.A_sym)
    P = scalar_poisson(A)
    return PoissonSystem(
        "scalar", T, P, q_family(T, P, gradE), scalar_k(A), scalar_fundamental(A), gradE, scalar_matrix=A,
    )


def lame_system(mod: LameModuli, n: int) -> PoissonSystem:
    T = lame_tensor(mod, lame_distinguished_theta(mod), n)
    P = lame_poisson(mod, n)
    return PoissonSystem(
        f"lame(mu={mod.mu}, lambda={mod.lam}, n={n})", T, P, q_family(T, P), lame_k_kernel(mod, n), lame=mod,
    )


def match_lame(A: CoefficientTensor) -> Optional[LameModuli]:
    """Lame moduli of ``A`` if it represents a Lame operator, else ``None``."""
    if A.M != A.n:
        return None
    mu = A.a[0, 0, 1, 1].real
    lam_mu = (A.a[0, 1, 0, 1] + A.a[0, 1, 1, 0]).real
    try:
        mod = LameModuli(float(mu), float(lam_mu - mu))
    except TensorError:
        return None
    return mod if same_operator(A, lame_tensor(mod, 0.0, A.n), tol=1e-12) else None


def system_for_tensor(A: CoefficientTensor) -> PoissonSystem:
    """Kernel bundle for any tensor whose operator has a closed-form Poisson kernel."""
    if A.M == 1:
        S = symmetrize(A).scalar_matrix()
        if np.allclose(S, np.eye(A.n), rtol=0, atol=1e-15):
            return harmonic_system(A.n)
        return scalar_system(S)
    mod = match_lame(A)
    if mod is not None:
        return lame_system(mod, A.n)
    raise TensorError("no closed-form Poisson kernel is available for this operator (only scalar and Lame)")


# -- normalization and export -------------------------------------------------


def _gauss_sphere(dim: int, nodes: int):
    """Nodes and weights on the unit sphere S^{dim-1} in R^dim (dim <= 3)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if dim == 2:
        ph = 2 * np.pi * np.arange(nodes) / nodes
        return np.stack([np.cos(ph), np.sin(ph)], axis=1), np.full(nodes, 2 * np.pi / nodes)
    if dim == 3:
        z, wz = np.polynomial.legendre.leggauss(nodes // 2)
        ph = 2 * np.pi * np.arange(nodes) / nodes
        Z, PH = np.meshgrid(z, ph, indexing="ij")
        s = np.sqrt(1 - Z**2)
        pts = np.stack([s * np.cos(PH), s * np.sin(PH), Z], axis=-1).reshape(-1, 3)
        w = (wz[:, None] * np.full(nodes, 2 * np.pi / nodes)[None, :]).reshape(-1)
        return pts, w
    raise ValueError("kernel integration supports n <= 4")


def kernel_integral(P: MatrixKernel, tol: float = 1e-11, angular_nodes: int = 128) -> tuple[np.ndarray, float]:
    """``int_{R^{n-1}} P`` in polar coordinates.

    The radial integral over ``[0, inf)`` is adaptive Gauss-Kronrod; the
    angular one is the periodic trapezoid rule (Gauss-Legendre in the polar
    angle when ``n - 1 = 3``).  Returns the matrix and the error estimate.
    """
    dim = P.n - 1
    dirs, w = _gauss_sphere(dim, angular_nodes)
    M = P.M

    def radial(rho):
        vals = P(rho * dirs)  # (k, M, M)
        v = np.einsum("k,kab->ab", w, vals) * rho ** (dim - 1)
        return np.concatenate([v.real.ravel(), v.imag.ravel()])

    val, err = quad_vec(radial, 0, np.inf, epsabs=tol, epsrel=tol, limit=20000)
    out = val[: M * M] + 1j * val[M * M :]
    return out.reshape(M, M), float(err)


def export_kernel_csv(P: MatrixKernel, points) -> str:
    """Kernel samples as CSV ``x1..x{n-1},alpha,beta,re,im`` (1-based indices, 17 significant digits)."""
    pts = np.asarray(points, dtype=float).reshape(-1, P.n - 1)
    vals = P(pts)
    buf = io.StringIO()
    buf.write(",".join([f"x{i + 1}" for i in range(P.n - 1)] + ["alpha", "beta", "re", "im"]) + "\n")
    for x, V in zip(pts, vals):
        xs = ",".join(f"{c:.17g}" for c in x)
        for a in range(P.M):
            for b in range(P.M):
                buf.write(f"{xs},{a + 1},{b + 1},{V[a, b].real:.17g},{V[a, b].imag:.17g}\n")
    return buf.getvalue()
