"""Membership tests for distinguished coefficient tensors."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .optensor import (
    DEFAULT_SEED,
    CoefficientTensor,
    TensorError,
    lh_margin,
    sphere_samples,
    symbol_inverse,
    _check_xi,
)

TOL_A = 1e-8
TOL_B = 1e-10


@dataclass(frozen=True)
class DistinguishedReport:
    condition_a_residual: float
    n2_integral_residual: float
    verdict: bool
    xi_samples: int
    quad_nodes: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["samples"] = d.pop("xi_samples")
        return d


def d_symbol_inverse(A: CoefficientTensor, xi, sprime: int) -> np.ndarray:
    """Analytic ``d S / d xi_{s'}`` where ``S`` is the inverse symbol.

    Uses ``dS = -S (d Symb) S`` with
    ``d Symb_{ab} / d xi_{s'} = -(a^{ab}_{s's} xi_s + a^{ab}_{rs'} xi_r)``.
    """
    xi = _check_xi(A, xi)
    if not 0 <= sprime < A.n:
        raise TensorError(f"index {sprime} out of range")
    S = symbol_inverse(A, xi)
    dsymb = -(A.a[:, :, sprime, :] @ xi + A.a[:, :, :, sprime] @ xi)
    return -S @ dsymb @ S


def _bracket(A: CoefficientTensor, xi: np.ndarray) -> np.ndarray:
    """The bracket of condition (a) for all ``(s, s', alpha, gamma)``, shape ``(n, n, M, M)``."""
    a = A.a
    S = symbol_inverse(A, xi)  # S[gamma, beta]
    dS = np.stack([d_symbol_inverse(A, xi, k) for k in range(A.n)])  # dS[k, gamma, beta]
    # c[beta, alpha, s] = xi_r a^{beta alpha}_{r s}
    c = np.einsum("r,bars->bas", xi, a)
    antisym = a.transpose(0, 1, 3, 2) - a  # [b, a, s, s'] = a_{s's} - a_{ss'}
    # term0[s, s', alpha, gamma] = sum_b (a^{ba}_{s's} - a^{ba}_{ss'}) S_{gb}
    term0 = np.einsum("baxy,gb->xyag", antisym, S)
    # + xi_r a^{ba}_{rs} d_{s'} S_{gb}  -  xi_r a^{ba}_{rs'} d_s S_{gb}
    term1 = np.einsum("bax,ygb->xyag", c, dS)
    term2 = np.einsum("bay,xgb->xyag", c, dS)
    return term0 + term1 - term2


def condition_a_residual(A: CoefficientTensor, xi) -> float:
    xi = _check_xi(A, xi)
    return float(np.max(np.abs(_bracket(A, xi))))


def condition_n2_integral(
    A: CoefficientTensor, s: int, sprime: int, alpha: int, gamma: int, nodes: int = 512
) -> complex:
    """Periodic trapezoidal value of the circle integral of condition (b) (n = 2 only)."""
    if A.n != 2:
        raise TensorError("the circle integral condition applies to n = 2 only")
    if nodes < 64:
        raise TensorError("need at least 64 quadrature nodes")
    if s == sprime:
        return 0j
    th = 2 * np.pi * np.arange(nodes) / nodes
    total = 0j
    a = A.a
    for t in th:
        xi = np.array([np.cos(t), np.sin(t)])
        S = symbol_inverse(A, xi)
        # sum_{r, beta} (a^{beta alpha}_{rs} xi_{s'} - a^{beta alpha}_{rs'} xi_s) xi_r S_{gamma beta}
        coef = a[:, alpha, :, s] * xi[sprime] - a[:, alpha, :, sprime] * xi[s]  # [beta, r]
        total += np.einsum("br,r,b->", coef, xi, S[gamma, :])
    return total * (2 * np.pi / nodes)


def scalar_rotation_integrand(A, theta) -> np.ndarray:
    """``(A xi).(xi_2, -xi_1) / (A xi).xi`` at ``xi = (cos theta, sin theta)`` for a 2x2 matrix."""
    A = np.asarray(A, dtype=complex)
    th = np.asarray(theta, dtype=float)
    xi = np.stack([np.cos(th), np.sin(th)], axis=-1)
    Axi = xi @ A.T
    rot = np.stack([xi[..., 1], -xi[..., 0]], axis=-1)
    return np.sum(Axi * rot, axis=-1) / np.sum(Axi * xi, axis=-1)


def is_distinguished(
    A: CoefficientTensor,
    xi_samples: int = 64,
    tol_a: float = TOL_A,
    tol_b: float = TOL_B,
    quad_nodes: int = 512,
    seed: int = DEFAULT_SEED,
) -> DistinguishedReport:
    """Check conditions (a) and, for n = 2, (b) on a deterministic sample.

    ``A`` is rescaled to unit largest entry first; the bracket is invariant
    under that scaling anyway, since ``S`` scales inversely to ``A``.
    """
    if not lh_margin(A, seed=seed).elliptic:
        raise TensorError("tensor is not Legendre-Hadamard elliptic")
    An = CoefficientTensor(A.a / A.max_entry())
    xis = sphere_samples(An.n, xi_samples, np.random.default_rng(seed))
    res_a = max(condition_a_residual(An, xi) for xi in xis)
    res_b = 0.0
    nodes_used = 0
    if An.n == 2:
        nodes_used = quad_nodes
        res_b = max(
            abs(condition_n2_integral(An, s, sp, al, ga, quad_nodes))
            for s in range(2)
            for sp in range(2)
            for al in range(An.M)
            for ga in range(An.M)
        )
    verdict = bool(res_a <= tol_a and res_b <= tol_b)
    return DistinguishedReport(float(res_a), float(res_b), verdict, len(xis), nodes_used)


def k_factorization(
    A: CoefficientTensor, gradE: Callable[[np.ndarray], np.ndarray], x
) -> tuple[np.ndarray, float]:
    """Extract ``k(x)`` from ``a^{ba}_{rs} (d_r E_{gb})(x) = x_s k_{ga}(x)``.

    ``gradE(x)`` must return the array ``G[r, gamma, beta] = d_r E_{gamma beta}(x)``.
    ``k`` is read off the component with the largest ``|x_s|``; the residual is
    the largest deviation from the factorized form over all ``s``.
    """
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        raise TensorError("x = 0 is not allowed")
    G = np.asarray(gradE(x), dtype=complex)
    # F[s, gamma, alpha] = sum_{r, beta} a^{beta alpha}_{rs} G[r, gamma, beta]
    F = np.einsum("bars,rgb->sga", A.a, G)
    s0 = int(np.argmax(np.abs(x)))
    k = F[s0] / x[s0]
    residual = float(np.max(np.abs(F - x[:, None, None] * k[None])))
    return k, residual
