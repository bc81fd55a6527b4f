"""Coefficient tensors of constant-coefficient second order systems.

A tensor ``A`` is stored densely as ``a[alpha, beta, r, s]`` (0-based), so the
operator it represents is ``(L u)_alpha = d_r (a[alpha, beta, r, s] d_s u_beta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_DIM = 8
DEFAULT_SEED = 0x5EED


class TensorError(ValueError):
    """Raised for malformed or inadmissible coefficient tensors."""


@dataclass(frozen=True)
class CoefficientTensor:
    """Dense complex array ``a[alpha, beta, r, s]`` of shape ``(M, M, n, n)``."""

    a: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=complex)
        if a.ndim != 4 or a.shape[0] != a.shape[1] or a.shape[2] != a.shape[3]:
            raise TensorError(f"expected shape (M, M, n, n), got {a.shape}")
        M, n = a.shape[0], a.shape[2]
        if n < 2 or M < 1:
            raise TensorError(f"need n >= 2 and M >= 1, got n={n}, M={M}")
        if n > MAX_DIM or M > MAX_DIM:
            raise TensorError(f"n and M are limited to {MAX_DIM}")
        if not np.all(np.isfinite(a)):
            raise TensorError("tensor has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.a.shape[2]

    @property
    def M(self) -> int:
        return self.a.shape[0]

    def __add__(self, other: CoefficientTensor) -> CoefficientTensor:
        _check_same_shape(self, other)
        return CoefficientTensor(self.a + other.a)

    def __sub__(self, other: CoefficientTensor) -> CoefficientTensor:
        _check_same_shape(self, other)
        return CoefficientTensor(self.a - other.a)

    def __mul__(self, c) -> CoefficientTensor:
        return CoefficientTensor(complex(c) * self.a)

    __rmul__ = __mul__

    def max_entry(self) -> float:
        return float(np.max(np.abs(self.a)))

    @classmethod
    def from_scalar_matrix(cls, A) -> CoefficientTensor:
        """Tensor of ``div(A grad)`` for an ``n x n`` matrix ``A`` (M = 1)."""
        A = np.asarray(A, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise TensorError(f"scalar coefficient matrix must be square, got {A.shape}")
        return cls(A[None, None, :, :])

    def scalar_matrix(self) -> np.ndarray:
        if self.M != 1:
            raise TensorError("scalar_matrix() needs M = 1")
        return np.array(self.a[0, 0])


def _check_same_shape(A1: CoefficientTensor, A2: CoefficientTensor):
    if A1.a.shape != A2.a.shape:
        raise TensorError(f"dimension mismatch: {A1.a.shape} vs {A2.a.shape}")


@dataclass(frozen=True)
class LameModuli:
    mu: float
    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.lam)):
            raise TensorError("Lame moduli must be finite")
        if not (self.mu > 0 and 2 * self.mu + self.lam > 0):
            raise TensorError(
                f"Lame moduli need mu > 0 and 2 mu + lambda > 0 (mu={self.mu}, lambda={self.lam})"
            )


@dataclass(frozen=True)
class EllipticityReport:
    lh_margin: float
    argmin_xi: np.ndarray
    argmin_eta: np.ndarray
    samples_used: int

    @property
    def elliptic(self) -> bool:
        return self.lh_margin > 0


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sphere_samples(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Coordinate axes (both signs) followed by ``count`` seeded uniform points on S^{n-1}."""
    axes = np.vstack([np.eye(n), -np.eye(n)])
    if count <= 0:
        return axes
    return np.vstack([axes, _unit_rows(rng.standard_normal((count, n)))])


def lh_form(A: CoefficientTensor, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """``Re[a^{ab}_{rs} xi_r xi_s conj(eta_a) eta_b]`` for stacked ``xi`` (K, n), ``eta`` (K, M)."""
    B = np.einsum("abrs,kr,ks->kab", A.a, xi, xi)
    return np.einsum("ka,kab,kb->k", np.conj(eta), B, eta).real


def lh_margin(A: CoefficientTensor, num_samples: int = 256, seed: int = DEFAULT_SEED) -> EllipticityReport:
    """Sampled Legendre-Hadamard margin.

    Directions ``xi`` are the coordinate axes plus ``num_samples`` seeded points
    on the unit sphere.  For every ``xi`` the candidate ``eta`` set holds the
    coordinate axes of C^M, one seeded uniform point of the real sphere
    S^{2M-1} and the minimizing eigenvector of the Hermitian part of
    ``(xi_r xi_s a^{ab}_{rs})``.  The reported margin is the minimum of the
    form over these pairs, hence an upper bound for the true constant.
    """
    if num_samples < 1:
        raise TensorError("num_samples must be >= 1")
    n, M = A.n, A.M
    rng = np.random.default_rng(seed)
    xis = sphere_samples(n, num_samples, rng)
    etas_rand = rng.standard_normal((len(xis), 2 * M))
    etas_rand = _unit_rows(etas_rand[:, :M] + 1j * etas_rand[:, M:])

    best = np.inf
    best_xi = best_eta = None
    used = 0
    eye = np.eye(M, dtype=complex)
    for xi, eta_r in zip(xis, etas_rand):
        B = np.einsum("abrs,r,s->ab", A.a, xi, xi)
        H = 0.5 * (B + B.conj().T)
        w, V = np.linalg.eigh(H)
        cands = np.vstack([eye, eta_r[None, :], V[:, :1].T])
        vals = np.einsum("ka,ab,kb->k", np.conj(cands), B, cands).real
        used += len(cands)
        i = int(np.argmin(vals))
        if vals[i] < best:
            best, best_xi, best_eta = float(vals[i]), xi.copy(), cands[i].copy()
    return EllipticityReport(best, best_xi, best_eta, used)


def symmetrize(A: CoefficientTensor) -> CoefficientTensor:
    return CoefficientTensor(0.5 * (A.a + A.a.transpose(0, 1, 3, 2)))


def same_operator(A1: CoefficientTensor, A2: CoefficientTensor, tol: float = 1e-12) -> bool:
    """Whether ``A1`` and ``A2`` define the same operator (``(A1 - A2)_sym = 0``).

    ``tol`` is relative to the largest entry modulus of the two tensors.
    """
    _check_same_shape(A1, A2)
    scale = max(A1.max_entry(), A2.max_entry(), 1e-300)
    return bool(np.max(np.abs(symmetrize(A1 - A2).a)) <= tol * scale)


def transpose_tensor(A: CoefficientTensor) -> CoefficientTensor:
    """Tensor of the transposed operator: entry (a, b, r, s) is ``a^{ba}_{sr}``."""
    return CoefficientTensor(A.a.transpose(1, 0, 3, 2))


def _check_xi(A: CoefficientTensor, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (A.n,):
        raise TensorError(f"xi must have shape ({A.n},), got {xi.shape}")
    if not np.any(xi):
        raise TensorError("xi = 0 is not allowed")
    return xi


def symbol(A: CoefficientTensor, xi) -> np.ndarray:
    """``-(xi_r xi_s a^{ab}_{rs})_{a,b}``."""
    xi = _check_xi(A, xi)
    return -np.einsum("abrs,r,s->ab", A.a, xi, xi)


def symbol_inverse(A: CoefficientTensor, xi) -> np.ndarray:
    S = symbol(A, xi)
    try:
        inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as exc:
        raise TensorError(f"symbol is singular at xi={np.asarray(xi).tolist()}") from exc
    if not np.all(np.isfinite(inv)):
        raise TensorError(f"symbol is singular at xi={np.asarray(xi).tolist()}")
    return inv


def block(A: CoefficientTensor, r: int, s: int) -> np.ndarray:
    """The ``M x M`` matrix ``A_rs = (a^{ab}_{rs})_{a,b}`` (0-based ``r``, ``s``)."""
    if not (0 <= r < A.n and 0 <= s < A.n):
        raise TensorError(f"block index ({r}, {s}) out of range for n={A.n}")
    return np.array(A.a[:, :, r, s])


def lame_tensor(mod: LameModuli, theta: float, n: int) -> CoefficientTensor:
    """``mu d_rs d_ab + (lambda + mu - theta) d_ra d_sb + theta d_rb d_sa``."""
    mu, lam = mod.mu, mod.lam
    I = np.eye(n)
    a = (
        mu * np.einsum("rs,ab->abrs", I, I)
        + (lam + mu - theta) * np.einsum("ra,sb->abrs", I, I)
        + theta * np.einsum("rb,sa->abrs", I, I)
    )
    return CoefficientTensor(a)


def lame_distinguished_theta(mod: LameModuli) -> float:
    return mod.mu * (mod.lam + mod.mu) / (3 * mod.mu + mod.lam)


def laplacian_tensor(n: int) -> CoefficientTensor:
    return CoefficientTensor.from_scalar_matrix(np.eye(n))


# -- tensor literal (JSON) format -------------------------------------------

_ENTRY_KEYS = {"alpha", "beta", "r", "s", "re", "im"}


def tensor_from_literal(obj: dict) -> CoefficientTensor:
    """Build a tensor from its JSON literal.

    Accepted forms are ``{"n", "M", "entries": [...]}`` with 1-based indices
    and omitted entries equal to zero, ``{"lame": {"mu", "lambda", "theta", "n"}}``
    where ``theta`` may be ``"distinguished"``, ``{"scalar_matrix": [[...]]}``
    (entries real or ``[re, im]`` pairs) and ``{"laplacian": {"n": ...}}``.
    """
    if not isinstance(obj, dict) or len(obj) == 0:
        raise TensorError("tensor literal must be a non-empty object")
    if "lame" in obj:
        _only_keys(obj, {"lame"}, "operator")
        spec = obj["lame"]
        _only_keys(spec, {"mu", "lambda", "theta", "n"}, "lame")
        try:
            mod = LameModuli(float(spec["mu"]), float(spec["lambda"]))
            theta = spec.get("theta", "distinguished")
            if theta == "distinguished":
                theta = lame_distinguished_theta(mod)
            return lame_tensor(mod, float(theta), int(spec.get("n", 3)))
        except KeyError as exc:
            raise TensorError(f"lame: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TensorError):
                raise
            raise TensorError(f"lame: bad value ({exc})") from None
    if "laplacian" in obj:
        _only_keys(obj, {"laplacian"}, "operator")
        _only_keys(obj["laplacian"], {"n"}, "laplacian")
        try:
            return laplacian_tensor(int(obj["laplacian"]["n"]))
        except KeyError:
            raise TensorError("laplacian: missing field 'n'") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TensorError):
                raise
            raise TensorError(f"laplacian: bad value ({exc})") from None
    if "scalar_matrix" in obj:
        _only_keys(obj, {"scalar_matrix"}, "operator")
        return CoefficientTensor.from_scalar_matrix(parse_complex_matrix(obj["scalar_matrix"]))

    _only_keys(obj, {"n", "M", "entries"}, "tensor")
    for key in ("n", "M", "entries"):
        if key not in obj:
            raise TensorError(f"tensor literal: missing field '{key}'")
    n, M = int(obj["n"]), int(obj["M"])
    if not (2 <= n <= MAX_DIM and 1 <= M <= MAX_DIM):
        raise TensorError(f"tensor literal: bad dimensions n={n}, M={M}")
    a = np.zeros((M, M, n, n), dtype=complex)
    if not isinstance(obj["entries"], list):
        raise TensorError("tensor literal: 'entries' must be an array")
    for i, e in enumerate(obj["entries"]):
        if not isinstance(e, dict):
            raise TensorError(f"tensor literal: entries[{i}] is not an object")
        extra = set(e) - _ENTRY_KEYS
        if extra:
            raise TensorError(f"tensor literal: entries[{i}] has unknown field(s) {sorted(extra)}")
        try:
            al, be, r, s = (int(e[k]) for k in ("alpha", "beta", "r", "s"))
        except KeyError as exc:
            raise TensorError(f"tensor literal: entries[{i}] missing field {exc}") from None
        except (TypeError, ValueError):
            raise TensorError(f"tensor literal: entries[{i}] has a non-integer index") from None
        if not (1 <= al <= M and 1 <= be <= M and 1 <= r <= n and 1 <= s <= n):
            raise TensorError(f"tensor literal: entries[{i}] index out of range")
        try:
            a[al - 1, be - 1, r - 1, s - 1] = complex(float(e.get("re", 0.0)), float(e.get("im", 0.0)))
        except (TypeError, ValueError):
            raise TensorError(f"tensor literal: entries[{i}] has a non-numeric value") from None
    return CoefficientTensor(a)


def tensor_to_literal(A: CoefficientTensor) -> dict:
    entries = []
    for idx in zip(*np.nonzero(A.a)):
        v = A.a[idx]
        al, be, r, s = (int(i) + 1 for i in idx)
        entries.append({"alpha": al, "beta": be, "r": r, "s": s, "re": float(v.real), "im": float(v.imag)})
    return {"n": A.n, "M": A.M, "entries": entries}


def parse_complex_matrix(rows) -> np.ndarray:
    try:
        return np.array(
            [[complex(*v) if isinstance(v, (list, tuple)) else complex(v) for v in row] for row in rows],
            dtype=complex,
        )
    except (TypeError, ValueError):
        raise TensorError("matrix entries must be numbers or [re, im] pairs") from None


def _only_keys(obj, allowed: set, where: str):
    if not isinstance(obj, dict):
        raise TensorError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise TensorError(f"{where}: unknown field(s) {sorted(extra)}")
