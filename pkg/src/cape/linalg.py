"""Dense linear algebra for small matrices (K x K, K <= 64).

Singular values come from a cyclic Jacobi sweep on M^T M, eigenvalues from
shifted QR iteration on the Hessenberg form in complex arithmetic. Both favor
robustness over speed, which is all these matrix sizes need. The spectral
radius bound

    sigma_min(F) / sigma_max(V)  <=  rho(F V^{-1})  <=  sigma_max(F) / sigma_min(V)

is computed from singular values only; V is never inverted, since inversion
of a near-singular V is exactly the instability this bound avoids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SING_FLOOR = 1e-10


class SingularMatrixError(ValueError):
    """V is numerically singular; the upper bound would be meaningless."""


# ---------------------------------------------------------------------------
# symmetric eigendecomposition via cyclic Jacobi

def jacobi_eigh(S: np.ndarray, tol: float = 1e-14, max_sweeps: int = 50):
    """Eigenvalues and eigenvectors of a symmetric matrix.

    Returns (w, V) with S V = V diag(w), w descending, V orthogonal.
    """
    A = np.array(S, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"jacobi_eigh: matrix must be square, got {A.shape}")
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(n), V
    skip_tol = tol * norm * 1e-2
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2) * 2.0)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            Ap = A[p]
            for q in range(p + 1, n):
                apq = Ap[q]
                if abs(apq) <= skip_tol:
                    continue
                theta = (A[q, q] - Ap[p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # apply G^T A G touching only rows/cols p and q
                rot = np.array([[c, -s], [s, c]])
                A[(p, q), :] = rot @ A[(p, q), :]
                A[:, (p, q)] = A[:, (p, q)] @ rot.T
                V[:, (p, q)] = V[:, (p, q)] @ rot.T
                Ap = A[p]
    w = A.diagonal().copy()
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def _svd_via_jacobi(M: np.ndarray):
    """Thin SVD built on the Jacobi eigensolver of the Gram matrix.

    Returns (U, s, V) with M ~= U diag(s) V^T, s descending of length
    min(m, n). Columns of U for numerically zero singular values are zeroed
    (their contribution to gradients follows the computed-vector convention).
    """
    M = np.asarray(M, dtype=float)
    m, n = M.shape
    transposed = m < n
    A = M.T if transposed else M  # work with the tall side
    w, V = jacobi_eigh(A.T @ A)
    w = np.maximum(w, 0.0)
    s = np.sqrt(w)
    U = np.zeros((A.shape[0], len(s)))
    scale = s[0] if len(s) and s[0] > 0 else 1.0
    for k in range(len(s)):
        if s[k] > _SING_FLOOR * scale:
            U[:, k] = (A @ V[:, k]) / s[k]
    if transposed:
        return V, s, U
    return U, s, V


def singular_values(M: np.ndarray) -> np.ndarray:
    """Singular values of M, nonincreasing, length min(rows, cols)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"singular_values: expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("singular_values: non-finite entries")
    _, s, _ = _svd_via_jacobi(M)
    return s


# ---------------------------------------------------------------------------
# eigenvalues via Hessenberg reduction + shifted QR

def _hessenberg(A: np.ndarray) -> np.ndarray:
    H = np.array(A, dtype=float)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            continue
        v = x.copy()
        v[0] += np.sign(x[0]) * normx if x[0] != 0 else normx
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        H[k + 1:, k:] -= 2.0 * np.outer(v, v @ H[k + 1:, k:])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _wilkinson_shift(H: np.ndarray, m: int) -> complex:
    """Eigenvalue of the trailing 2x2 block closest to H[m-1, m-1]."""
    a, b = H[m - 2, m - 2], H[m - 2, m - 1]
    c, d = H[m - 1, m - 2], H[m - 1, m - 1]
    tr = a + d
    det = a * d - b * c
    disc = np.sqrt(complex(tr * tr - 4.0 * det))
    r1 = (tr + disc) / 2.0
    r2 = (tr - disc) / 2.0
    return r1 if abs(r1 - d) <= abs(r2 - d) else r2


def eigenvalues(A: np.ndarray, tol: float = 1e-14,
                max_iter_per_eig: int = 200) -> np.ndarray:
    """All eigenvalues of a real square matrix (complex array).

    Shifted QR iteration on the Hessenberg form, run in complex arithmetic so
    complex-conjugate pairs converge with single shifts.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"eigenvalues: matrix must be square, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("eigenvalues: non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=complex)
    if n == 1:
        return A.astype(complex).reshape(1)
    scale = np.max(np.abs(A))
    if scale == 0.0:
        return np.zeros(n, dtype=complex)
    H = _hessenberg(A / scale).astype(complex)
    eigs: list[complex] = []
    m = n
    iters = 0
    while m > 0:
        if m == 1:
            eigs.append(H[0, 0])
            m = 0
            continue
        # deflate converged trailing entries
        small = abs(H[m - 1, m - 2]) <= tol * (abs(H[m - 1, m - 1]) + abs(H[m - 2, m - 2]) + tol)
        if small:
            eigs.append(H[m - 1, m - 1])
            m -= 1
            iters = 0
            continue
        iters += 1
        if iters > max_iter_per_eig:
            raise ArithmeticError("eigenvalues: QR iteration failed to converge")
        mu = _wilkinson_shift(H[:m, :m], m)
        if iters % 25 == 0:  # exceptional shift to break rare cycles
            mu = mu + 0.5 * abs(H[m - 1, m - 2])
        # implicit single-shift QR step via Givens rotations on H[:m, :m]
        Hm = H[:m, :m]
        for i in range(m):
            Hm[i, i] -= mu
        rots = []
        for k in range(m - 1):
            a, b = Hm[k, k], Hm[k + 1, k]
            r = np.sqrt(abs(a) ** 2 + abs(b) ** 2)
            if r == 0.0:
                c, s = 1.0 + 0.0j, 0.0 + 0.0j
            else:
                c, s = a / r, b / r
            rots.append((c, s))
            rows = np.array([Hm[k, k:], Hm[k + 1, k:]])
            Hm[k, k:] = np.conj(c) * rows[0] + np.conj(s) * rows[1]
            Hm[k + 1, k:] = -s * rows[0] + c * rows[1]
        for k, (c, s) in enumerate(rots):
            cols = np.array([Hm[:k + 2, k].copy(), Hm[:k + 2, k + 1].copy()])
            Hm[:k + 2, k] = cols[0] * c + cols[1] * s
            Hm[:k + 2, k + 1] = -cols[0] * np.conj(s) + cols[1] * np.conj(c)
        for i in range(m):
            Hm[i, i] += mu
        H[:m, :m] = Hm
    return np.array(eigs, dtype=complex) * scale


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    eigs = eigenvalues(M)
    if eigs.size == 0:
        return 0.0
    return float(np.max(np.abs(eigs)))


# ---------------------------------------------------------------------------
# reproduction-number bounds

@dataclass
class R0Bounds:
    """Lower/upper bracket of the spectral radius of F V^{-1}."""
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:  # clamp roundoff inversions
            self.lower = self.upper

    def contains(self, value: float, slack: float = 0.0) -> bool:
        return self.lower - slack <= value <= self.upper + slack


def r0_bounds(F: np.ndarray, V: np.ndarray) -> R0Bounds:
    """Singular-value bracket of rho(F V^{-1}); raises on singular V."""
    F = np.asarray(F, dtype=float)
    V = np.asarray(V, dtype=float)
    if F.shape != V.shape or F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValueError(f"r0_bounds: F and V must be square and equal-shaped, "
                         f"got {F.shape} and {V.shape}")
    sf = singular_values(F)
    sv = singular_values(V)
    if sv[-1] < _SING_FLOOR * max(sv[0], 1e-300):
        raise SingularMatrixError(
            f"V numerically singular: sigma_min={sv[-1]:.3e}, sigma_max={sv[0]:.3e}")
    return R0Bounds(lower=float(sf[-1] / sv[0]), upper=float(sf[0] / sv[-1]))


# ---------------------------------------------------------------------------
# differentiable bridge

def singular_values_op(M: Tensor) -> Tensor:
    """Singular values as a graph node.

    d sigma_k / d M = u_k v_k^T from the computed singular vectors; at
    repeated or zero singular values this is the convention subgradient.
    """
    U, s, V = _svd_via_jacobi(M.data)

    def vjp(g):
        return (U * g) @ V.T

    return ad.custom_op(s, (M,), (vjp,), name="singular_values")
