"""Dense float64 linear algebra used by the whitening layer and the tests.

Everything here is a pure function of its inputs except :class:`SeededRng`.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import (
    DegenerateBatchError,
    InvalidInputError,
    NotPositiveDefiniteError,
)

DEFAULT_RIDGE = 1e-5
DEFAULT_NS_ITERS = 5
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_matrix(x, name="input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1) if name == "column" else a.reshape(1, -1)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name}: expected a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name}: non-finite entries")
    return a


class SeededRng:
    """Deterministic random stream backed by numpy's PCG64 bit generator.

    PCG64 (permuted congruential generator, 128-bit state, XSL-RR output) is
    platform independent, so one seed gives one stream everywhere. Child
    streams are derived by hashing ``(seed, *keys)`` through ``SeedSequence``.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def covariance(X, ridge: float = DEFAULT_RIDGE):
    """Column mean and biased (1/n) covariance plus ``ridge * I``."""
    X = as_matrix(X, "X")
    if ridge < 0:
        raise InvalidInputError("ridge must be non-negative")
    n, d = X.shape
    if n < 2:
        raise DegenerateBatchError(f"covariance needs at least 2 samples, got {n}")
    mu = X.mean(axis=0)
    Xc = X - mu
    sigma = (Xc.T @ Xc) / n
    # exact symmetry; matmul of Xc.T @ Xc is not guaranteed bit-symmetric
    sigma = np.triu(sigma) + np.triu(sigma, 1).T
    sigma[np.diag_indices(d)] += ridge
    return mu, sigma


def jacobi_eigh(A, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    eigenvalues in ascending order.
    """
    A = as_matrix(A, "A").copy()
    d = A.shape[0]
    if A.shape[1] != d:
        raise InvalidInputError(f"expected a square matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    V = np.eye(d)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def exact_inv_sqrt(sigma) -> np.ndarray:
    """Symmetric (ZCA) inverse square root ``U diag(1/sqrt(l)) U^T``."""
    sigma = as_matrix(sigma, "sigma")
    if sigma.shape[0] != sigma.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise InvalidInputError("sigma is not symmetric")
    evals, U = jacobi_eigh(sigma)
    if evals[0] <= 0:
        raise NotPositiveDefiniteError(f"smallest eigenvalue {evals[0]:.3e} is not positive")
    W = (U / np.sqrt(evals)) @ U.T
    return 0.5 * (W + W.T)


def newton_schulz_inv_sqrt(sigma, T: int = DEFAULT_NS_ITERS) -> np.ndarray:
    W, _ = newton_schulz_inv_sqrt_vjp(sigma, T)
    return W


def newton_schulz_inv_sqrt_vjp(sigma, T: int = DEFAULT_NS_ITERS):
    """Trace-normalised Newton-Schulz inverse square root and its pullback.

    ``P_{k+1} = (3 P_k - P_k^3 S) / 2`` with ``S = sigma / tr(sigma)`` and
    ``P_0 = I``; the result is ``P_T / sqrt(tr)``. The returned closure maps
    ``dL/dW`` to ``dL/dsigma`` by differentiating the unrolled recurrence.
    """
    sigma = as_matrix(sigma, "sigma")
    d = sigma.shape[0]
    if sigma.shape[1] != d:
        raise InvalidInputError(f"expected a square matrix, got {sigma.shape}")
    if T < 0:
        raise InvalidInputError("iteration count must be >= 0")
    tr = float(np.trace(sigma))
    if not tr > 0:
        raise InvalidInputError(f"trace must be positive, got {tr}")
    S = sigma / tr
    Ps = [np.eye(d)]
    cubes = []
    for _ in range(T):
        P = Ps[-1]
        P3 = P @ P @ P
        cubes.append(P3)
        Ps.append(1.5 * P - 0.5 * (P3 @ S))
    root_tr = math.sqrt(tr)
    W = Ps[-1] / root_tr

    def backward(grad_W: np.ndarray) -> np.ndarray:
        grad_W = np.asarray(grad_W, dtype=np.float64)
        G = grad_W / root_tr
        grad_tr = -0.5 * tr ** -1.5 * float(np.sum(grad_W * Ps[-1]))
        grad_S = np.zeros_like(S)
        for k in range(T - 1, -1, -1):
            P, P3 = Ps[k], cubes[k]
            grad_S -= 0.5 * (P3.T @ G)
            G3 = -0.5 * (G @ S.T)
            PT = P.T
            G = 1.5 * G + G3 @ PT @ PT + PT @ G3 @ PT + PT @ PT @ G3
        # P_0 = I is constant; G is discarded here
        grad_sigma = grad_S / tr
        grad_tr -= float(np.sum(grad_S * sigma)) / tr**2
        grad_sigma = grad_sigma + grad_tr * np.eye(d)
        return grad_sigma

    return W, backward


def whitening_error(W, sigma) -> float:
    """Frobenius distance of ``W sigma W^T`` from the identity."""
    W = np.asarray(W, dtype=np.float64)
    return float(np.linalg.norm(W @ sigma @ W.T - np.eye(W.shape[0])))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise InvalidInputError(f"function value is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


GRAD_NORM_FLOOR = 1e-4


def relative_error(a, b, floor: float = GRAD_NORM_FLOOR) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps structurally-zero gradients (e.g. a bias feeding a
    mean-subtracting layer) from dividing finite-difference noise by ~0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom
