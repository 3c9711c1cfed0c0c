"""Empirical and expected neural tangent kernels of the quadratic network.

Per point only columns ``a`` and ``b + p`` of ``W`` and row ``c`` of ``V`` carry
gradient, so with ``u = W_a + W_{b+p}`` the kernel between two points is

    K(x, x') = 1(c = c') <u**2, u'**2>
             + 4 (1(a = a') + 1(b = b')) <V_c * u, V_c' * u'>

which costs O(h) per entry instead of O(hp).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from modgrok.data import ModAddDataset
from modgrok.quadnet import QuadNetParams, hidden_preactivation


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    entries: np.ndarray
    index: np.ndarray = field(default=None)  # dataset rows behind each kernel row

    def __post_init__(self):
        K = np.asarray(self.entries, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel matrix must be square, got {K.shape}")
        object.__setattr__(self, "entries", K)
        if self.index is None:
            object.__setattr__(self, "index", np.arange(K.shape[0]))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def is_symmetric(self, tol: float = 1e-10) -> bool:
        K = self.entries
        return bool(np.abs(K - K.T).max(initial=0.0) <= tol * max(1.0, np.abs(K).max(initial=0.0)))

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def save(self, stem, **meta) -> None:
        stem = Path(stem)
        self.entries.astype("<f8").tofile(stem.with_suffix(".bin"))
        meta = {"n": self.n, **meta}
        stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem) -> "KernelMatrix":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        n = meta["n"]
        return cls(np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape(n, n))


@dataclass(frozen=True)
class NtkMoments:
    """Second and fourth moments of the first-layer init distribution."""

    sigma_W_sq: float
    kappa_W: float
    h: int = 1

    def __post_init__(self):
        if self.sigma_W_sq <= 0:
            raise ValueError("sigma_W_sq must be positive")
        if self.kappa_W < 1:
            raise ValueError(f"kurtosis is at least 1, got {self.kappa_W}")

    @classmethod
    def uniform(cls, s_W: float, h: int = 1) -> "NtkMoments":
        """Uniform([-s_W, s_W]): variance s_W^2 / 3 and kurtosis 9/5."""
        return cls(s_W * s_W / 3.0, 9.0 / 5.0, h)

    @classmethod
    def gaussian(cls, sigma: float, h: int = 1) -> "NtkMoments":
        return cls(sigma * sigma, 3.0, h)


def _as_points(points):
    if isinstance(points, ModAddDataset):
        c = points.c if points.c is not None else np.zeros(len(points), dtype=np.int64)
        return points.a, points.b, c
    pts = np.asarray(points, dtype=np.int64)
    if pts.shape[1] == 2:
        return pts[:, 0], pts[:, 1], np.zeros(len(pts), dtype=np.int64)
    return pts[:, 0], pts[:, 1], pts[:, 2]


def _entk(theta: QuadNetParams, a, b, c) -> np.ndarray:
    pre = hidden_preactivation(theta, a, b)  # (h, n)
    act = pre * pre
    u = theta.V[c].T * pre  # (h, n)
    same_c = c[:, None] == c[None, :]
    same_a = (a[:, None] == a[None, :]).astype(np.float64)
    same_b = (b[:, None] == b[None, :]).astype(np.float64)
    K = np.where(same_c, act.T @ act, 0.0)
    K += 4.0 * (same_a + same_b) * (u.T @ u)
    return 0.5 * (K + K.T)


def entk_regression(theta: QuadNetParams, points) -> KernelMatrix:
    """eNTK of g over (a, b, c) points (array of triples or regression dataset)."""
    a, b, c = _as_points(points)
    return KernelMatrix(_entk(theta, a, b, c))


def entk_class_first_logit(theta: QuadNetParams, points) -> KernelMatrix:
    """Gram matrix of grad f_0 over (a, b) pairs (the first-logit approximation)."""
    a, b, _ = _as_points(points)
    return KernelMatrix(_entk(theta, a, b, np.zeros(len(a), dtype=np.int64)))


def entk_gradient_oracle(theta: QuadNetParams, points) -> np.ndarray:
    """Reference eNTK from explicitly flattened per-point gradients."""
    from modgrok.quadnet import grad_reg

    a, b, c = _as_points(points)
    G = np.stack([grad_reg(theta, (ai, bi, ci)).flat() for ai, bi, ci in zip(a, b, c)])
    return G @ G.T


def expected_L_entry(x, x_prime, moments: NtkMoments) -> float:
    """Expected per-neuron second-layer kernel ``E L(x, x')`` for W entries iid."""
    a, b, c = x
    a2, b2, c2 = x_prime
    if c != c2:
        return 0.0
    s4 = moments.sigma_W_sq**2
    k = moments.kappa_W
    eq_a, eq_b = a == a2, b == b2
    if eq_a and eq_b:
        return (2.0 * k + 6.0) * s4
    if eq_a or eq_b:
        return (k + 3.0) * s4
    return 4.0 * s4


def expected_L_matrix(points, moments: NtkMoments) -> KernelMatrix:
    """``h * E L`` over a point set (the closed-form part of the expected eNTK)."""
    a, b, c = _as_points(points)
    s4, k = moments.sigma_W_sq**2, moments.kappa_W
    same_c = (c[:, None] == c[None, :]).astype(np.float64)
    same_a = (a[:, None] == a[None, :]).astype(np.float64)
    same_b = (b[:, None] == b[None, :]).astype(np.float64)
    M = s4 * same_c * (4.0 + (k - 1.0) * (same_a + same_b) + 4.0 * same_a * same_b)
    return KernelMatrix(moments.h * M)


def monte_carlo_L(x, x_prime, trials: int, rng: np.random.Generator, s_W: float = 1.0):
    """Sample mean and standard error of the per-neuron L kernel, W ~ Uniform(+-s_W)."""
    a, b, c = x
    a2, b2, c2 = x_prime
    if c != c2:
        return 0.0, 0.0
    Q = rng.uniform(-s_W, s_W, size=(trials, 2))  # entries for a and a'
    R = rng.uniform(-s_W, s_W, size=(trials, 2))
    qa, qa2 = Q[:, 0], (Q[:, 0] if a == a2 else Q[:, 1])
    rb, rb2 = R[:, 0], (R[:, 0] if b == b2 else R[:, 1])
    vals = (qa + rb) ** 2 * (qa2 + rb2) ** 2
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials))


# ---------------------------------------------------------------- kernel regression

def eig_diagnostics(K, tol: float = None) -> dict:
    """Min/max eigenvalue and numerical rank (eigenvalues above ``tol * max``)."""
    K = K.entries if isinstance(K, KernelMatrix) else np.asarray(K)
    n = K.shape[0]
    w = np.linalg.eigvalsh(K)
    top = float(w[-1]) if n else 0.0
    if tol is None:
        tol = n * np.finfo(np.float64).eps
    rank = int(np.sum(w > tol * top)) if top > 0 else 0
    return {"min_eig": float(w[0]) if n else 0.0, "max_eig": top, "rank": rank}


def min_eig(K) -> float:
    return eig_diagnostics(K)["min_eig"]


def rank(K, tol: float = None) -> int:
    return eig_diagnostics(K, tol)["rank"]


def pinv_sym(K: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse via eigh with cutoff ``n * eps * max|eig|``."""
    w, U = np.linalg.eigh(K)
    cutoff = K.shape[0] * np.finfo(np.float64).eps * np.abs(w).max(initial=0.0)
    inv = np.zeros_like(w)
    keep = np.abs(w) > cutoff
    inv[keep] = 1.0 / w[keep]
    return (U * inv) @ U.T


def kernel_ridgeless_fit(K, targets, prior_mean=None) -> np.ndarray:
    """Coefficients ``K^+ (y - prior_mean)``."""
    K = K.entries if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != (K.shape[0],):
        raise ValueError(f"expected {K.shape[0]} targets, got shape {y.shape}")
    if prior_mean is not None:
        y = y - np.asarray(prior_mean, dtype=np.float64)
    return pinv_sym(K) @ y


def kernel_predict_train(K, coef, prior_mean=None) -> np.ndarray:
    K = K.entries if isinstance(K, KernelMatrix) else np.asarray(K)
    out = K @ coef
    return out if prior_mean is None else out + prior_mean


def entk_cross(theta: QuadNetParams, rows, cols) -> np.ndarray:
    """Rectangular eNTK block between two regression point sets."""
    a1, b1, c1 = _as_points(rows)
    a2, b2, c2 = _as_points(cols)
    p1 = hidden_preactivation(theta, a1, b1)
    p2 = hidden_preactivation(theta, a2, b2)
    u1, u2 = theta.V[c1].T * p1, theta.V[c2].T * p2
    same_c = c1[:, None] == c2[None, :]
    same_ab = (a1[:, None] == a2[None, :]).astype(float) + (b1[:, None] == b2[None, :])
    return np.where(same_c, (p1 * p1).T @ (p2 * p2), 0.0) + 4.0 * same_ab * (u1.T @ u2)


# ---------------------------------------------------------------- interpolation thresholds

def interpolation_thresholds(p: int, n: int, h: int, rho_c: int, delta: float,
                             moments: NtkMoments | None = None, s_W: float = 1.0) -> dict:
    """Width conditions for eNTK ridgeless regression to interpolate.

    ``sufficient``: h > (4 s_W^4 / sigma_W^4) rho_c log(n / delta); for uniform
    init the factor is 36. ``impossible``: h < n / (3p), where the kernel rank
    is at most 3ph < n.
    """
    if not n / p <= rho_c <= n:
        raise ValueError(f"rho_c={rho_c} must lie in [n/p, n] = [{n / p}, {n}]")
    if moments is None:
        moments = NtkMoments.uniform(s_W)
    factor = 4.0 * s_W**4 / moments.sigma_W_sq**2
    width_needed = factor * rho_c * math.log(n / delta)
    return {
        "sufficient": h > width_needed,
        "impossible": h < n / (3.0 * p),
        "sufficient_width": width_needed,
        "rank_cap": 3 * p * h,
        "singular_below": n / (3.0 * p),
    }


def entk_drift(K_t, K_0) -> float:
    """Frobenius norm of the difference of two kernels on the same probe set."""
    A = K_t.entries if isinstance(K_t, KernelMatrix) else np.asarray(K_t)
    B = K_0.entries if isinstance(K_0, KernelMatrix) else np.asarray(K_0)
    if A.shape != B.shape:
        raise ValueError("kernels were computed on different probe sets")
    return float(np.linalg.norm(A - B))


def entk_for(theta: QuadNetParams, probe: ModAddDataset) -> KernelMatrix:
    if probe.is_regression:
        return entk_regression(theta, probe)
    return entk_class_first_logit(theta, probe)
