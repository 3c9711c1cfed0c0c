"""Closed-form bound evaluators and brute-force oracles for them.

Index vectors live in ``[p]^m`` and are flattened lexicographically. ``d``
always counts the coordinates in which two index vectors DIFFER.
The random target functions are

    Psi_sigma(x) = 1(sum_i sigma_i(x_i) = 0 mod p),   sigma in S_p^m uniform.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True)
class BoundReport:
    name: str
    inputs: dict
    value: float
    note: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.name} evaluated to a non-finite value {self.value!r}")

    def to_dict(self) -> dict:
        out = {"name": self.name, "inputs": self.inputs, "value": self.value}
        if self.note:
            out["note"] = self.note
        if self.extra:
            out.update(self.extra)
        return out


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- grid helpers

def grid(p: int, m: int) -> np.ndarray:
    """All index vectors of ``[p]^m`` in lexicographic order, shape (p^m, m)."""
    return np.array(list(itertools.product(range(p), repeat=m)), dtype=np.int64).reshape(-1, m)


def hamming(p: int, m: int) -> np.ndarray:
    X = grid(p, m)
    return (X[:, None, :] != X[None, :, :]).sum(axis=2)


def slice_basis(p: int, m: int) -> np.ndarray:
    """Indicator vectors ``s_{i,a}(x) = 1(x_i = a)`` as rows, shape (m p, p^m)."""
    X = grid(p, m)
    return np.array([(X[:, i] == a).astype(np.float64) for i in range(m) for a in range(p)])


def fiber_basis(p: int, m: int) -> np.ndarray:
    """Indicators of the lines ``{x : x_j = z_j for all j != i}``, shape (m p^(m-1), p^m).

    Every slice is a sum of lines, so the line span contains the slice span;
    the two coincide for m <= 2.
    """
    X = grid(p, m)
    rows = []
    for i in range(m):
        rest = np.delete(X, i, axis=1)
        key = rest @ (p ** np.arange(m - 1)) if m > 1 else np.zeros(len(X), dtype=np.int64)
        for z in range(p ** (m - 1)):
            rows.append((key == z).astype(np.float64))
    return np.array(rows)


def _project_out(v: np.ndarray, B: np.ndarray) -> np.ndarray:
    U, s, _ = np.linalg.svd(B.T, full_matrices=False)
    U = U[:, s > 1e-10 * s[0]]
    return v - U @ (U.T @ v)


def project_out_slices(v: np.ndarray, p: int, m: int, space: str = "fiber") -> np.ndarray:
    """Component of ``v`` orthogonal to the line span (``space="fiber"``) or the slice span."""
    if space not in ("fiber", "slice"):
        raise ValueError(f"space must be 'fiber' or 'slice', got {space!r}")
    B = fiber_basis(p, m) if space == "fiber" else slice_basis(p, m)
    return _project_out(v, B)


def random_projected_unit(p: int, m: int, rng: np.random.Generator, space: str = "fiber") -> np.ndarray:
    while True:
        v = project_out_slices(rng.standard_normal(p**m), p, m, space)
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            return v / nv


# ---------------------------------------------------------------- target ensemble

def c_d(p: int, d: int) -> float:
    """``E[Psi(x) Psi(x')]`` for index vectors differing in ``d`` coordinates."""
    if p < 2 or d < 0:
        raise ValueError(f"need p >= 2 and d >= 0, got p={p}, d={d}")
    if d == 0:
        return 1.0 / p
    return (1.0 - 1.0 / (1.0 - p) ** (d - 1)) / p**2


def brute_force_feasible(p: int, m: int) -> bool:
    return math.factorial(p) ** m <= BRUTE_FORCE_LIMIT


def psi_matrix(p: int, m: int, sigmas: np.ndarray) -> np.ndarray:
    """Rows are ``Psi_sigma`` over the grid; ``sigmas`` has shape (T, m, p)."""
    X = grid(p, m)
    total = np.zeros((len(sigmas), len(X)), dtype=np.int64)
    for i in range(m):
        total += sigmas[:, i, :][:, X[:, i]]
    return (total % p == 0).astype(np.float64)


@dataclass(frozen=True)
class Covariance:
    matrix: np.ndarray
    exact: bool
    trials: int
    stderr: Optional[np.ndarray] = None


def brute_covariance(p: int, m: int, trials: int = 20000, seed: int = 0, force_mc: bool = False) -> Covariance:
    """``Sigma(x, x') = E_sigma[Psi(x) Psi(x')]`` by enumeration or Monte Carlo.

    Enumeration runs over all ``(p!)^m`` tuples when that is at most 10^6;
    otherwise ``trials`` seeded draws are averaged and entrywise standard
    errors are returned.
    """
    if brute_force_feasible(p, m) and not force_mc:
        perms = np.array(list(itertools.permutations(range(p))), dtype=np.int64)
        idx = np.array(list(itertools.product(range(len(perms)), repeat=m)), dtype=np.int64)
        P = psi_matrix(p, m, perms[idx])
        return Covariance(P.T @ P / len(P), True, len(P))
    from modgrok.rng import stream

    rng = stream(seed, "ensemble")
    sigmas = np.array([[rng.permutation(p) for _ in range(m)] for _ in range(trials)], dtype=np.int64)
    P = psi_matrix(p, m, sigmas)
    S = P.T @ P / trials
    se = np.sqrt(np.maximum(S - S * S, 0.0) / max(trials - 1, 1))
    return Covariance(S, False, trials, se)


def closed_form_covariance(p: int, m: int) -> np.ndarray:
    D = hamming(p, m)
    table = np.array([c_d(p, d) for d in range(m + 1)])
    return table[D]


def g_d_identity_check(p: int, m: int, d: int, v: np.ndarray, space: str = "fiber") -> tuple[float, float]:
    """Both sides of ``sum_{x,x' differing in d coords} v(x) v(x') = (-1)^d C(m, d)``.

    ``v`` is projected and renormalized first. The identity needs every line
    sum of ``v`` to vanish; with ``space="slice"`` only the slice sums do,
    which is enough for m <= 2 but not beyond.
    """
    v = project_out_slices(np.asarray(v, dtype=np.float64), p, m, space)
    v = v / np.linalg.norm(v)
    mask = hamming(p, m) == d
    lhs = float(v @ (mask * v[None, :]).sum(axis=1))
    return lhs, float((-1) ** d * math.comb(m, d))


def top_eig_sum_bound(p: int, m: int, n: int) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    return p ** (m - 2) + (n / p) * math.exp((m - 1) / (p - 1))


def kernel_lower_bound_rhs(p: int, m: int, n: int) -> float:
    """Lower bound on the expected squared distance from the targets to any n-dim span."""
    return p ** (m - 1) * (1.0 - 1.0 / p - (n / p**m) * math.exp((m - 1) / (p - 1)))


def kernel_lower_bound_rhs_classification(p: int, n: int) -> float:
    """Classification form: each input pair contributes p scalar kernel sections."""
    return p**2 * (1.0 - 1.0 / p - (n / p**2) * math.exp(2.0 / (p - 1)))


def lower_bound_vacuous_threshold(p: int, m: int) -> float:
    """Smallest n at which :func:`kernel_lower_bound_rhs` reaches zero."""
    return p**m * (1.0 - 1.0 / p) * math.exp(-(m - 1) / (p - 1))


def random_equivariant_kernel(p: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``sum_S w_S prod_{i in S} 1(x_i = x'_i)`` with random ``w_S >= 0``.

    Any such kernel is invariant under coordinatewise relabelling of both
    arguments, hence permutation-equivariant.
    """
    X = grid(p, m)
    eq = X[:, None, :] == X[None, :, :]
    K = np.zeros((len(X), len(X)))
    for r in range(m + 1):
        for S in itertools.combinations(range(m), r):
            term = np.all(eq[:, :, list(S)], axis=2) if S else np.ones_like(K, dtype=bool)
            K += rng.uniform(0.0, 1.0) * term
    return K


def expected_dist_sq(cov: np.ndarray, columns: np.ndarray) -> float:
    """``E_Psi dist^2(Psi, span(columns))`` computed as ``tr(Sigma) - tr(P Sigma)``."""
    if columns.shape[1] == 0:
        return float(np.trace(cov))
    U, s, _ = np.linalg.svd(columns, full_matrices=False)
    U = U[:, s > 1e-10 * max(s[0], 1e-300)]
    return float(np.trace(cov) - np.einsum("ij,ik,kj->", U, cov, U))


def least_squares_lhs(p: int, m: int, n: int, K: np.ndarray, cov: Optional[np.ndarray] = None,
                      explicit: bool = False) -> float:
    """Minimum over training sets of n distinct points of the expected distance.

    With ``explicit=True`` each ``Psi_sigma`` is fitted by ordinary least
    squares instead of using the covariance shortcut (exact enumeration only).
    """
    if cov is None:
        cov = brute_covariance(p, m).matrix
    N = p**m
    best = math.inf
    if explicit:
        perms = np.array(list(itertools.permutations(range(p))), dtype=np.int64)
        idx = np.array(list(itertools.product(range(len(perms)), repeat=m)), dtype=np.int64)
        P = psi_matrix(p, m, perms[idx])
    for subset in itertools.combinations(range(N), n):
        cols = K[:, list(subset)]
        if explicit:
            coef, *_ = np.linalg.lstsq(cols, P.T, rcond=None)
            val = float(np.mean(np.sum((cols @ coef - P.T) ** 2, axis=0)))
        else:
            val = expected_dist_sq(cov, cols)
        best = min(best, val)
    return best


# ---------------------------------------------------------------- upper bounds

def rademacher_bound(r: float, r_prime: float, h: int, p: int, n: int) -> float:
    return 324.0 * h * math.sqrt(p) * max(r, r_prime) ** 3 / math.sqrt(n)


def empirical_rademacher_estimate(points: np.ndarray, p: int, h: int, r: float, r_prime: float,
                                  sign_draws: int = 50, searches: int = 200, seed: int = 0) -> float:
    """Stochastic lower estimate of the empirical Rademacher complexity.

    For fixed W the supremum over V is attained at ``V = r' sign(.)``; W is
    searched over random corners of its box. Returns the mean over sign draws.
    """
    from modgrok.rng import stream

    rng = stream(seed, "rademacher")
    pts = np.asarray(points, dtype=np.int64)
    a, b, c = pts.T
    n = len(pts)
    C = np.zeros((p, n))
    C[c, np.arange(n)] = 1.0
    total = 0.0
    for _ in range(sign_draws):
        s = rng.choice([-1.0, 1.0], size=n)
        best = -math.inf
        for _ in range(searches):
            W = r * rng.choice([-1.0, 1.0], size=(h, 2 * p))
            act = (W[:, a] + W[:, p + b]) ** 2  # (h, n)
            # sup over V of (1/n) sum_i s_i V[c_i] . act_i
            M = (act * s) @ C.T  # (h, p)
            best = max(best, r_prime * np.abs(M).sum() / n)
        total += best
    return total / sign_draws


def regression_gen_bound(R: float, h: int, p: int, n: int, delta: float, C: float = 1.0) -> float:
    """``C R^6 h^2 / n * (p log^3 n + log(1/delta))``, up to the unspecified constant C."""
    return C * R**6 * h**2 / n * (p * math.log(n) ** 3 + math.log(1.0 / delta))


def smooth_loss_bound(emp_loss: float, rademacher: float, n: int, delta: float,
                      H: float = 1.0, b: float = 1.0, K: float = 1.0) -> float:
    """Optimistic-rate risk bound for an H-smooth loss bounded by b (constant K)."""
    ln = math.log(n)
    lt = b * math.log(1.0 / delta) / n
    return emp_loss + K * (
        math.sqrt(emp_loss) * (math.sqrt(H) * ln**1.5 * rademacher + math.sqrt(lt))
        + H * ln**3 * rademacher**2
        + lt
    )


def smooth_loss_bound_for_net(emp_loss: float, R: float, h: int, p: int, n: int, delta: float,
                              K: float = 1.0) -> float:
    """Smooth-loss bound with H = 1 and b = 4 h R^3 for width-h nets with ||theta||_inf <= R."""
    return smooth_loss_bound(emp_loss, rademacher_bound(R, R, h, p, n), n, delta, 1.0, 4.0 * h * R**3, K)


def margin_regime(gamma: float, r: float, h: int, delta1: float) -> tuple[str, float]:
    """Which perturbation regime applies, and the deciding ratio."""
    t = (gamma / r**3) / (256.0 * math.sqrt(2.0 * h) * math.log(2.0 * (h + 1) / delta1) ** 1.5)
    return ("*" if t > 1.0 else "**"), t


def classification_gen_bound(gamma: float, r: float, h: int, p: int, n: int, delta: float,
                             delta1: Optional[float] = None, margin_loss: float = 0.0) -> float:
    """PAC-Bayes margin bound RHS on the population 0-1 error.

    ``margin_loss`` is the empirical margin loss at ``gamma`` (zero for an
    interpolating network whose minimum margin is at least ``gamma``).
    """
    if n < 2:
        raise ValueError("the margin bound needs n >= 2")
    if delta1 is None:
        delta1 = delta
    gn = gamma / r**3
    if gn <= 0:
        raise ValueError("normalized margin must be positive")
    complexity = 3.0 * h * p * math.log(2.0 * (h + 1) / delta1) / (gn / (256.0 * math.sqrt(2.0 * h))) ** (2.0 / 3.0)
    return margin_loss + 4.0 * math.sqrt((complexity + math.log(6.0 * n / delta)) / (n - 1))


def classification_rate(gamma: float, r: float, h: int, p: int, n: int) -> float:
    """Order of the bound with logs dropped: ``sqrt(p/n) (h^2 / (gamma/r^3))^(1/3)``."""
    return math.sqrt(p / n) * (h**2 / (gamma / r**3)) ** (1.0 / 3.0)


def misclass_from_l2(L2: float, p: int) -> float:
    """Upper bound ``min(1, 2 L2 / p)`` on the 0-1 error of ``argmax_c g``."""
    if L2 < 0:
        raise ValueError("square loss cannot be negative")
    return min(1.0, 2.0 * L2 / p)


def standard_report(p: int, m: int = 3, n: int = 0, h: Optional[int] = None, delta: float = 0.05,
                    r: float = 1.0, gamma: Optional[float] = None) -> list[BoundReport]:
    """Every closed-form bound for one (p, m, n) setting."""
    h = 8 * p if h is None else h
    gamma = 4.0 * p if gamma is None else gamma
    reports = [
        BoundReport("kernel_lower_bound_rhs", {"p": p, "m": m, "n": n}, kernel_lower_bound_rhs(p, m, n)),
        BoundReport("kernel_lower_bound_rhs_classification", {"p": p, "n": n},
                    kernel_lower_bound_rhs_classification(p, n)),
        BoundReport("lower_bound_vacuous_threshold", {"p": p, "m": m}, lower_bound_vacuous_threshold(p, m)),
        BoundReport("top_eig_sum_bound", {"p": p, "m": m, "n": n}, top_eig_sum_bound(p, m, n)),
        BoundReport("c_d", {"p": p, "m": m}, c_d(p, 0), extra={"table": [c_d(p, d) for d in range(m + 1)]}),
    ]
    if n >= 1:
        reports.append(BoundReport("rademacher_bound", {"r": r, "r_prime": r, "h": h, "p": p, "n": n},
                                   rademacher_bound(r, r, h, p, n)))
    if n >= 2:
        reports.append(BoundReport(
            "regression_gen_bound", {"R": r, "h": h, "p": p, "n": n, "delta": delta, "C": 1.0},
            regression_gen_bound(r, h, p, n, delta), note="up to an unspecified absolute constant C",
        ))
        regime, t = margin_regime(gamma, r, h, delta)
        reports.append(BoundReport(
            "classification_gen_bound",
            {"gamma": gamma, "r": r, "h": h, "p": p, "n": n, "delta": delta, "delta1": delta},
            classification_gen_bound(gamma, r, h, p, n, delta),
            extra={"regime": regime, "regime_ratio": t, "rate": classification_rate(gamma, r, h, p, n)},
        ))
    return reports
