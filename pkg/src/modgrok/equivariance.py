"""Permutation actions on data and weights, and numerical equivariance checks.

A :class:`PermTriple` ``(s1, s2, s3)`` maps a point ``(a, b, c)`` to
``(s1[a], s2[b], s3[c])``. The matching weight action moves column ``j`` of the
a-half of ``W`` to column ``s1[j]``, column ``p + j`` to ``p + s2[j]``, and row
``j`` of ``V`` to row ``s3[j]``; then ``g(theta; x) == g(pi(theta); sigma(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from modgrok.data import ModAddDataset, TaskKind, apply_data_permutation
from modgrok.quadnet import QuadNetParams, forward_reg_batch, grad_reg, logits_batch


def _check_perm(s: np.ndarray, p: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.int64)
    if s.shape != (p,) or not np.array_equal(np.sort(s), np.arange(p)):
        raise ValueError(f"not a permutation of [0,{p}): {s!r}")
    return s


@dataclass(frozen=True, eq=False)
class PermTriple:
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray

    def __post_init__(self):
        p = len(self.s1)
        for name in ("s1", "s2", "s3"):
            arr = _check_perm(getattr(self, name), p)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        return len(self.s1)

    def __eq__(self, other) -> bool:
        return all(np.array_equal(x, y) for x, y in zip(self.parts, other.parts))

    @property
    def parts(self):
        return (self.s1, self.s2, self.s3)

    @classmethod
    def identity(cls, p: int) -> "PermTriple":
        r = np.arange(p)
        return cls(r, r.copy(), r.copy())

    @classmethod
    def random(cls, p: int, rng: np.random.Generator) -> "PermTriple":
        return cls(rng.permutation(p), rng.permutation(p), rng.permutation(p))

    @classmethod
    def cycle(cls, p: int, which: int = 3) -> "PermTriple":
        """Shift ``x -> x + 1 mod p`` on one coordinate, identity on the others."""
        parts = [np.arange(p) for _ in range(3)]
        parts[which - 1] = (np.arange(p) + 1) % p
        return cls(*parts)

    def compose(self, other: "PermTriple") -> "PermTriple":
        """``self o other``: apply ``other`` first."""
        return PermTriple(*(s[o] for s, o in zip(self.parts, other.parts)))

    def inverse(self) -> "PermTriple":
        return PermTriple(*(np.argsort(s) for s in self.parts))


def permute_weights(theta: QuadNetParams, sigma: PermTriple) -> QuadNetParams:
    """Weight action matched to :func:`~modgrok.data.apply_data_permutation`."""
    p = theta.p
    if sigma.p != p:
        raise ValueError(f"permutation acts on [0,{sigma.p}) but parameters have p={p}")
    W = np.empty_like(theta.W)
    V = np.empty_like(theta.V)
    W[:, sigma.s1] = theta.W[:, :p]
    W[:, p + sigma.s2] = theta.W[:, p:]
    V[sigma.s3] = theta.V
    return QuadNetParams(W, V)


def _triples(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.int64)
    return pts.reshape(-1, 3)


def check_forward_equivariance(theta: QuadNetParams, sigma: PermTriple, points) -> float:
    """max |g(theta; x) - g(pi theta; sigma x)| over the given (a, b, c) triples."""
    pts = _triples(points)
    a, b, c = pts.T
    moved = permute_weights(theta, sigma)
    lhs = forward_reg_batch(theta, a, b, c)
    rhs = forward_reg_batch(moved, sigma.s1[a], sigma.s2[b], sigma.s3[c])
    return float(np.max(np.abs(lhs - rhs), initial=0.0))


def check_class_forward_equivariance(theta: QuadNetParams, sigma: PermTriple, pairs) -> float:
    """Input-output version: f(pi theta; s1 a, s2 b)[s3 k] against f(theta; a, b)[k]."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a, b = pairs.T
    moved = permute_weights(theta, sigma)
    lhs = logits_batch(theta, a, b)
    rhs = logits_batch(moved, sigma.s1[a], sigma.s2[b])[:, sigma.s3]
    return float(np.max(np.abs(lhs - rhs), initial=0.0))


def check_gradient_equivariance(theta: QuadNetParams, sigma: PermTriple, points) -> float:
    """max deviation between pi(grad g(theta; x)) and grad g(pi theta; sigma x)."""
    moved = permute_weights(theta, sigma)
    worst = 0.0
    for a, b, c in _triples(points):
        lhs = permute_weights(grad_reg(theta, (a, b, c)), sigma)
        rhs = grad_reg(moved, (sigma.s1[a], sigma.s2[b], sigma.s3[c]))
        worst = max(worst, float(np.abs(lhs.W - rhs.W).max()), float(np.abs(lhs.V - rhs.V).max()))
    return worst


def param_deviation(x: QuadNetParams, y: QuadNetParams) -> float:
    return float(max(np.abs(x.W - y.W).max(), np.abs(x.V - y.V).max()))


def check_training_equivariance(config, sigma: PermTriple, train_ds: ModAddDataset,
                                test_ds: ModAddDataset | None = None, theta0: QuadNetParams | None = None,
                                h: int | None = None):
    """Run paired trajectories and report the per-step max parameter deviation.

    Run A trains from ``theta0`` on ``train_ds``; run B trains from
    ``pi(theta0)`` on ``sigma(train_ds)``. Entry t of the result is the largest
    absolute entry of ``pi(theta_t^A) - theta_t^B``.
    """
    from modgrok.trainer import init_params, train

    if theta0 is None:
        theta0 = init_params(train_ds.p, h or 4 * train_ds.p, config)
    test_a = test_ds if test_ds is not None else train_ds
    traj_a, traj_b = [], []
    train(config, train_ds, test_a, theta0, callback=lambda t, th, row: traj_a.append(th))
    train(
        config,
        apply_data_permutation(train_ds, sigma),
        apply_data_permutation(test_a, sigma),
        permute_weights(theta0, sigma),
        callback=lambda t, th, row: traj_b.append(th),
    )
    return [param_deviation(permute_weights(ta, sigma), tb) for ta, tb in zip(traj_a, traj_b)]


def sample_points(p: int, task: TaskKind, count: int, rng: np.random.Generator) -> np.ndarray:
    width = 3 if TaskKind(task) is TaskKind.REGRESSION else 2
    return rng.integers(0, p, size=(count, width))
