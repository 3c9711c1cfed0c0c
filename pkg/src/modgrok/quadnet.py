"""Two-layer quadratic network ``f(theta; (e_a, e_b)) = V (W (e_a, e_b))**2``.

``W`` has shape (h, 2p): columns ``0..p-1`` act on ``a`` and ``p..2p-1`` on ``b``.
``V`` has shape (p, h). The regression model is ``g(theta; a, b, c) = f_c``.

Gradients are written out by hand. Each point touches only columns ``a`` and
``b + p`` of ``W`` (and row ``c`` of ``V`` for regression), which the batch
routines exploit through sparse one-hot scatter matrices.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from modgrok.data import ModAddDataset, TaskKind


class LossKind(str, enum.Enum):
    SQUARE = "square"
    CROSS_ENTROPY = "cross_entropy"


TASK_FOR_LOSS = {LossKind.SQUARE: TaskKind.REGRESSION, LossKind.CROSS_ENTROPY: TaskKind.CLASSIFICATION}


@dataclass(frozen=True, eq=False)
class QuadNetParams:
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if W.ndim != 2 or V.ndim != 2 or W.shape[1] % 2:
            raise ValueError(f"bad parameter shapes W{W.shape} V{V.shape}")
        h, two_p = W.shape
        if V.shape != (two_p // 2, h):
            raise ValueError(f"V must have shape ({two_p // 2}, {h}), got {V.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)

    @property
    def p(self) -> int:
        return self.V.shape[0]

    @property
    def h(self) -> int:
        return self.V.shape[1]

    @classmethod
    def zeros(cls, p: int, h: int) -> "QuadNetParams":
        return cls(np.zeros((h, 2 * p)), np.zeros((p, h)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.V.ravel()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, p: int, h: int) -> "QuadNetParams":
        k = 2 * p * h
        return cls(vec[:k].reshape(h, 2 * p).copy(), vec[k:].reshape(p, h).copy())

    def __add__(self, other: "QuadNetParams") -> "QuadNetParams":
        return QuadNetParams(self.W + other.W, self.V + other.V)

    def __sub__(self, other: "QuadNetParams") -> "QuadNetParams":
        return QuadNetParams(self.W - other.W, self.V - other.V)

    def __mul__(self, factor: float) -> "QuadNetParams":
        return QuadNetParams(self.W * factor, self.V * factor)

    __rmul__ = __mul__

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.W * self.W) + np.sum(self.V * self.V)))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.W).all() and np.isfinite(self.V).all())

    def save(self, stem, task: str | None = None) -> None:
        """Write ``<stem>.bin`` (W then V, row-major float64) and ``<stem>.json``."""
        stem = Path(stem)
        self.flat().astype("<f8").tofile(stem.with_suffix(".bin"))
        meta = {"p": self.p, "h": self.h, "task": task}
        stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem) -> "QuadNetParams":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        vec = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
        return cls.from_flat(vec, meta["p"], meta["h"])


def linf_norm(theta: QuadNetParams) -> float:
    """Largest absolute entry over W and V jointly."""
    return float(max(np.abs(theta.W).max(initial=0.0), np.abs(theta.V).max(initial=0.0)))


def scale(theta: QuadNetParams, factor: float) -> QuadNetParams:
    return QuadNetParams(theta.W * factor, theta.V * factor)


# ---------------------------------------------------------------- forward

def _check_residues(p: int, *res) -> None:
    for r in res:
        if not 0 <= int(r) < p:
            raise ValueError(f"residue {r} outside [0, {p})")


def hidden_preactivation_rows(theta: QuadNetParams, a, b) -> np.ndarray:
    """``W (e_a, e_b)`` for a batch, one row per point: shape (n, h)."""
    WT = np.ascontiguousarray(theta.W.T)  # row gathers are much cheaper than column gathers
    return WT[np.asarray(a)] + WT[theta.p + np.asarray(b)]


def hidden_preactivation(theta: QuadNetParams, a, b) -> np.ndarray:
    """``W (e_a, e_b)`` for a batch: shape (h, n)."""
    return hidden_preactivation_rows(theta, a, b).T


def forward_class(theta: QuadNetParams, a: int, b: int) -> np.ndarray:
    """Logit vector (length p) for the pair (a, b)."""
    _check_residues(theta.p, a, b)
    pre = theta.W[:, a] + theta.W[:, theta.p + b]
    return theta.V @ (pre * pre)


def forward_reg(theta: QuadNetParams, a: int, b: int, c: int) -> float:
    _check_residues(theta.p, a, b, c)
    pre = theta.W[:, a] + theta.W[:, theta.p + b]
    return float(theta.V[c] @ (pre * pre))


def logits_batch(theta: QuadNetParams, a, b) -> np.ndarray:
    """Logits for many pairs, shape (n, p)."""
    pre = hidden_preactivation_rows(theta, a, b)
    return (pre * pre) @ theta.V.T


def forward_reg_batch(theta: QuadNetParams, a, b, c) -> np.ndarray:
    pre = hidden_preactivation_rows(theta, a, b)
    return np.einsum("nh,nh->n", pre * pre, theta.V[np.asarray(c)])


def forward_onehot(theta: QuadNetParams, x: np.ndarray) -> np.ndarray:
    """Reference forward pass on explicit one-hot rows ``x`` of width 2p (or 3p).

    With 2p columns the result is the (n, p) logit matrix; with 3p columns the
    trailing block selects the output coordinate and a length-n vector is returned.
    """
    p = theta.p
    x = np.atleast_2d(x)
    logits = ((theta.W @ x[:, : 2 * p].T) ** 2).T @ theta.V.T
    if x.shape[1] == 3 * p:
        return np.sum(logits * x[:, 2 * p:], axis=1)
    return logits


def predict_classes(theta: QuadNetParams, a, b) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` resolves ties to the smallest index."""
    return np.argmax(logits_batch(theta, a, b), axis=1)


# ---------------------------------------------------------------- gradients

def grad_reg(theta: QuadNetParams, point, weight: float = 1.0) -> QuadNetParams:
    """``weight * grad_theta g(theta; (a, b, c))``."""
    a, b, c = int(point[0]), int(point[1]), int(point[2])
    _check_residues(theta.p, a, b, c)
    p = theta.p
    pre = theta.W[:, a] + theta.W[:, p + b]
    gW = np.zeros_like(theta.W)
    gV = np.zeros_like(theta.V)
    dpre = 2.0 * weight * theta.V[c] * pre
    gW[:, a] = dpre
    gW[:, p + b] = dpre
    gV[c] = weight * pre * pre
    return QuadNetParams(gW, gV)


def grad_class_logit(theta: QuadNetParams, a: int, b: int, k: int, weight: float = 1.0) -> QuadNetParams:
    """Gradient of logit ``f_k(theta; (a, b))``; identical to ``grad_reg`` at c = k."""
    return grad_reg(theta, (a, b, k), weight)


def onehot_matrix(idx: np.ndarray, p: int) -> sp.csr_matrix:
    n = len(idx)
    return sp.csr_matrix((np.ones(n), (np.arange(n), np.asarray(idx))), shape=(n, p))


class BatchCache:
    """Sparse scatter matrices for one dataset, reused across training steps."""

    def __init__(self, ds: ModAddDataset):
        self.ds = ds
        self.A = onehot_matrix(ds.a, ds.p)
        self.B = onehot_matrix(ds.b, ds.p)
        self.C = onehot_matrix(ds.c, ds.p) if ds.c is not None else None


def ce_loss_and_dlogits(logits: np.ndarray, labels: np.ndarray):
    """Per-point cross-entropy and a rescaled logit gradient.

    Returns ``(losses, D, log_scale)`` with ``dloss_i/dlogits_i = exp(log_scale) * D_i``.
    Losses use ``m + log1p(sum exp(d - m))`` on logit gaps ``d = z - z_y`` and the
    correct-class entry is minus the sum of the wrong-class probabilities, so
    neither under- nor overflows once the margins are in the hundreds.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    d = logits - logits[rows, labels][:, None]
    top = d.argmax(axis=1)
    m = d[rows, top]
    e = np.exp(d - m[:, None])
    e[rows, top] = 0.0
    losses = m + np.log1p(e.sum(axis=1))
    logq = d - losses[:, None]  # log softmax probabilities
    logq[rows, labels] = -np.inf
    log_scale = float(logq.max())
    if not np.isfinite(log_scale):  # p == 1 or empty
        return losses, np.zeros_like(logits), 0.0
    D = np.exp(logq - log_scale)
    D[rows, labels] = -D.sum(axis=1)
    return losses, D, log_scale


def grad_batch_scaled(theta: QuadNetParams, ds: ModAddDataset, loss, cache: BatchCache | None = None):
    """Like :func:`grad_batch` but returns ``(loss, G, outputs, log_scale)`` with
    ``gradient = exp(log_scale) * G``.

    The rescaling keeps the gradient direction representable after the
    cross-entropy saturates, which normalized GD relies on.
    """
    loss = LossKind(loss)
    if TASK_FOR_LOSS[loss] is not ds.task:
        raise ValueError(f"{loss.value} loss needs a {TASK_FOR_LOSS[loss].value} dataset, got {ds.task.value}")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if cache is None or cache.ds is not ds:
        cache = BatchCache(ds)
    n = len(ds)
    pre = hidden_preactivation_rows(theta, ds.a, ds.b)  # (n, h)
    act = pre * pre
    if loss is LossKind.SQUARE:
        Vc = theta.V[ds.c]  # (n, h)
        out = np.einsum("nh,nh->n", act, Vc)
        resid = out - ds.labels
        value = float(np.mean(resid * resid))
        r = ((2.0 / n) * resid)[:, None]
        gV = cache.C.T @ (act * r)
        dpre = 2.0 * pre * (Vc * r)
        log_scale = 0.0
    else:
        out = act @ theta.V.T  # (n, p)
        losses, dlogits, log_scale = ce_loss_and_dlogits(out, ds.labels)
        value = float(np.mean(losses))
        dlogits /= n
        gV = dlogits.T @ act
        dpre = 2.0 * pre * (dlogits @ theta.V)
    gW = np.hstack([(cache.A.T @ dpre).T, (cache.B.T @ dpre).T])
    return value, QuadNetParams(gW, np.asarray(gV)), out, log_scale


def grad_batch(theta: QuadNetParams, ds: ModAddDataset, loss, cache: BatchCache | None = None):
    """Mean data loss over ``ds`` and its exact gradient.

    Returns ``(loss, gradient, outputs)`` where ``outputs`` is the per-point
    prediction g (regression) or the (n, p) logit matrix (classification).
    """
    value, G, out, log_scale = grad_batch_scaled(theta, ds, loss, cache)
    if log_scale != 0.0:
        G = G * math.exp(log_scale)
    return value, G, out


def sorted_sum(x: np.ndarray, axis=None) -> np.ndarray:
    """Sum after sorting along ``axis``: the result depends only on the multiset of terms."""
    if axis is None:
        return np.sort(x, axis=None).sum()
    return np.sort(x, axis=axis).sum(axis=axis)


def _group_sum(values: np.ndarray, keys: np.ndarray, p: int) -> np.ndarray:
    # values: (h, n) -> (h, p), summing columns that share a key
    out = np.zeros((values.shape[0], p))
    for j in range(p):
        sel = values[:, keys == j]
        if sel.shape[1]:
            out[:, j] = sorted_sum(sel, axis=1)
    return out


def grad_batch_invariant(theta: QuadNetParams, ds: ModAddDataset, loss, cache=None):
    """Order-invariant twin of :func:`grad_batch_scaled`.

    Every reduction over data points, classes or neurons sorts its terms
    first, so relabelling residues and reordering the dataset leaves each
    result bit-identical. Costs O(n p h) memory; meant for small-p checks.
    """
    loss = LossKind(loss)
    if TASK_FOR_LOSS[loss] is not ds.task:
        raise ValueError(f"{loss.value} loss needs a {TASK_FOR_LOSS[loss].value} dataset, got {ds.task.value}")
    n, p = len(ds), ds.p
    if n == 0:
        raise ValueError("empty dataset")
    pre = hidden_preactivation(theta, ds.a, ds.b)  # (h, n)
    act = pre * pre
    if loss is LossKind.SQUARE:
        Vc = theta.V[ds.c].T  # (h, n)
        out = sorted_sum(act * Vc, axis=0)
        resid = out - ds.labels
        value = float(sorted_sum(resid * resid)) / n
        r = (2.0 / n) * resid
        gV = _group_sum(act * r, ds.c, p).T
        dpre = 2.0 * pre * (Vc * r)
        log_scale = 0.0
    else:
        out = sorted_sum(theta.V[:, :, None] * act[None, :, :], axis=1).T  # (n, p)
        rows = np.arange(n)
        d = out - out[rows, ds.labels][:, None]
        top = d.argmax(axis=1)
        m = d[rows, top]
        e = np.exp(d - m[:, None])
        e[rows, top] = 0.0
        losses = m + np.log1p(sorted_sum(e, axis=1))
        value = float(sorted_sum(losses)) / n
        logq = d - losses[:, None]
        logq[rows, ds.labels] = -np.inf
        log_scale = float(logq.max())
        if not np.isfinite(log_scale):
            return value, QuadNetParams.zeros(p, theta.h), out, 0.0
        D = np.exp(logq - log_scale)
        D[rows, ds.labels] = -sorted_sum(D, axis=1)
        D /= n
        gV = sorted_sum(D.T[:, None, :] * act[None, :, :], axis=2)  # (p, h)
        dact = sorted_sum(theta.V[:, :, None] * D.T[:, None, :], axis=0)  # (h, n)
        dpre = 2.0 * pre * dact
    gW = np.hstack([_group_sum(dpre, ds.a, p), _group_sum(dpre, ds.b, p)])
    return value, QuadNetParams(gW, gV), out, log_scale


def batch_loss(theta: QuadNetParams, ds: ModAddDataset, loss) -> float:
    loss = LossKind(loss)
    if loss is LossKind.SQUARE:
        resid = forward_reg_batch(theta, ds.a, ds.b, ds.c) - ds.labels
        return float(np.mean(resid * resid))
    return float(np.mean(ce_loss_and_dlogits(logits_batch(theta, ds.a, ds.b), ds.labels)[0]))


# ---------------------------------------------------------------- margins / accuracy

def margins(theta: QuadNetParams, ds: ModAddDataset) -> tuple[float, np.ndarray]:
    """Minimum margin ``q_min`` and the per-point margins f_y - max_{y' != y} f_y'."""
    if ds.is_regression:
        raise ValueError("margins are defined for classification datasets")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    logits = logits_batch(theta, ds.a, ds.b)
    rows = np.arange(len(ds))
    correct = logits[rows, ds.labels].copy()
    logits[rows, ds.labels] = -np.inf
    q = correct - logits.max(axis=1)
    return float(q.min()), q


def margin(theta: QuadNetParams, ds: ModAddDataset) -> float:
    return margins(theta, ds)[0]


def normalized_margin(theta: QuadNetParams, ds: ModAddDataset) -> float:
    m = linf_norm(theta)
    if m == 0:
        return 0.0
    return margin(scale(theta, 1.0 / m), ds)


def accuracy(theta: QuadNetParams, ds: ModAddDataset) -> float:
    """Argmax accuracy.

    Classification: fraction of points whose argmax logit is the label.
    Regression: the classifier is ``argmax_c g(a, b, c)``; it is scored on the
    (a, b) pairs whose positive triple ``(a, b, (a+b) mod p)`` belongs to ``ds``,
    so a train/test split of triples induces a partition of the pairs.
    """
    if len(ds) == 0:
        return float("nan")
    if not ds.is_regression:
        return float(np.mean(predict_classes(theta, ds.a, ds.b) == ds.labels))
    pos = ds.labels > 0
    if not pos.any():
        return float("nan")
    a, b = ds.a[pos], ds.b[pos]
    return float(np.mean(predict_classes(theta, a, b) == (a + b) % ds.p))
