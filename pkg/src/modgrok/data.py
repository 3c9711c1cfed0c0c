"""Modular-addition populations for the regression and classification tasks.

Residues are kept as integer arrays; one-hot vectors are never materialized
here (the p=113 regression population alone has 1.4M points).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from modgrok.rng import stream


class InvalidModulusError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"

    def population_size(self, p: int) -> int:
        return p**3 if self is TaskKind.REGRESSION else p**2


class DataPoint(NamedTuple):
    a: int
    b: int
    c: Optional[int]
    label: float


@dataclass(frozen=True)
class Provenance:
    kind: str  # "full" | "sampled" | "complement" | "permuted" | "file"
    seed: Optional[int] = None
    n: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ModAddDataset:
    """Ordered collection of modular-addition points.

    For regression ``c`` holds the queried output residue and ``labels`` the
    target ``p * 1(a + b = c mod p)``. For classification ``c`` is ``None`` and
    ``labels`` holds the class index ``(a + b) mod p``.
    """

    p: int
    task: TaskKind
    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray]
    labels: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("full"))

    def __post_init__(self):
        for arr in (self.a, self.b, self.c, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.a.shape[0])

    def __getitem__(self, i: int) -> DataPoint:
        c = None if self.c is None else int(self.c[i])
        label = self.labels[i]
        label = float(label) if self.task is TaskKind.REGRESSION else int(label)
        return DataPoint(int(self.a[i]), int(self.b[i]), c, label)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModAddDataset):
            return NotImplemented
        if self.p != other.p or self.task != other.task or len(self) != len(other):
            return False
        same_c = (self.c is None and other.c is None) or (
            self.c is not None and other.c is not None and np.array_equal(self.c, other.c)
        )
        return (
            same_c
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def is_regression(self) -> bool:
        return self.task is TaskKind.REGRESSION

    def keys(self) -> np.ndarray:
        """Flat integer index of every point inside the full population."""
        p = self.p
        if self.is_regression:
            return (self.a * p + self.b) * p + self.c
        return self.a * p + self.b

    def subset(self, idx: np.ndarray, provenance: Provenance) -> "ModAddDataset":
        idx = np.asarray(idx, dtype=np.int64)
        c = None if self.c is None else self.c[idx].copy()
        return ModAddDataset(
            self.p, self.task, self.a[idx].copy(), self.b[idx].copy(), c,
            self.labels[idx].copy(), provenance,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.is_regression:
                w.writerow(["a", "b", "c", "label"])
                for a, b, c, y in zip(self.a, self.b, self.c, self.labels):
                    w.writerow([int(a), int(b), int(c), int(y)])
            else:
                w.writerow(["a", "b", "label"])
                for a, b, y in zip(self.a, self.b, self.labels):
                    w.writerow([int(a), int(b), int(y)])

    @classmethod
    def from_csv(cls, path, p: int) -> "ModAddDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        arr = np.array(body, dtype=np.int64).reshape(len(body), len(header))
        if header == ["a", "b", "c", "label"]:
            task, c = TaskKind.REGRESSION, arr[:, 2]
            labels = arr[:, 3].astype(np.float64)
        elif header == ["a", "b", "label"]:
            task, c, labels = TaskKind.CLASSIFICATION, None, arr[:, 2]
        else:
            raise ValueError(f"unrecognised dataset header {header!r} in {path}")
        if arr.size and (arr[:, :-1].max() >= p or arr[:, :-1].min() < 0):
            raise ValueError(f"residue out of range for p={p} in {Path(path).name}")
        return cls(p, task, arr[:, 0].copy(), arr[:, 1].copy(), c, labels, Provenance("file"))


def _check_modulus(p: int) -> None:
    if not isinstance(p, (int, np.integer)) or p < 2:
        raise InvalidModulusError(f"modulus must be an integer >= 2, got {p!r}")


def gen_full_population(p: int, task: TaskKind) -> ModAddDataset:
    """All N points in lexicographic (a, b[, c]) order."""
    _check_modulus(p)
    task = TaskKind(task)
    r = np.arange(p, dtype=np.int64)
    if task is TaskKind.REGRESSION:
        a, b, c = (g.ravel() for g in np.meshgrid(r, r, r, indexing="ij"))
        labels = np.where((a + b) % p == c, float(p), 0.0)
        return ModAddDataset(p, task, a, b, c, labels, Provenance("full"))
    a, b = (g.ravel() for g in np.meshgrid(r, r, indexing="ij"))
    return ModAddDataset(p, task, a, b, None, (a + b) % p, Provenance("full"))


def sample_split(pop: ModAddDataset, n: int, seed: int) -> tuple[ModAddDataset, ModAddDataset]:
    """Uniform sample of ``n`` points without replacement and its complement.

    Both halves keep the population's lexicographic order.
    """
    N = len(pop)
    if not 1 <= n <= N:
        raise ValueError(f"train size must lie in [1, {N}], got {n}")
    order = stream(seed, "split").permutation(N)
    chosen = np.zeros(N, dtype=bool)
    chosen[order[:n]] = True
    train = pop.subset(np.flatnonzero(chosen), Provenance("sampled", seed, n))
    test = pop.subset(np.flatnonzero(~chosen), Provenance("complement", seed, N - n))
    return train, test


def apply_data_permutation(ds: ModAddDataset, sigma) -> ModAddDataset:
    """Map every point through a :class:`~modgrok.equivariance.PermTriple`.

    Regression: (a, b, c) -> (s1 a, s2 b, s3 c) with the label unchanged.
    Classification: inputs through (s1, s2) and the class label through s3.
    """
    if sigma.p != ds.p:
        raise ValueError(f"permutation acts on [0,{sigma.p}) but dataset has p={ds.p}")
    s1, s2, s3 = sigma.s1, sigma.s2, sigma.s3
    if ds.is_regression:
        return ModAddDataset(
            ds.p, ds.task, s1[ds.a], s2[ds.b], s3[ds.c], ds.labels.copy(), Provenance("permuted")
        )
    return ModAddDataset(ds.p, ds.task, s1[ds.a], s2[ds.b], None, s3[ds.labels], Provenance("permuted"))


def default_train_size(p: int, task: TaskKind) -> int:
    """Training-set sizes used by the presets: 2 p^2.25 (regression), 2 p^(5/3)."""
    exponent = 2.25 if TaskKind(task) is TaskKind.REGRESSION else 5.0 / 3.0
    return math.ceil(2.0 * p**exponent)


def most_frequent_c_count(ds: ModAddDataset) -> int:
    if not ds.is_regression:
        raise ValueError("rho_c is defined for regression datasets")
    return int(np.bincount(ds.c, minlength=ds.p).max())
