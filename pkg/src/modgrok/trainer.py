"""Full-batch gradient descent with an l-infinity penalty.

Two update rules are supported. Plain GD steps along ``grad L + lambda * s``;
normalized GD divides the data-loss gradient by its global l2 norm first and
adds the penalty subgradient ``s`` unnormalized.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from modgrok.data import ModAddDataset, gen_full_population
from modgrok.ntk import entk_drift, entk_for
from modgrok.quadnet import (
    TASK_FOR_LOSS,
    BatchCache,
    LossKind,
    QuadNetParams,
    accuracy,
    batch_loss,
    grad_batch_invariant,
    grad_batch_scaled,
    linf_norm,
    sorted_sum,
)
from modgrok.rng import stream

NORM_GUARD = 1e-12
TIE_RTOL = 1e-12
GUARD_ON_DIRECTION = True  # also normalize when only the rescaled direction is above NORM_GUARD
METRICS_HEADER = ("step", "train_loss", "test_loss", "train_acc", "test_acc", "linf_norm", "grad_l2", "entk_drift")


class InitScheme(str, enum.Enum):
    UNIFORM_FAN_IN = "uniform_fan_in"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, loss: float, grad_norm: float, last_row: Optional["MetricsRow"] = None):
        super().__init__(f"non-finite loss at step {step}: loss={loss!r}, grad_l2={grad_norm!r}")
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm
        self.last_row = last_row


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.0
    steps: int = 1000
    lambda_inf: float = 0.0
    init_scale: float = 1.0
    init_scheme: InitScheme = InitScheme.UNIFORM_FAN_IN
    loss: LossKind = LossKind.SQUARE
    normalized: bool = False
    seed: int = 0
    entk_probe_every: Optional[int] = None
    entk_probe_points: int = 2000
    eval_every: int = 1  # metrics rows are written on these steps and on the last one
    order_invariant: bool = False  # sorted reductions; bit-exact under relabelling, slower

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "init_scheme", InitScheme(self.init_scheme))
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if self.lambda_inf < 0:
            raise ValueError(f"lambda_inf must be >= 0, got {self.lambda_inf}")
        if self.init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {self.init_scale}")
        if self.entk_probe_every is not None and self.entk_probe_every < 1:
            raise ValueError("entk_probe_every must be a positive integer or None")
        if self.entk_probe_points < 1 or self.eval_every < 1:
            raise ValueError("entk_probe_points and eval_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss"] = self.loss.value
        out["init_scheme"] = self.init_scheme.value
        return out


@dataclass(frozen=True)
class MetricsRow:
    step: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    linf_norm: float
    grad_l2: float
    entk_drift: Optional[float] = None

    def as_csv(self) -> list[str]:
        return [str(self.step)] + [
            "" if v is None else repr(float(v))
            for v in (self.train_loss, self.test_loss, self.train_acc, self.test_acc,
                      self.linf_norm, self.grad_l2, self.entk_drift)
        ]


def init_params(p: int, h: int, config: TrainConfig) -> QuadNetParams:
    """Uniform fan-in init scaled by ``init_scale``: W then V from one stream."""
    rng = stream(config.seed, "init")
    alpha = config.init_scale
    bw, bv = math.sqrt(1.0 / (2 * p)), math.sqrt(1.0 / h)
    W = alpha * rng.uniform(-bw, bw, size=(h, 2 * p))
    V = alpha * rng.uniform(-bv, bv, size=(p, h))
    return QuadNetParams(W, V)


def linf_reg_subgradient(theta: QuadNetParams, lambda_inf: float) -> QuadNetParams:
    """Subgradient of ``lambda * ||theta||_inf`` with mass split over near-max entries."""
    top = linf_norm(theta)
    if top == 0.0 or lambda_inf == 0.0:
        return QuadNetParams.zeros(theta.p, theta.h)
    thresh = top * (1.0 - TIE_RTOL)
    mW = np.abs(theta.W) >= thresh
    mV = np.abs(theta.V) >= thresh
    share = lambda_inf / float(mW.sum() + mV.sum())
    return QuadNetParams(share * mW * np.sign(theta.W), share * mV * np.sign(theta.V))


def probe_points(train_ds: ModAddDataset, count: int, seed: int) -> ModAddDataset:
    """Fixed random subset of the full population used for eNTK drift."""
    pop = gen_full_population(train_ds.p, train_ds.task)
    k = min(len(pop), count)
    idx = np.sort(stream(seed, "probe").choice(len(pop), size=k, replace=False))
    return pop.subset(idx, pop.provenance)


def _train_accuracy(theta, ds, outputs):
    if ds.is_regression:
        return accuracy(theta, ds)
    return float(np.mean(np.argmax(outputs, axis=1) == ds.labels))


def train(
    config: TrainConfig,
    train_ds: ModAddDataset,
    test_ds: Optional[ModAddDataset],
    theta0: Optional[QuadNetParams] = None,
    callback: Optional[Callable[[int, QuadNetParams, Optional[MetricsRow]], None]] = None,
    h: Optional[int] = None,
) -> tuple[QuadNetParams, list[MetricsRow]]:
    """Run ``config.steps`` updates and return the final parameters and metrics.

    Row ``t`` describes ``theta_t`` (before update ``t + 1``), so rows cover
    steps ``0..steps``. ``callback(t, theta_t, row)`` fires on every step;
    ``row`` is None on steps that are not logged.
    """
    if TASK_FOR_LOSS[config.loss] is not train_ds.task:
        raise ValueError(f"{config.loss.value} loss cannot train on a {train_ds.task.value} dataset")
    if theta0 is None:
        theta0 = init_params(train_ds.p, h if h is not None else 4 * train_ds.p, config)
    if theta0.p != train_ds.p:
        raise ValueError(f"parameters have p={theta0.p} but the dataset has p={train_ds.p}")
    has_test = test_ds is not None and len(test_ds) > 0

    probe = K0 = None
    if config.entk_probe_every is not None:
        probe = probe_points(train_ds, config.entk_probe_points, config.seed)
        K0 = entk_for(theta0, probe)

    cache = BatchCache(train_ds)
    grad_fn = grad_batch_invariant if config.order_invariant else grad_batch_scaled
    theta = theta0
    rows: list[MetricsRow] = []
    last_row = None
    for t in range(config.steps + 1):
        loss, grad, out, log_scale = grad_fn(theta, train_ds, config.loss, cache)
        if config.order_invariant:
            flat = grad.flat()
            dir_norm = math.sqrt(float(sorted_sum(flat * flat)))
        else:
            dir_norm = grad.l2_norm()
        gnorm = dir_norm * math.exp(log_scale) if dir_norm > 0 else 0.0
        if not math.isfinite(loss) or not math.isfinite(dir_norm):
            raise TrainingDiverged(t, loss, gnorm, last_row)

        row = None
        if t % config.eval_every == 0 or t == config.steps:
            drift = None
            if probe is not None and (t % config.entk_probe_every == 0 or t == config.steps):
                drift = entk_drift(entk_for(theta, probe), K0)
            row = MetricsRow(
                step=t,
                train_loss=loss,
                test_loss=batch_loss(theta, test_ds, config.loss) if has_test else float("nan"),
                train_acc=_train_accuracy(theta, train_ds, out),
                test_acc=accuracy(theta, test_ds) if has_test else float("nan"),
                linf_norm=linf_norm(theta),
                grad_l2=gnorm,
                entk_drift=drift,
            )
            rows.append(row)
            last_row = row
        if callback is not None:
            callback(t, theta, row)
        if t == config.steps:
            break

        if config.normalized and (gnorm >= NORM_GUARD or GUARD_ON_DIRECTION and dir_norm >= NORM_GUARD):
            grad = grad * (1.0 / dir_norm)
        elif log_scale != 0.0:
            grad = grad * math.exp(log_scale)
        step = grad + linf_reg_subgradient(theta, config.lambda_inf) if config.lambda_inf else grad
        theta = theta - step * config.lr
    return theta, rows


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[MetricsRow]:
    def val(s):
        return None if s == "" else float(s)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), *(val(x) for x in r[1:])) for r in reader]


def grokking_summary(rows: list[MetricsRow], target: float = 0.99) -> dict:
    """First step with perfect train accuracy, test accuracy there, and when test crosses ``target``."""
    t1 = next((r for r in rows if r.train_acc >= 1.0), None)
    t2 = next((r for r in rows if r.test_acc >= target), None)
    return {
        "train_perfect_step": None if t1 is None else t1.step,
        "test_acc_at_train_perfect": None if t1 is None else t1.test_acc,
        "test_target_step": None if t2 is None else t2.step,
        "final_test_acc": rows[-1].test_acc if rows else None,
    }


def grok_run(
    config: TrainConfig,
    train_ds: ModAddDataset,
    test_ds: Optional[ModAddDataset],
    theta0: Optional[QuadNetParams] = None,
    h: Optional[int] = None,
) -> tuple[QuadNetParams, list[MetricsRow], dict]:
    """Train and measure eNTK movement before and after the first perfect-train step.

    The probe kernel is evaluated at init, at ``t1`` (first logged row with
    train accuracy 1.0) and at the end. The returned dict holds the
    :func:`grokking_summary` fields plus ``drift_before_t1``,
    ``drift_after_t1`` and their ``ratio`` (None if ``t1`` never happens).
    """
    snaps: dict = {}

    def keep(t, theta, row):
        if t == 0:
            snaps["init"] = theta
        if row is not None and "t1" not in snaps and row.train_acc >= 1.0:
            snaps["t1"] = theta

    theta, rows = train(config, train_ds, test_ds, theta0=theta0, callback=keep, h=h)
    info = grokking_summary(rows)
    info.update(probe_points=None, drift_before_t1=None, drift_after_t1=None, ratio=None)
    if "t1" in snaps:
        probe = probe_points(train_ds, config.entk_probe_points, config.seed)
        K0, K1, Kend = (entk_for(th, probe) for th in (snaps["init"], snaps["t1"], theta))
        before, after = entk_drift(K1, K0), entk_drift(Kend, K1)
        info.update(probe_points=len(probe), drift_before_t1=before, drift_after_t1=after,
                    ratio=after / before if before > 0 else None)
    return theta, rows, info
