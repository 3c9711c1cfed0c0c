"""Closed-form Fourier weights that interpolate modular addition exactly.

For frequency k write ``C(x) = cos(2 pi k x / p)`` and ``S(x) = sin(2 pi k x / p)``.
Neuron block k (eight neurons) uses first-layer rows

    (C, C) (C, -C) (S, S) (S, -S) (S, C) (S, -C) (C, S) (-C, S)

over the (a, b) halves, and second-layer row q gets the coefficients

    C(q) -C(q) -C(q) C(q) S(q) -S(q) S(q) -S(q).

The squared activations telescope to ``4 cos(2 pi k (a + b - q) / p)`` and the
sum over k = 0..p-1 gives ``4p * 1(a + b = q mod p)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from modgrok.quadnet import QuadNetParams


class Variant(str, enum.Enum):
    EIGHT_P = "8p"
    FOUR_P = "4p"


@dataclass(frozen=True)
class ConstructionSpec:
    p: int
    variant: Variant = Variant.EIGHT_P
    output_scale: float = 1.0

    def __post_init__(self):
        if self.p < 3 or self.p % 2 == 0:
            raise ValueError(f"the Fourier construction needs an odd modulus >= 3, got p={self.p}")
        object.__setattr__(self, "variant", Variant(self.variant))


# sign patterns of the eight neurons in a frequency block:
# (trig on a, sign on a, trig on b, sign on b, trig on q, sign on q)
_BLOCK = (
    ("cos", +1, "cos", +1, "cos", +1),
    ("cos", +1, "cos", -1, "cos", -1),
    ("sin", +1, "sin", +1, "cos", -1),
    ("sin", +1, "sin", -1, "cos", +1),
    ("sin", +1, "cos", +1, "sin", +1),
    ("sin", +1, "cos", -1, "sin", -1),
    ("cos", +1, "sin", +1, "sin", +1),
    ("cos", -1, "sin", +1, "sin", -1),
)


def _block(p: int, k: int, rows: range, v_factor: float):
    r = np.arange(p)
    phase = 2.0 * np.pi * k * r / p
    trig = {"cos": np.cos(phase), "sin": np.sin(phase)}
    W = np.zeros((len(rows), 2 * p))
    V = np.zeros((p, len(rows)))
    for j, i in enumerate(rows):
        ta, sa, tb, sb, tq, sq = _BLOCK[i]
        W[j, :p] = sa * trig[ta]
        W[j, p:] = sb * trig[tb]
        V[:, j] = v_factor * sq * trig[tq]
    return W, V


def build_8p(spec: ConstructionSpec) -> QuadNetParams:
    """Width-8p construction; every logit equals ``output_scale * 4p * 1(a+b=q)``."""
    p = spec.p
    Ws, Vs = zip(*(_block(p, k, range(8), spec.output_scale) for k in range(p)))
    return QuadNetParams(np.vstack(Ws), np.hstack(Vs))


def build_4p(spec: ConstructionSpec) -> QuadNetParams:
    """Half-spectrum construction of width exactly 4p.

    Frequencies k and p - k contribute equal cosines, so k = 1..(p-1)/2 are kept
    with doubled second-layer coefficients. The k = 0 block only needs its four
    cosine neurons (the sine neurons have zero output weight there), giving
    ``4 + 8 (p - 1) / 2 = 4p`` neurons.
    """
    p = spec.p
    blocks = [_block(p, 0, range(4), spec.output_scale)]
    blocks += [_block(p, k, range(8), 2.0 * spec.output_scale) for k in range(1, (p - 1) // 2 + 1)]
    Ws, Vs = zip(*blocks)
    return QuadNetParams(np.vstack(Ws), np.hstack(Vs))


def build(spec: ConstructionSpec) -> QuadNetParams:
    return build_8p(spec) if spec.variant is Variant.EIGHT_P else build_4p(spec)


def duplicate_shrink(theta: QuadNetParams, h_target: int) -> QuadNetParams:
    """Copy each neuron ``k = h_target // h`` times, scaling copies by ``k**(-1/3)``.

    The output is unchanged because the model is 3-homogeneous per neuron;
    leftover neurons (``h_target mod h``) are zero.
    """
    h = theta.h
    if h_target < h:
        raise ValueError(f"target width {h_target} is smaller than the source width {h}")
    k = h_target // h
    if k == 1 and h_target == h:
        return QuadNetParams(theta.W.copy(), theta.V.copy())
    shrink = float(k) ** (-1.0 / 3.0)
    W = np.zeros((h_target, theta.W.shape[1]))
    V = np.zeros((theta.p, h_target))
    W[: k * h] = np.tile(theta.W * shrink, (k, 1))
    V[:, : k * h] = np.tile(theta.V * shrink, (1, k))
    return QuadNetParams(W, V)
