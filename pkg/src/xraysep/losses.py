"""The five-term composite training loss and its pieces.

Every component is evaluated per patch and averaged over the batch, so the
weights do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import frobenius_norm, pearson, sum_squares
from .tensor import Tensor, mean, mul


@dataclass(frozen=True)
class LossWeights:
    """Weights of the mixed-reconstruction, recombination, energy and
    dis-correlation terms, relative to the RGB reconstruction term."""

    lambda1: float = 3.0
    lambda2: float = 5.0
    lambda3: float = 2.0
    lambda4: float = 0.3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


ENERGY_NORMS = ("sqrt", "count", "none")


@dataclass(frozen=True)
class LossOptions:
    squared_norms: bool = False      # square the L1/L2/L3 norms (ablation)
    energy_norm: str = "sqrt"        # divide L4 by sqrt(n) | n ("count") | 1 ("none"), n = patch elements

    def __post_init__(self):
        if self.energy_norm not in ENERGY_NORMS:
            raise ValueError(f"energy_norm must be one of {ENERGY_NORMS}")


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    l4: float
    l5: float
    total: float

    FIELDS = ("l1", "l2", "l3", "l4", "l5", "total")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}


def _dist(a: Tensor, b: Tensor, squared: bool) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return sum_squares(d, per_sample=True) if squared else frobenius_norm(d, per_sample=True)


def loss_l1(r1: Tensor, r1_hat: Tensor, r2: Tensor, r2_hat: Tensor, squared: bool = False) -> Tensor:
    """RGB reconstruction error of both sides."""
    return mean(_dist(r1, r1_hat, squared) + _dist(r2, r2_hat, squared))


def loss_l2(x: Tensor, x_hat: Tensor, squared: bool = False) -> Tensor:
    """Error of the mixed X-ray decoded from the summed features."""
    return mean(_dist(x, x_hat, squared))


def loss_l3(x: Tensor, x_bar: Tensor, squared: bool = False) -> Tensor:
    """Error of the sum of the two separated X-rays against the mix."""
    return mean(_dist(x, x_bar, squared))


def loss_l4(x1_hat: Tensor, x2_hat: Tensor, norm: str = "none") -> Tensor:
    """Energy of the two separated X-rays (squared norms).

    With ``norm="sqrt"`` the energy grows with patch size at the same rate as
    the unsquared norms of the other terms, so the weights carry over between
    patch sizes.
    """
    e = sum_squares(x1_hat, per_sample=True) + sum_squares(x2_hat, per_sample=True)
    n = x1_hat.size // x1_hat.shape[0]
    if norm == "sqrt":
        e = mul(e, 1.0 / np.sqrt(n))
    elif norm == "count":
        e = mul(e, 1.0 / n)
    elif norm != "none":
        raise ValueError(f"unknown energy normalization {norm!r}")
    return mean(e)


def loss_l5(f1: Tensor, f2: Tensor) -> Tensor:
    """Squared Pearson correlation between the two sides' feature maps."""
    c = pearson(f1, f2, per_sample=True)
    return mean(c * c)


def loss_total(x: Tensor, r1: Tensor, r2: Tensor, out: dict[str, Tensor],
               weights: LossWeights = LossWeights(),
               options: LossOptions = LossOptions()) -> tuple[Tensor, LossBreakdown]:
    """Weighted total over the outputs of one ``forward_graph`` call.

    Returns the scalar to backpropagate and the per-component values.
    """
    sq = options.squared_norms
    l1 = loss_l1(r1, out["r1_hat"], r2, out["r2_hat"], sq)
    l2 = loss_l2(x, out["x_hat"], sq)
    l3 = loss_l3(x, out["x_bar"], sq)
    l4 = loss_l4(out["x1_hat"], out["x2_hat"], options.energy_norm)
    l5 = loss_l5(out["f1"], out["f2"])
    w1, w2, w3, w4 = weights.as_tuple()
    total = l1 + mul(l2, w1) + mul(l3, w2) + mul(l4, w3) + mul(l5, w4)
    parts = LossBreakdown(l1.item(), l2.item(), l3.item(), l4.item(), l5.item(), total.item())
    return total, parts
