from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch

from hierrisk.config import ConfigError, HyperParams
from hierrisk.window import DataError

BCE_EPS = 1e-7


class NonFiniteLossError(RuntimeError):
    """Raised when a loss becomes NaN or infinite during optimisation."""


@dataclass(frozen=True)
class LossWeights:
    loss_w: tuple[float, ...]
    loss_b: tuple[float, ...]
    lambda_hc: float
    risk_level_weights: tuple[float, ...] = (0.05, 0.2, 0.25, 0.5)
    risk_level_thresholds: tuple[float, ...] = (0.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if len(self.loss_w) != len(self.loss_b):
            raise ConfigError("loss_w and loss_b must have the same length")
        values = (*self.loss_w, *self.loss_b, self.lambda_hc, *self.risk_level_weights)
        if any(v < 0 for v in values):
            raise ConfigError("loss weights must be >= 0")
        if len(self.risk_level_weights) != len(self.risk_level_thresholds) + 1:
            raise ConfigError("need one risk-level weight more than thresholds")
        t = self.risk_level_thresholds
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError("risk-level thresholds must be strictly increasing")

    @classmethod
    def from_hyperparams(cls, h: HyperParams) -> LossWeights:
        n = h.active_levels
        return cls(
            loss_w=h.loss_w[:n],
            loss_b=h.loss_b[:n],
            lambda_hc=h.lambda_hc if n > 1 else 0.0,
            risk_level_weights=h.risk_level_weights,
            risk_level_thresholds=h.risk_level_thresholds,
        )

    @property
    def n_levels(self) -> int:
        return len(self.loss_w)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DataError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def risk_level_weight(
    truth: torch.Tensor,
    level_weights: Sequence[float] = (0.05, 0.2, 0.25, 0.5),
    thresholds: Sequence[float] = (0.0, 2.0, 4.0),
) -> torch.Tensor:
    """Per-element weight picked by the risk level of the ground truth."""
    boundaries = torch.tensor(thresholds, dtype=truth.dtype, device=truth.device)
    levels = torch.bucketize(truth, boundaries, right=False)
    table = torch.tensor(level_weights, dtype=truth.dtype, device=truth.device)
    return table[levels]


def wmse(
    pred: torch.Tensor,
    truth: torch.Tensor,
    level_weights: Sequence[float] = (0.05, 0.2, 0.25, 0.5),
    thresholds: Sequence[float] = (0.0, 2.0, 4.0),
) -> torch.Tensor:
    """Risk-level weighted squared error, averaged over regions (and batch)."""
    _check_same_shape(pred, truth, "wmse")
    weight = risk_level_weight(truth, level_weights, thresholds)
    return (weight * (truth - pred) ** 2).mean()


def bce(prob: torch.Tensor, truth: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy of occurrence probabilities against truth > 0."""
    _check_same_shape(prob, truth, "bce")
    p = prob.clamp(eps, 1.0 - eps)
    y = (truth > 0).to(prob.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def hierarchical_constraint(
    pred_fine: torch.Tensor, truth_coarse: torch.Tensor, m_tran: torch.Tensor
) -> torch.Tensor:
    """Mean squared gap between sum-aggregated fine predictions and coarse truth."""
    if pred_fine.shape[-1] != m_tran.shape[0] or truth_coarse.shape[-1] != m_tran.shape[1]:
        raise DataError(
            f"hierarchical constraint: fine {tuple(pred_fine.shape)}, "
            f"coarse {tuple(truth_coarse.shape)}, M_tran {tuple(m_tran.shape)}"
        )
    aggregated = pred_fine @ m_tran.to(pred_fine.dtype)
    return ((truth_coarse - aggregated) ** 2).mean()


def loss_terms(
    preds: Sequence[torch.Tensor],
    truths: Sequence[torch.Tensor],
    probs: Sequence[torch.Tensor],
    transforms: Sequence[torch.Tensor],
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    n = weights.n_levels
    if not (len(preds) == len(truths) == len(probs) == n):
        raise DataError(f"loss expects {n} levels, got {len(preds)} predictions")
    terms: dict[str, torch.Tensor] = {}
    for g in range(n):
        terms[f"wmse_{g + 1}"] = wmse(
            preds[g], truths[g], weights.risk_level_weights, weights.risk_level_thresholds
        )
        terms[f"bce_{g + 1}"] = bce(probs[g], truths[g])
    if n > 1:
        # Only the two finest levels are tied together.
        terms["hc"] = hierarchical_constraint(preds[0], truths[1], transforms[0])
    return terms


def combine_terms(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    total = sum(
        weights.loss_w[g] * terms[f"wmse_{g + 1}"] + weights.loss_b[g] * terms[f"bce_{g + 1}"]
        for g in range(weights.n_levels)
    )
    if "hc" in terms:
        total = total + weights.lambda_hc * terms["hc"]
    return total


def total_loss(
    preds: Sequence[torch.Tensor],
    truths: Sequence[torch.Tensor],
    probs: Sequence[torch.Tensor],
    transforms: Sequence[torch.Tensor],
    weights: LossWeights,
) -> torch.Tensor:
    return combine_terms(loss_terms(preds, truths, probs, transforms, weights), weights)


def check_finite(value: torch.Tensor | float, context: str) -> float:
    number = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(number):
        raise NonFiniteLossError(f"{context}: loss is {number}")
    return number
