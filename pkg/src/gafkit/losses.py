"""The four MSE pretext losses and their weighted combination.

Per-clip losses sum over people and frames (matching the per-clip task
definitions) and average over the batch, keeping the scale independent of the
batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

TERM_NAMES = ("flow_g", "flow_i", "object_g", "object_i")


@dataclass(frozen=True)
class LossWeights:
    """Stage weights and per-term enable flags."""

    w_flow: float = 1.0
    w_object: float = 1.0
    use_flow_g: bool = True
    use_flow_i: bool = True
    use_object_g: bool = True
    use_object_i: bool = True

    def __post_init__(self):
        if self.w_flow < 0 or self.w_object < 0:
            raise ValueError("loss weights must be nonnegative")
        if not any(self.enabled_terms()):
            raise ValueError("at least one loss term must be enabled")

    def enabled_terms(self) -> tuple[bool, bool, bool, bool]:
        return (self.use_flow_g, self.use_flow_i, self.use_object_g, self.use_object_i)

    @property
    def needs_flow(self) -> bool:
        return self.use_flow_g or self.use_flow_i

    @property
    def needs_object(self) -> bool:
        return self.use_object_g or self.use_object_i

    @property
    def needs_gaf(self) -> bool:
        return self.use_flow_g or self.use_object_g

    def to_dict(self) -> dict:
        return {
            "w_flow": self.w_flow,
            "w_object": self.w_object,
            "use_flow_g": self.use_flow_g,
            "use_flow_i": self.use_flow_i,
            "use_object_g": self.use_object_g,
            "use_object_i": self.use_object_i,
        }


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared componentwise difference of two equal-width vectors."""
    if pred.shape != target.shape:
        raise ValueError(f"width mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _summed_mse(pred: torch.Tensor, target: torch.Tensor,
                mask: torch.Tensor | None) -> torch.Tensor:
    """Sum of per-vector MSEs over all leading axes except the batch, which is
    averaged.  ``mask`` zeroes the contribution of missing entries."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_vec = ((pred - target) ** 2).mean(dim=-1)
    if mask is not None:
        per_vec = per_vec * mask.to(per_vec.dtype)
    return per_vec.reshape(per_vec.shape[0], -1).sum(dim=1).mean()


def flow_loss(pred_g: torch.Tensor | None, pred_i: torch.Tensor | None,
              target: torch.Tensor, mask: torch.Tensor | None = None):
    """Flow losses summed over (person, frame): returns ``(from_g, from_i)``.

    Either prediction may be ``None`` when its term is disabled.
    """
    loss_g = _summed_mse(pred_g, target, mask) if pred_g is not None else None
    loss_i = _summed_mse(pred_i, target, mask) if pred_i is not None else None
    return loss_g, loss_i


def object_loss(pred_g: torch.Tensor | None, pred_i: torch.Tensor | None,
                target: torch.Tensor, mask: torch.Tensor | None = None):
    """Object-location losses summed over frames: returns ``(from_g, from_i)``."""
    loss_g = _summed_mse(pred_g, target, mask) if pred_g is not None else None
    loss_i = _summed_mse(pred_i, target, mask) if pred_i is not None else None
    return loss_g, loss_i


def total_loss(terms: dict[str, torch.Tensor | None], weights: LossWeights) -> torch.Tensor:
    """Weighted sum ``w_flow * (flow terms) + w_object * (object terms)`` with
    the per-term enable flags applied inside each pair."""
    parts = []
    flags = dict(zip(TERM_NAMES, weights.enabled_terms()))
    for name in ("flow_g", "flow_i"):
        if flags[name]:
            if terms.get(name) is None:
                raise ValueError(f"enabled term {name!r} was not computed")
            parts.append(weights.w_flow * terms[name])
    for name in ("object_g", "object_i"):
        if flags[name]:
            if terms.get(name) is None:
                raise ValueError(f"enabled term {name!r} was not computed")
            parts.append(weights.w_object * terms[name])
    if not parts:
        raise ValueError("all loss terms are disabled")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
