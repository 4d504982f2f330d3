"""Layout containment loss and total-objective bookkeeping.

The layout loss penalizes only Gaussian centers outside their box: per center,
the exterior Manhattan distance sum(max(0, |p_a| - half_a)) in the layout-local
frame (the box is axis-aligned there, so pose parameters never enter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .scene import InstanceGaussians, InstanceLayout


class DivergedOptimizationError(RuntimeError):
    """Raised when a loss term or gradient is NaN."""


@dataclass
class LossWeights:
    """beta1..beta5: instance guidance, layout, refinement, scene guidance, regularizer."""

    beta1: float = 1.0
    beta2: float = 1e3
    beta3: float = 1e-1
    beta4: float = 1e-1
    beta5: float = 1e3

    def __post_init__(self) -> None:
        for name in ("beta1", "beta2", "beta3", "beta4", "beta5"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
            setattr(self, name, v)


def layout_loss(gauss: InstanceGaussians, layout: InstanceLayout) -> float:
    """Sum over Gaussians of the exterior L1 distance to the layout box."""
    h = layout.half_extents
    excess = np.maximum(0.0, np.abs(gauss.positions) - h)
    return float(excess.sum())


def layout_loss_grad_positions(
    gauss: InstanceGaussians, layout: InstanceLayout
) -> np.ndarray:
    """d(layout_loss)/d(positions), the per-axis hinge subgradient."""
    p = gauss.positions
    h = layout.half_extents
    outside = np.abs(p) > h
    return np.where(outside, np.sign(p), 0.0)


def total_loss(
    sds_instance: Mapping[str, float],
    layout: Mapping[str, float],
    refine: Mapping[str, float],
    global_sds: float,
    reg: float,
    weights: LossWeights,
) -> float:
    """Weighted sum over instances plus the scene-level and regularizer terms."""
    terms = list(sds_instance.values()) + list(layout.values()) + list(refine.values())
    terms += [global_sds, reg]
    if any(math.isnan(float(t)) for t in terms):
        raise DivergedOptimizationError("NaN loss term: optimization diverged")
    total = weights.beta4 * global_sds + weights.beta5 * reg
    for key in sds_instance:
        total += weights.beta1 * sds_instance[key]
    for key in layout:
        total += weights.beta2 * layout[key]
    for key in refine:
        total += weights.beta3 * refine[key]
    return float(total)


@dataclass
class LossReport:
    """Per-term loss values for one optimization step."""

    sds_instance: dict[str, float] = field(default_factory=dict)
    layout: dict[str, float] = field(default_factory=dict)
    refine: dict[str, float] = field(default_factory=dict)
    global_sds: float = 0.0
    reg: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> float:
        return total_loss(
            self.sds_instance, self.layout, self.refine,
            self.global_sds, self.reg, self.weights,
        )
