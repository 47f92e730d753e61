"""Training objectives: cross-entropy, constrained localization loss, and their sum.

All losses accept a single example or a leading batch axis; batched inputs
are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, lift
from .errors import ContractError
from .stn import extract_scales

CLASS_NAMES = ("granulocyte", "mitosis", "tumor")
NUM_CLASSES = len(CLASS_NAMES)
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    kappa: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ContractError(f"kappa must be finite and non-negative, got {self.kappa}")


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractError(f"class index out of range 0..{num_classes - 1}")
    return np.eye(num_classes)[labels]


def cross_entropy(probs, target) -> Tensor:
    """``-sum_i ln(p_i) * c_i`` with probabilities floored at 1e-12.

    ``target`` is a one-hot array matching ``probs``.
    """
    probs = lift(probs)
    target = np.asarray(target, dtype=np.float64)
    per_example = -(probs.clamp_min(LOG_FLOOR).log() * target).sum(axis=-1)
    return per_example.mean() if per_example.ndim else per_example


def localization_loss(theta_hat, theta_gt) -> Tensor:
    """Squared penalties on translation, column scales, diagonal equality and skew.

    Rotation is left free: any ``s * R(phi)`` with the target scale and
    translation has zero loss.
    """
    theta_hat = lift(theta_hat)
    gt = np.asarray(theta_gt, dtype=np.float64)
    scale = gt[..., 0, 0]
    s_x, s_y = extract_scales(theta_hat)
    t1, t2, tx = theta_hat[..., 0, 0], theta_hat[..., 0, 1], theta_hat[..., 0, 2]
    t3, t4, ty = theta_hat[..., 1, 0], theta_hat[..., 1, 1], theta_hat[..., 1, 2]
    per_example = (
        (tx - gt[..., 0, 2]) ** 2
        + (ty - gt[..., 1, 2]) ** 2
        + (s_x - scale) ** 2
        + (s_y - scale) ** 2
        + (t1 - t4) ** 2
        + (t2 + t3) ** 2
    )
    return per_example.mean() if per_example.ndim else per_example


def combined_loss(l_loc, l_cla, weights: LossWeights = LossWeights()) -> Tensor:
    return lift(l_loc) + lift(l_cla) * weights.kappa
