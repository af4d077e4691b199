"""Operator-guided trajectory correction.

The guidance term is the closed-form gradient of the squared distance between
the current flow state and the operator bank's physics-corrected prediction,
with the prediction treated as a constant target:

    g(x, t) = alpha(t) * 2 * (x - x_bank)

and the guided field is ``v_guided = v_cfm - g``. The strength schedule is a
shifted sigmoid, weak early in the flow and saturating at ``alpha_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diffmath as dm
from .diffmath import ShapeError, Tensor


@dataclass
class GuidanceConfig:
    alpha_max: float = 0.1
    sharpness: float = 10.0
    t_threshold: float = 0.5
    dt: float = 0.01          # lookahead, one sampler step by default
    enabled: bool = True

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ValueError("alpha_max must be >= 0")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be > 0")
        if not 0.0 <= self.t_threshold <= 1.0:
            raise ValueError("t_threshold must lie in [0, 1]")


def alpha(t: float, cfg: GuidanceConfig) -> float:
    """Guidance strength alpha_max * sigmoid(sharpness * (t - t_threshold))."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1]")
    if not cfg.enabled:
        return 0.0
    return float(cfg.alpha_max * expit(cfg.sharpness * (t - cfg.t_threshold)))


def guidance_term(x_t: np.ndarray, x_fno: np.ndarray, t: float,
                  cfg: GuidanceConfig) -> np.ndarray:
    """Closed-form gradient pull toward the operator prediction (constant target)."""
    x_t = np.asarray(x_t, dtype=float)
    x_fno = np.asarray(x_fno, dtype=float)
    if x_t.shape != x_fno.shape:
        raise ShapeError("guidance_term", x_t.shape, x_fno.shape)
    return 2.0 * alpha(t, cfg) * (x_t - x_fno)


def guided_velocity(v_cfm, g):
    """v_cfm - g, elementwise; works on arrays or tape tensors."""
    if isinstance(v_cfm, Tensor) or isinstance(g, Tensor):
        v = v_cfm if isinstance(v_cfm, Tensor) else dm.constant(v_cfm)
        gt = g if isinstance(g, Tensor) else dm.constant(g)
        if v.shape != gt.shape:
            raise ShapeError("guided_velocity", v.shape, gt.shape)
        return dm.sub(v, gt)
    v = np.asarray(v_cfm, dtype=float)
    ga = np.asarray(g, dtype=float)
    if v.shape != ga.shape:
        raise ShapeError("guided_velocity", v.shape, ga.shape)
    return v - ga


def guidance_loss(bank_prediction, lookahead_state):
    """MSE between the bank's prediction at x_t and the path state at t + dt."""
    if isinstance(bank_prediction, Tensor) or isinstance(lookahead_state, Tensor):
        p = bank_prediction if isinstance(bank_prediction, Tensor) \
            else dm.constant(bank_prediction)
        q = lookahead_state if isinstance(lookahead_state, Tensor) \
            else dm.constant(lookahead_state)
        if p.shape != q.shape:
            raise ShapeError("guidance_loss", p.shape, q.shape)
        diff = dm.sub(p, q)
        return dm.mean(dm.mul(diff, diff))
    p = np.asarray(bank_prediction, dtype=float)
    q = np.asarray(lookahead_state, dtype=float)
    if p.shape != q.shape:
        raise ShapeError("guidance_loss", p.shape, q.shape)
    return float(np.mean((p - q) ** 2))
