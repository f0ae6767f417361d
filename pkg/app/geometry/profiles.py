"""The smooth step built from e^{-1/t}, numerically and as an expression.

``smooth_step`` is 0 on t <= 0, 1 on t >= 1, and infinitely flat at both ends.
"""

import numpy as np

from app.geometry.expr import ExprAST, apply, where


def flat_profile(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t: np.ndarray | float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    a = flat_profile(t)
    return a / (a + flat_profile(1.0 - t))


def smooth_step_slope() -> float:
    """sup |S'| on a fine grid (attained at t = 1/2)."""
    t = np.linspace(0.0, 1.0, 20001)
    return float(np.max(np.abs(np.gradient(smooth_step(t), t))))


def flat_profile_expr(t: ExprAST) -> ExprAST:
    return where(t, 0.0, apply("exp", -1.0 / t))


def smooth_step_expr(t: ExprAST) -> ExprAST:
    a = flat_profile_expr(t)
    return a / (a + flat_profile_expr(1.0 - t))
