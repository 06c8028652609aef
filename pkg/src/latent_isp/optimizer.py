"""Moment-based latent updates, step-size schedules and the stopping rule.

The update has no bias correction:

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    z <- z - alpha m / (sqrt(v) + eps_den)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, UnknownKind

CONSTANT_RATE = 0.01
DECAY_BASE = 5.0e-4
DECAY_EVERY = 500


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    n: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_den: float = 1e-8

    def __post_init__(self):
        m = np.array(self.m, dtype=float).ravel()
        v = np.array(self.v, dtype=float).ravel()
        if m.shape != v.shape:
            raise DimensionMismatch("moment vectors differ in length")
        if not 0 <= self.beta1 < self.beta2 <= 1:
            raise ValueError("need 0 <= beta1 < beta2 <= 1")
        if self.eps_den < 0 or self.n < 0 or np.any(v < 0):
            raise ValueError("eps_den, n and v must be nonnegative")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @classmethod
    def fresh(cls, size: int, beta1: float = 0.9, beta2: float = 0.999, eps_den: float = 1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, eps_den)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "n": self.n,
                "beta1": self.beta1, "beta2": self.beta2, "eps_den": self.eps_den}

    @classmethod
    def from_dict(cls, data: dict) -> "AdamState":
        return cls(**data)


def adam_step(state: AdamState, z, g, alpha: float):
    """One update; returns ``(new_state, new_z)`` and leaves inputs untouched."""
    z = np.asarray(z, dtype=float)
    g = np.asarray(g, dtype=float)
    if z.shape != state.m.shape or g.shape != state.m.shape:
        raise DimensionMismatch(f"z {z.shape}, g {g.shape}, state {state.m.shape}")
    if not alpha > 0:
        raise ValueError("step size must be positive")
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = m / (np.sqrt(v) + state.eps_den)
    # only reachable with eps_den = 0 and an all-zero history
    ratio = np.where((m == 0) & (v == 0), 0.0, ratio)
    return replace(state, m=m, v=v, n=state.n + 1), z - alpha * ratio


def schedule(kind: str, n: int, base: float | None = None, every: int = DECAY_EVERY) -> float:
    """Step size at iteration (or epoch) ``n``.

    ``constant`` returns ``base`` (0.01 by default); ``decay`` halves ``base``
    (5e-4 by default) every ``every`` steps.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if kind == "constant":
        return CONSTANT_RATE if base is None else float(base)
    if kind == "decay":
        base = DECAY_BASE if base is None else float(base)
        return base / 2.0 ** (n // every)
    raise UnknownKind(f"unknown schedule kind {kind!r}")


def should_stop(history, max_iters: int, patience: int = 30, rel_improve: float = 1e-3) -> bool:
    """Stop at ``max_iters`` or when the best loss stalls for ``patience`` steps.

    Stalled means the minimum of the last ``patience`` losses is not below
    ``(1 - rel_improve)`` times the best loss seen before them.
    """
    history = list(history)
    if not history:
        raise ValueError("history must be nonempty")
    if len(history) >= max_iters:
        return True
    if patience <= 0 or len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    recent = min(history[-patience:])
    return not recent < best_before * (1.0 - rel_improve)
