"""Concept signatures in noise-prediction space and the losses built on them.

A concept's signature at (x_t, t) is the difference between the conditional
and blank noise predictions. Erasure drives the correlation between the
original model's signature and the edited model's signature to the stopping
threshold; a momentum statistic smooths the noisy per-step estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Array
from .toy_diffusion import ConceptEmbedding, DenoiserParams, denoise_predict

ETA_FLOOR = 1e-12

CORR_MODES = ("product", "cosine")


def delta_eps(
    theta: DenoiserParams,
    x_t: Array,
    c: ConceptEmbedding,
    blank: ConceptEmbedding,
    t,
) -> Array:
    """Concept signature: eps(x_t, c, t) - eps(x_t, blank, t)."""
    return denoise_predict(theta, x_t, c, t) - denoise_predict(theta, x_t, blank, t)


def _edited(theta: DenoiserParams, delta_theta: Mapping[str, Array]) -> DenoiserParams:
    values = theta.copy_values()
    for name, d in delta_theta.items():
        if name not in values:
            raise KeyError(f"unknown layer {name!r}")
        if d.shape != values[name].shape:
            raise ValueError(f"increment shape mismatch on {name!r}")
        values[name] = values[name] + d
    return theta.with_values(values)


def corr_value(d_ori: Array, d_new: Array, mode: str = "product") -> float:
    """Correlation between two signatures; 'product' is the mean of the
    elementwise product, 'cosine' the normalized variant."""
    if mode == "product":
        return float(np.mean(d_ori * d_new))
    if mode == "cosine":
        denom = float(np.linalg.norm(d_ori) * np.linalg.norm(d_new))
        return float(np.sum(d_ori * d_new) / max(denom, ETA_FLOOR))
    raise ValueError(f"unknown corr mode {mode!r}")


def corr_loss(
    c: ConceptEmbedding,
    theta_dm: DenoiserParams,
    delta_theta: Mapping[str, Array],
    x_t: Array,
    t,
    blank: ConceptEmbedding,
    mode: str = "product",
) -> float:
    """Correlation of the frozen signature with the edited model's signature.

    The frozen branch is evaluated on theta_dm and is a constant; only the
    edited branch would carry gradient in training.
    """
    d_ori = delta_eps(theta_dm, x_t, c, blank, t)
    d_new = delta_eps(_edited(theta_dm, delta_theta), x_t, c, blank, t)
    return corr_value(d_ori, d_new, mode)


# ---------------------------------------------------------------------------
# loss balancing


def eta_weights(losses: Sequence[float]) -> Array:
    """Per-concept weights equalizing loss magnitudes against the first one.

    eta[i] = |losses[0]| / max(|losses[i]|, 1e-12), with eta[0] = 1 exactly.
    The weights are plain floats and never carry gradient.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("losses must be a non-empty 1-D sequence")
    ref = abs(float(losses[0]))
    eta = np.empty(losses.size)
    eta[0] = 1.0
    for i in range(1, losses.size):
        eta[i] = ref / max(abs(float(losses[i])), ETA_FLOOR)
    return eta


# ---------------------------------------------------------------------------
# momentum early stopping


@dataclass(frozen=True)
class CorrState:
    """Exponentially smoothed balanced loss plus the stopping threshold."""

    alpha: float
    tau: float
    momentum: float | None = None
    n: int = 0

    @staticmethod
    def initial(alpha: float, tau: float) -> "CorrState":
        if not (0.0 <= alpha < 1.0):
            raise ValueError("alpha must lie in [0, 1)")
        return CorrState(alpha=alpha, tau=tau)


def momentum_step(state: CorrState, balanced_sum: float) -> tuple[CorrState, bool]:
    """One momentum update; returns (new state, stop flag).

    The first call seeds the running value with the first balanced sum, so
    iteration 1 computes alpha * s1 + (1 - alpha) * s1.
    """
    s = float(balanced_sum)
    if not np.isfinite(s):
        raise nm.NumericalError("balanced loss is non-finite")
    prev = s if state.momentum is None else state.momentum
    m = state.alpha * prev + (1.0 - state.alpha) * s
    new = replace(state, momentum=m, n=state.n + 1)
    return new, m <= state.tau


def replay_momentum(balanced: Sequence[float], alpha: float, tau: float) -> tuple[list[float], int | None]:
    """Recompute the momentum trace from logged balanced sums.

    Returns (trace, stop_iteration) where stop_iteration is the 1-based index
    of the first value at or below tau, or None if it never stops.
    """
    state = CorrState.initial(alpha, tau)
    trace: list[float] = []
    stop_at = None
    for i, s in enumerate(balanced, start=1):
        state, stop = momentum_step(state, s)
        trace.append(state.momentum)
        if stop and stop_at is None:
            stop_at = i
    return trace, stop_at
