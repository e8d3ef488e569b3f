"""Divergence-optimal aggregation of masked, embedded updates.

Element-wise: coordinates nobody covers stay zero, everything else is the
weighted average over the devices whose mask covers the coordinate. The
aggregation coefficients minimize the global divergence bound subject to
summing to one: p_i proportional to 1 / d_i^2 with
d_i = 1 - alpha_i (2 - alpha_i) sqrt(beta_i), floored to keep lossless
devices (d_i = 0) finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GlobalModel, GradientUpdate
from .strategy import divergence_factor

DENOMINATOR_FLOOR = 1e-12


@dataclass
class GlobalUpdate:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def optimal_coefficients(strategies) -> np.ndarray:
    """Normalized aggregation weights from per-device (alpha, beta) pairs."""
    pairs = list(strategies)
    if not pairs:
        raise ValueError("no strategies to weight")
    d_sq = np.array(
        [max(divergence_factor(a, b) ** 2, DENOMINATOR_FLOOR) for a, b in pairs],
        dtype=np.float64,
    )
    inv = 1.0 / d_sq
    return inv / inv.sum()


def aio_aggregate(
    updates: list[GradientUpdate],
    masks: list[list[tuple[np.ndarray, np.ndarray]]],
    weights: np.ndarray,
) -> GlobalUpdate:
    """Masked weighted average in global coordinates.

    ``masks[i]`` combines device i's sub-model coverage with its survivor
    mask. Devices are accumulated in ascending index order so results do not
    depend on scheduling.
    """
    if not updates or len(updates) != len(masks) or len(updates) != len(weights):
        raise ValueError("updates, masks and weights must be equal-length and non-empty")
    n_layers = len(updates[0].weights)
    out_w, out_b = [], []
    for l in range(n_layers):
        num_w = np.zeros(updates[0].weights[l].shape, dtype=np.float64)
        den_w = np.zeros_like(num_w)
        num_b = np.zeros(updates[0].biases[l].shape, dtype=np.float64)
        den_b = np.zeros_like(num_b)
        for i in range(len(updates)):
            w_mask, b_mask = masks[i][l]
            p = float(weights[i])
            num_w += p * w_mask * updates[i].weights[l]
            den_w += p * w_mask
            num_b += p * b_mask * updates[i].biases[l]
            den_b += p * b_mask
        agg_w = np.where(den_w > 0.0, num_w / np.where(den_w > 0.0, den_w, 1.0), 0.0)
        agg_b = np.where(den_b > 0.0, num_b / np.where(den_b > 0.0, den_b, 1.0), 0.0)
        out_w.append(agg_w.astype(np.float32))
        out_b.append(agg_b.astype(np.float32))
    return GlobalUpdate(weights=out_w, biases=out_b)


def apply_global_update(model: GlobalModel, update: GlobalUpdate) -> GlobalModel:
    """w_{t+1} = w_t - u, bumping the model version."""
    out = model.copy()
    for l in range(len(out.weights)):
        if out.weights[l].shape != update.weights[l].shape:
            raise ValueError(f"layer {l}: update shape does not match the model")
        out.weights[l] -= update.weights[l]
        out.biases[l] -= update.biases[l]
        if not (np.all(np.isfinite(out.weights[l])) and np.all(np.isfinite(out.biases[l]))):
            raise ValueError(f"layer {l}: non-finite parameters after the update")
    out.version += 1
    return out
