"""Elastic width shrinking.

The server keeps each hidden layer's channels sorted by importance (L2
norm of the outgoing weight row, biases excluded) so that a width-alpha
sub-model is simply the prefix of each hidden layer. Sorting permutes the
next layer's input columns identically, so it preserves the network
function exactly. Input and output dimensions are never shrunk.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np

from .model import GlobalModel, GradientUpdate, ModelArch


@dataclass(frozen=True)
class SubModelSpec:
    """Which prefix of each hidden layer a sub-model keeps."""

    alpha: float
    kept_widths: tuple[int, ...]

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if any(k < 1 for k in self.kept_widths):
            raise ValueError("kept widths must be >= 1")

    def kept_channel_ids(self, layer: int) -> np.ndarray:
        return np.arange(self.kept_widths[layer])


def sort_channels(model: GlobalModel) -> tuple[GlobalModel, list[np.ndarray]]:
    """Return a function-equivalent copy with hidden channels in descending
    row-norm order, plus the permutation applied to each hidden layer.

    Ties keep the lower original index first. The output layer's rows are
    never reordered.
    """
    out = model.copy()
    perms: list[np.ndarray] = []
    n_hidden = len(model.arch.hidden_sizes)
    for l in range(n_hidden):
        norms = np.linalg.norm(out.weights[l].astype(np.float64), axis=1)
        order = np.argsort(-norms, kind="stable")
        perms.append(order)
        out.weights[l] = out.weights[l][order]
        out.biases[l] = out.biases[l][order]
        out.weights[l + 1] = out.weights[l + 1][:, order]
    return out, perms


def shrink_arch(arch: ModelArch, alpha: float) -> ModelArch:
    """Scale hidden widths to max(1, ceil(width * sqrt(alpha)))."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    kept = tuple(max(1, ceil(h * sqrt(alpha))) for h in arch.hidden_sizes)
    return ModelArch(arch.input_dim, kept, arch.output_dim, arch.activation)


def extract_submodel(sorted_model: GlobalModel, alpha: float) -> tuple[GlobalModel, SubModelSpec]:
    """Slice the leading channels of a channel-sorted model.

    Weight rows of each hidden layer are truncated to the kept width and the
    following layer keeps only the matching input columns.
    """
    arch = sorted_model.arch
    sub_arch = shrink_arch(arch, alpha)
    kept = sub_arch.hidden_sizes
    spec = SubModelSpec(alpha=float(alpha), kept_widths=kept)

    weights, biases = [], []
    in_keep = arch.input_dim
    for l in range(arch.n_layers):
        out_keep = kept[l] if l < len(kept) else arch.output_dim
        weights.append(sorted_model.weights[l][:out_keep, :in_keep].copy())
        biases.append(sorted_model.biases[l][:out_keep].copy())
        in_keep = out_keep
    sub = GlobalModel(arch=sub_arch, weights=weights, biases=biases, version=sorted_model.version)
    return sub, spec


def embed_update(
    sub_update: GradientUpdate, spec: SubModelSpec, arch: ModelArch
) -> tuple[GradientUpdate, list[tuple[np.ndarray, np.ndarray]]]:
    """Zero-pad a sub-model update back into global coordinates.

    Returns the padded update plus per-layer boolean coverage masks marking
    the coordinates the sub-model actually carries.
    """
    dims = arch.dims
    kept = spec.kept_widths
    if len(sub_update.weights) != arch.n_layers:
        raise ValueError("update layer count does not match the architecture")

    weights, biases, coverage = [], [], []
    in_keep = arch.input_dim
    for l in range(arch.n_layers):
        out_full = dims[l + 1]
        out_keep = kept[l] if l < len(kept) else arch.output_dim
        if sub_update.weights[l].shape != (out_keep, in_keep):
            raise ValueError(
                f"layer {l}: update shape {sub_update.weights[l].shape} does not match "
                f"sub-model shape {(out_keep, in_keep)}"
            )
        w = np.zeros((out_full, dims[l]), dtype=np.float32)
        b = np.zeros(out_full, dtype=np.float32)
        w_cov = np.zeros((out_full, dims[l]), dtype=bool)
        b_cov = np.zeros(out_full, dtype=bool)
        w[:out_keep, :in_keep] = sub_update.weights[l]
        b[:out_keep] = sub_update.biases[l]
        w_cov[:out_keep, :in_keep] = True
        b_cov[:out_keep] = True
        weights.append(w)
        biases.append(b)
        coverage.append((w_cov, b_cov))
        in_keep = out_keep
    padded = GradientUpdate(weights=weights, biases=biases, learning_rate=sub_update.learning_rate)
    return padded, coverage
