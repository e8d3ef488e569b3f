"""Shared builders for the test suite.

The "desk" configuration is a scaled-down environment where both the latency
and the energy budget genuinely bind for a 5443-parameter dense model, so the
strategy solver lands on interior optima instead of trivially clamping.
"""

import numpy as np

from anycostfl import rngs
from anycostfl.config import config_from_dict
from anycostfl.model import DataShard, GradientUpdate, ModelArch, init_model, local_train
from anycostfl.sysmodel import make_synthetic


def desk_config(**overrides):
    raw = {
        "seed": 7,
        "mode": "anycost",
        "rounds": 5,
        "devices": 20,
        "arch": {"input_dim": 16, "hidden_sizes": [64, 64], "output_dim": 3},
        "dataset": {"kind": "synthetic", "train_size": 600, "test_size": 300},
        "system": {
            "bandwidth_hz": 500.0,
            "energy_coeff_low": 1e-22,
            "energy_coeff_high": 2e-22,
            "f_min": 1e7,
            "f_max_low": 2e7,
            "f_max_high": 4e7,
            "workload_per_sample": 4e6,
        },
        "budget": {"t_max_s": 10.0, "e_max_low_j": 3.0, "e_max_high_j": 9.0},
        "training": {"lr": 0.05, "batch_size": 16, "epochs": 1},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


def random_update(rng, shapes):
    """A GradientUpdate with gaussian entries for the given (out, in) shapes."""
    weights = [rng.normal(size=s).astype(np.float32) for s in shapes]
    biases = [rng.normal(size=s[0]).astype(np.float32) for s in shapes]
    return GradientUpdate(weights=weights, biases=biases)


def training_update(seed, arch=None, step=0):
    """One real local-training update on the reference synthetic task."""
    arch = arch or ModelArch(input_dim=16, hidden_sizes=(64, 64), output_dim=3)
    data = make_synthetic(
        n_classes=arch.output_dim,
        dim=arch.input_dim,
        train_size=600,
        test_size=60,
        rng=rngs.stream(seed, rngs.DATASET),
    )
    model = init_model(arch, rngs.stream(seed, rngs.INIT))
    shard = DataShard(features=data.train_x, labels=data.train_y)
    update = local_train(
        model, shard, epochs=1, lr=0.05, batch_size=16, rng=rngs.stream(seed, rngs.TRAIN, step)
    )
    return model, shard, update
