"""Round protocol and experiment driver.

Each round: refresh channels, solve per-device strategies, sort the global
model's channels once, then per participating device extract its sub-model,
train locally, compress/encode the update, decode and embed it back into
global coordinates, and finally aggregate with the divergence-optimal
coefficients and apply w_{t+1} = w_t - u.

The fedavg baseline mode runs the same protocol pinned to alpha = beta = 1
with shard-size aggregation weights, raw (lossless) uploads and no budget
enforcement.

Latency/energy metrics come from the cost model, not wall time. Worker
threads (config.threads, capped by the ACFL_THREADS environment variable)
only parallelize per-device work; every random draw has its own stream, so
results are identical for any worker count.
"""

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rngs
from .aggregate import aio_aggregate, apply_global_update, optimal_coefficients
from .codec import (
    RatePredictor,
    compress,
    decode_update,
    dequantize,
    plan_from_beta,
)
from .config import ExperimentConfig
from .model import (
    DataShard,
    GlobalModel,
    GradientUpdate,
    ModelArch,
    evaluate,
    global_loss,
    init_model,
    local_train,
)
from .shrink import embed_update, extract_submodel, sort_channels
from .strategy import Budget, TrainingStrategy, solve_strategy
from .sysmodel import (
    ChannelState,
    Dataset,
    DeviceProfile,
    TaskProfile,
    load_idx_dataset,
    make_synthetic,
    partition_data,
    refresh_channels,
    round_cost,
    sample_devices,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ACFM"
CHECKPOINT_VERSION = 1


@dataclass
class DeviceRoundRecord:
    device_id: int
    feasible: bool
    interior: bool
    alpha: float
    beta: float
    f: float
    phi: float
    gain: float
    e_budget: float
    t_cmp: float = 0.0
    t_com: float = 0.0
    e_cmp: float = 0.0
    e_com: float = 0.0
    uplink_bytes: int = 0

    @property
    def t_total(self) -> float:
        return self.t_cmp + self.t_com

    @property
    def e_total(self) -> float:
        return self.e_cmp + self.e_com


@dataclass
class RoundMetrics:
    round: int
    loss: float
    accuracy: float
    latency_max_s: float
    energy_total_j: float
    uplink_bytes: int
    gain_g: float
    skipped: int
    per_device: list[DeviceRoundRecord] = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    initial_loss: float
    initial_accuracy: float
    rounds: list[RoundMetrics]
    model: GlobalModel


@dataclass
class ExperimentState:
    config: ExperimentConfig
    task: TaskProfile
    dataset: Dataset
    shards: list[DataShard]
    devices: list[DeviceProfile]
    model: GlobalModel
    predictor: RatePredictor | None


def build_state(config: ExperimentConfig) -> ExperimentState:
    ds_cfg = config.dataset
    if ds_cfg.kind == "synthetic":
        dataset = make_synthetic(
            n_classes=ds_cfg.classes,
            dim=ds_cfg.dim,
            train_size=ds_cfg.train_size,
            test_size=ds_cfg.test_size,
            rng=rngs.stream(config.seed, rngs.DATASET),
            separation=ds_cfg.separation,
            noise=ds_cfg.noise,
        )
    else:
        dataset = load_idx_dataset(
            ds_cfg.train_images, ds_cfg.train_labels, ds_cfg.test_images, ds_cfg.test_labels
        )
    arch = config.arch
    if dataset.train_x.shape[1] != arch.input_dim:
        raise ValueError(
            f"arch.input_dim={arch.input_dim} but the dataset has {dataset.train_x.shape[1]} features"
        )
    if dataset.n_classes > arch.output_dim:
        raise ValueError("arch.output_dim is smaller than the number of classes")

    shards = partition_data(
        dataset,
        config.partition.mode,
        config.devices,
        rngs.stream(config.seed, rngs.PARTITION),
        shards_per_device=config.partition.shards_per_device,
    )
    devices = sample_devices(
        config.system_params(), config.devices, rngs.stream(config.seed, rngs.DEVICES)
    )
    for dev, shard in zip(devices, shards):
        dev.shard_size = shard.size

    workload = config.system.workload_per_sample or float(arch.flop_count())
    update_bits = config.system.update_bits or 32.0 * arch.param_count()
    task = TaskProfile(
        workload_per_sample=workload,
        update_bits=update_bits,
        local_epochs=config.training.epochs,
    )
    model = init_model(arch, rngs.stream(config.seed, rngs.INIT))
    predictor = None
    if config.predictor_path:
        with open(config.predictor_path, "r", encoding="utf-8") as fh:
            predictor = RatePredictor.from_json(fh.read())
    return ExperimentState(
        config=config,
        task=task,
        dataset=dataset,
        shards=shards,
        devices=devices,
        model=model,
        predictor=predictor,
    )


def _worker_count(config: ExperimentConfig) -> int:
    n = config.threads
    env = os.environ.get("ACFL_THREADS", "")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring non-integer ACFL_THREADS=%r", env)
    return max(1, n)


def _fedavg_strategy(device: DeviceProfile) -> TrainingStrategy:
    return TrainingStrategy(
        alpha=1.0, beta=1.0, f=device.f_max, phi=0.0, varphi=1.0, kappa=0.0, psi=0.0,
        phi_candidates=(), gain=1.0, feasible=True, interior=False,
    )


def _device_strategies(
    state: ExperimentState, round_no: int, channels: list[ChannelState]
) -> tuple[list[TrainingStrategy], list[float]]:
    cfg = state.config
    b = cfg.budget
    strategies, budgets = [], []
    for dev, chan in zip(state.devices, channels):
        e_rng = rngs.stream(cfg.seed, rngs.BUDGET, round_no, dev.device_id)
        e_max = float(e_rng.uniform(b.e_max_low_j, b.e_max_high_j))
        budgets.append(e_max)
        if cfg.mode == "fedavg":
            strategies.append(_fedavg_strategy(dev))
            continue
        budget = Budget(
            t_max=b.t_max_s,
            e_max=e_max,
            alpha_min=b.alpha_min,
            beta_min=b.beta_min,
            beta_max=b.beta_max,
        )
        strategies.append(solve_strategy(dev, state.task, budget, chan.rate_bps))
    return strategies, budgets


def _train_and_compress(
    state: ExperimentState,
    round_no: int,
    device_id: int,
    sorted_model: GlobalModel,
    strat: TrainingStrategy,
):
    """One device's round: local training plus the upload/decode path.

    Returns (embedded update, combined mask, uplink bytes). beta == 1 means
    a raw float32 upload: no lossy stage, so the fedavg degradation is
    bit-exact.
    """
    cfg = state.config
    sub_model, spec = extract_submodel(sorted_model, strat.alpha)
    update = local_train(
        sub_model,
        state.shards[device_id],
        epochs=cfg.training.epochs,
        lr=cfg.training.lr,
        batch_size=cfg.training.batch_size,
        rng=rngs.stream(cfg.seed, rngs.TRAIN, round_no, device_id),
    )
    if strat.beta >= 1.0:
        decoded = update
        uplink_bytes = 4 * sum(w.size + b.size for w, b in zip(update.weights, update.biases))
    else:
        plan = plan_from_beta(state.predictor, strat.beta)
        encoded = compress(
            update, plan, strat.alpha, strat.beta,
            rngs.stream(cfg.seed, rngs.QUANT, round_no, device_id),
        )
        uplink_bytes = len(encoded.data)
        q, _, _ = decode_update(encoded.data)
        shapes = [(w.shape[0], w.shape[1]) for w in update.weights]
        decoded = dequantize(q, shapes)
    embedded, coverage = embed_update(decoded, spec, cfg.arch)
    combined = [
        (w_cov & (w != 0.0), b_cov & (b != 0.0))
        for (w_cov, b_cov), w, b in zip(coverage, embedded.weights, embedded.biases)
    ]
    return embedded, combined, int(uplink_bytes)


def run_round(state: ExperimentState, round_no: int) -> RoundMetrics:
    cfg = state.config
    channels = refresh_channels(
        cfg.system_params(), state.devices, rngs.stream(cfg.seed, rngs.CHANNELS, round_no)
    )
    strategies, e_budgets = _device_strategies(state, round_no, channels)
    active = [i for i, s in enumerate(strategies) if s.feasible]
    records = [
        DeviceRoundRecord(
            device_id=i,
            feasible=strategies[i].feasible,
            interior=strategies[i].interior,
            alpha=strategies[i].alpha,
            beta=strategies[i].beta,
            f=strategies[i].f,
            phi=strategies[i].phi,
            gain=strategies[i].gain,
            e_budget=e_budgets[i],
        )
        for i in range(len(state.devices))
    ]

    if active:
        sorted_model, _ = sort_channels(state.model)
        workers = _worker_count(cfg)

        def job(i: int):
            return _train_and_compress(state, round_no, i, sorted_model, strategies[i])

        if workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(job, active))
        else:
            results = [job(i) for i in active]

        updates = [r[0] for r in results]
        masks = [r[1] for r in results]
        if cfg.mode == "fedavg":
            sizes = np.array([state.shards[i].size for i in active], dtype=np.float64)
            weights = sizes / sizes.sum()
        else:
            weights = optimal_coefficients(
                [(strategies[i].alpha, strategies[i].beta) for i in active]
            )
            blend = cfg.aggregation.data_size_blend
            if blend > 0.0:
                sizes = np.array([state.shards[i].size for i in active], dtype=np.float64)
                weights = (1.0 - blend) * weights + blend * sizes / sizes.sum()
                weights = weights / weights.sum()
        agg = aio_aggregate(updates, masks, weights)
        # the updates live in sorted-channel coordinates, so the new global
        # model must be built from the sorted copy everyone trained against
        state.model = apply_global_update(sorted_model, agg)
        for pos, i in enumerate(active):
            cost = round_cost(strategies[i], state.devices[i], state.task, channels[i].rate_bps)
            rec = records[i]
            rec.t_cmp, rec.t_com = cost.t_cmp, cost.t_com
            rec.e_cmp, rec.e_com = cost.e_cmp, cost.e_com
            rec.uplink_bytes = results[pos][2]
    else:
        log.warning("round %d: every device infeasible, skipping aggregation", round_no)

    loss, accuracy = _evaluate_global(state)
    participating = [records[i] for i in active]
    return RoundMetrics(
        round=round_no,
        loss=loss,
        accuracy=accuracy,
        latency_max_s=max((r.t_total for r in participating), default=0.0),
        energy_total_j=sum(r.e_total for r in participating),
        uplink_bytes=sum(r.uplink_bytes for r in participating),
        gain_g=float(np.mean([r.gain if r.feasible else 0.0 for r in records])),
        skipped=len(records) - len(participating),
        per_device=records,
    )


def _evaluate_global(state: ExperimentState) -> tuple[float, float]:
    losses = [evaluate(state.model, s.features, s.labels).loss for s in state.shards]
    sizes = [s.size for s in state.shards]
    loss = global_loss(losses, sizes)
    acc = evaluate(state.model, state.dataset.test_x, state.dataset.test_y).accuracy
    return loss, acc


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    state = build_state(config)
    initial_loss, initial_acc = _evaluate_global(state)
    rounds = []
    for t in range(1, config.rounds + 1):
        rounds.append(run_round(state, t))
    return ExperimentResult(
        config=config,
        initial_loss=initial_loss,
        initial_accuracy=initial_acc,
        rounds=rounds,
        model=state.model,
    )


# ---------------------------------------------------------------------------
# checkpoints

_ACTIVATION_CODES = {"relu": 0, "tanh": 1}


def save_checkpoint(model: GlobalModel, path: str) -> None:
    dims = model.arch.dims
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<B", CHECKPOINT_VERSION)
    out += struct.pack("<B", _ACTIVATION_CODES[model.arch.activation])
    out += struct.pack("<I", model.version)
    out += struct.pack("<H", len(dims))
    out += struct.pack(f"<{len(dims)}I", *dims)
    for w, b in zip(model.weights, model.biases):
        out += np.ascontiguousarray(w, dtype="<f4").tobytes()
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path: str) -> GlobalModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, act_code = data[4], data[5]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    activation = {v: k for k, v in _ACTIVATION_CODES.items()}.get(act_code)
    if activation is None:
        raise ValueError(f"unknown activation code {act_code}")
    (model_version,) = struct.unpack_from("<I", data, 6)
    (n_dims,) = struct.unpack_from("<H", data, 10)
    dims = struct.unpack_from(f"<{n_dims}I", data, 12)
    arch = ModelArch(dims[0], tuple(dims[1:-1]), dims[-1], activation)
    offset = 12 + 4 * n_dims
    weights, biases = [], []
    for l in range(arch.n_layers):
        out_dim, in_dim = dims[l + 1], dims[l]
        w = np.frombuffer(data, dtype="<f4", count=out_dim * in_dim, offset=offset)
        offset += 4 * out_dim * in_dim
        b = np.frombuffer(data, dtype="<f4", count=out_dim, offset=offset)
        offset += 4 * out_dim
        weights.append(w.reshape(out_dim, in_dim).copy())
        biases.append(b.copy())
    if offset != len(data):
        raise ValueError("checkpoint size does not match its header")
    return GlobalModel(arch=arch, weights=weights, biases=biases, version=model_version)
