"""Device, channel, cost and data models.

Latency and energy are computed from the cost model, never from wall-clock
time, so runs are reproducible:

    t_cmp = tau * |D| * alpha * W / f       e_cmp = eps * f^2 * tau * |D| * alpha * W
    t_com = alpha * beta * S / r            e_com = t_com * P

with W the per-sample workload, S the uncompressed update size in bits and
r the Shannon uplink rate b * log2(1 + |h| P / (N0 b)). Units are
documented in the config; the defaults treat W as abstract work units and
f as work units per second.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np

from .model import DataShard

if TYPE_CHECKING:
    from .strategy import TrainingStrategy


@dataclass(frozen=True)
class SystemParams:
    """Radio and hardware environment a device population is drawn from."""

    bandwidth_hz: float
    tx_power_w: float
    noise_w_per_hz: float
    path_loss_exp: float
    cell_radius_m: float
    ref_snr_db: float
    ref_distance_m: float
    energy_coeff_low: float
    energy_coeff_high: float
    f_min: float
    f_max_low: float
    f_max_high: float

    def __post_init__(self) -> None:
        for name in (
            "bandwidth_hz", "tx_power_w", "noise_w_per_hz", "path_loss_exp",
            "cell_radius_m", "ref_distance_m", "energy_coeff_low", "f_min",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.energy_coeff_high < self.energy_coeff_low:
            raise ValueError("energy_coeff_high must be >= energy_coeff_low")
        if not self.f_min <= self.f_max_low <= self.f_max_high:
            raise ValueError("need f_min <= f_max_low <= f_max_high")

    @property
    def ref_gain(self) -> float:
        """Path gain scale chosen so a device at the reference distance sees
        the reference SNR with this bandwidth and transmit power."""
        snr = 10.0 ** (self.ref_snr_db / 10.0)
        return (
            snr
            * self.noise_w_per_hz
            * self.bandwidth_hz
            / self.tx_power_w
            * self.ref_distance_m**self.path_loss_exp
        )


def noise_dbm_per_mhz_to_w_per_hz(dbm_per_mhz: float) -> float:
    return 10.0 ** (dbm_per_mhz / 10.0) * 1e-3 / 1e6


@dataclass
class DeviceProfile:
    device_id: int
    shard_size: int
    energy_coeff: float  # eps in e_cmp = eps f^2 (work)
    bandwidth_hz: float
    tx_power_w: float
    f_min: float
    f_max: float

    def __post_init__(self) -> None:
        if self.energy_coeff <= 0 or self.bandwidth_hz <= 0 or self.tx_power_w <= 0:
            raise ValueError("device physical parameters must be positive")
        if not 0 < self.f_min <= self.f_max:
            raise ValueError("need 0 < f_min <= f_max")


@dataclass(frozen=True)
class ChannelState:
    distance_m: float
    path_gain: float
    noise_w_per_hz: float
    rate_bps: float


@dataclass(frozen=True)
class CostBreakdown:
    t_cmp: float
    t_com: float
    e_cmp: float
    e_com: float

    @property
    def t_total(self) -> float:
        return self.t_cmp + self.t_com

    @property
    def e_total(self) -> float:
        return self.e_cmp + self.e_com


def link_rate(
    bandwidth_hz: float, path_gain: float, tx_power_w: float, noise_w_per_hz: float
) -> float:
    """Shannon uplink rate in bits/s."""
    if min(bandwidth_hz, path_gain, tx_power_w, noise_w_per_hz) <= 0:
        raise ValueError("link parameters must be positive")
    snr = path_gain * tx_power_w / (noise_w_per_hz * bandwidth_hz)
    return bandwidth_hz * float(np.log2(1.0 + snr))


def round_cost(
    strategy: "TrainingStrategy",
    device: DeviceProfile,
    task: "TaskProfile",
    rate_bps: float,
) -> CostBreakdown:
    """Latency and energy of one round under a given strategy."""
    work = task.local_epochs * device.shard_size * task.workload_per_sample * strategy.alpha
    t_cmp = work / strategy.f
    e_cmp = device.energy_coeff * strategy.f**2 * work
    t_com = strategy.alpha * strategy.beta * task.update_bits / rate_bps
    e_com = t_com * device.tx_power_w
    return CostBreakdown(t_cmp=t_cmp, t_com=t_com, e_cmp=e_cmp, e_com=e_com)


@dataclass(frozen=True)
class TaskProfile:
    """Workload side of the cost model, shared by all devices."""

    workload_per_sample: float  # W, work units per sample per epoch
    update_bits: float  # S, uncompressed update size in bits
    local_epochs: int  # tau

    def __post_init__(self) -> None:
        if self.workload_per_sample <= 0 or self.update_bits <= 0:
            raise ValueError("workload and update size must be positive")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


def sample_devices(
    params: SystemParams, count: int, rng: np.random.Generator
) -> list[DeviceProfile]:
    """Draw a device population; shard sizes are attached after partitioning."""
    if count < 1:
        raise ValueError("need at least one device")
    devices = []
    for i in range(count):
        eps = rng.uniform(params.energy_coeff_low, params.energy_coeff_high)
        f_max = rng.uniform(params.f_max_low, params.f_max_high)
        devices.append(
            DeviceProfile(
                device_id=i,
                shard_size=0,
                energy_coeff=float(eps),
                bandwidth_hz=params.bandwidth_hz,
                tx_power_w=params.tx_power_w,
                f_min=params.f_min,
                f_max=float(f_max),
            )
        )
    return devices


def refresh_channels(
    params: SystemParams, devices: list[DeviceProfile], rng: np.random.Generator
) -> list[ChannelState]:
    """Redraw device positions uniformly in the cell disk and derive rates.

    Distances are floored at one metre so the power-law gain stays finite.
    """
    states = []
    gain_ref = params.ref_gain
    for dev in devices:
        d = max(params.cell_radius_m * float(np.sqrt(rng.uniform())), 1.0)
        gain = gain_ref * d ** (-params.path_loss_exp)
        rate = link_rate(dev.bandwidth_hz, gain, dev.tx_power_w, params.noise_w_per_hz)
        states.append(
            ChannelState(
                distance_m=d,
                path_gain=gain,
                noise_w_per_hz=params.noise_w_per_hz,
                rate_bps=rate,
            )
        )
    return states


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int


def make_synthetic(
    n_classes: int,
    dim: int,
    train_size: int,
    test_size: int,
    rng: np.random.Generator,
    separation: float = 3.0,
    noise: float = 1.0,
) -> Dataset:
    """Balanced Gaussian mixture: unit-sphere class means scaled by
    ``separation``, isotropic noise."""
    if n_classes < 2 or dim < 1:
        raise ValueError("need n_classes >= 2 and dim >= 1")
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n: int):
        y = rng.permutation(np.arange(n) % n_classes)
        x = means[y] + noise * rng.normal(size=(n, dim))
        return x.astype(np.float32), y.astype(np.int64)

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return Dataset(train_x, train_y, test_x, test_y, n_classes)


def _shard_quota(counts: np.ndarray, n_shards: int) -> np.ndarray:
    """Split ``n_shards`` label-pure shards across labels, proportional to the
    label counts, with every non-empty label getting at least one shard and
    no label getting more shards than it has samples."""
    quota = (counts > 0).astype(np.int64)
    remaining = n_shards - int(quota.sum())
    if remaining < 0:
        raise ValueError("more classes than shards; raise devices or shards_per_device")
    for _ in range(remaining):
        ratios = np.where(quota < counts, counts / (quota + 1), -1.0)
        j = int(np.argmax(ratios))
        if ratios[j] < 0:
            raise ValueError("dataset too small for the requested shard count")
        quota[j] += 1
    return quota


def partition_data(
    dataset: Dataset,
    mode: Literal["iid", "noniid"],
    n_devices: int,
    rng: np.random.Generator,
    shards_per_device: int = 2,
) -> list[DataShard]:
    """Split the training set into disjoint per-device shards covering it.

    iid: a random equal split (remainders go to the lowest device ids).
    noniid: each label's samples are chopped into label-pure shards and
    every device is dealt ``shards_per_device`` of them, so a device sees at
    most that many distinct labels.
    """
    n = len(dataset.train_y)
    if n_devices < 1 or n < n_devices:
        raise ValueError("need 1 <= n_devices <= training samples")
    if mode == "iid":
        order = rng.permutation(n)
        splits = np.array_split(order, n_devices)
    elif mode == "noniid":
        if shards_per_device < 1:
            raise ValueError("shards_per_device must be >= 1")
        n_shards = n_devices * shards_per_device
        counts = np.bincount(dataset.train_y, minlength=dataset.n_classes)
        quota = _shard_quota(counts, n_shards)
        shards = []
        for label in range(dataset.n_classes):
            if quota[label] == 0:
                continue
            idx = np.flatnonzero(dataset.train_y == label)
            idx = idx[rng.permutation(len(idx))]
            shards.extend(np.array_split(idx, quota[label]))
        deal = rng.permutation(n_shards)
        splits = [
            np.concatenate([shards[j] for j in deal[i * shards_per_device : (i + 1) * shards_per_device]])
            for i in range(n_devices)
        ]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [
        DataShard(features=dataset.train_x[idx], labels=dataset.train_y[idx])
        for idx in splits
    ]


# ---------------------------------------------------------------------------
# IDX file reading (MNIST-style byte format)

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str) -> np.ndarray:
    """Read one IDX-format array (big-endian, 4-byte dimension sizes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    type_code, ndim = data[2], data[3]
    if type_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{type_code:02x}")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    dtype = _IDX_DTYPES[type_code]
    body = np.frombuffer(data, dtype=dtype, offset=4 + 4 * ndim)
    expected = int(np.prod(dims)) if ndim else 0
    if len(body) != expected:
        raise ValueError(f"{path}: payload holds {len(body)} items, header says {expected}")
    return body.reshape(dims)


def load_idx_dataset(
    train_images: str, train_labels: str, test_images: str, test_labels: str
) -> Dataset:
    """Load an IDX image/label quadruple, flattening images to [0, 1] floats."""

    def prep(images_path: str, labels_path: str):
        x = read_idx(images_path).astype(np.float32)
        y = read_idx(labels_path).astype(np.int64)
        if x.ndim < 2:
            raise ValueError("image file must have at least 2 dimensions")
        x = x.reshape(len(x), -1)
        if x.max() > 1.0:
            x = x / np.float32(255.0)
        if len(x) != len(y):
            raise ValueError("image and label counts differ")
        return x, y

    train_x, train_y = prep(train_images, train_labels)
    test_x, test_y = prep(test_images, test_labels)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    return Dataset(train_x, train_y, test_x, test_y, n_classes)
