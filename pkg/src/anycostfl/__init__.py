"""Cost-adjustable federated learning, end to end and deterministic.

Devices with different latency and energy budgets train width-shrunk
sub-models, upload sparsified + quantized + entropy-coded updates, and the
server fuses whatever arrived with divergence-optimal weights. Each
device's (shrink factor, compression ratio, clock rate) triple comes from a
closed-form optimizer of its learning gain under its budgets.
"""

from .aggregate import aio_aggregate, apply_global_update, optimal_coefficients
from .codec import (
    CompressionPlan,
    EncodedUpdate,
    QuantizedUpdate,
    RatePredictor,
    SparseUpdate,
    calibrate_predictor,
    decode_update,
    dequantize,
    encode_update,
    plan_from_beta,
    quantize,
    sparsify,
)
from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config
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
from .orchestrator import (
    ExperimentResult,
    RoundMetrics,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)
from .shrink import SubModelSpec, embed_update, extract_submodel, shrink_arch, sort_channels
from .strategy import (
    Budget,
    TrainingStrategy,
    convergence_factor,
    divergence_bound,
    global_divergence_bound,
    learning_gains,
    local_gain,
    solve_strategy,
)
from .sysmodel import (
    ChannelState,
    DeviceProfile,
    SystemParams,
    TaskProfile,
    link_rate,
    load_idx_dataset,
    make_synthetic,
    partition_data,
    refresh_channels,
    round_cost,
    sample_devices,
)

__version__ = "0.1.0"
