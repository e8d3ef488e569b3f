"""Command-line front end.

    anycostfl run --config cfg.json --output metrics.csv --format csv
    anycostfl calibrate --config cfg.json --output predictor.json
    anycostfl inspect artifact.bin

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys

from . import rngs
from .codec import MAGIC as WIRE_MAGIC
from .codec import calibrate_predictor
from .config import ConfigError, ExperimentConfig, parse_config
from .model import local_train
from .orchestrator import (
    CHECKPOINT_MAGIC,
    RoundMetrics,
    build_state,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)

log = logging.getLogger(__name__)

CSV_HEADER = "round,loss,accuracy,latency_max_s,energy_total_j,uplink_bytes,gain_g,skipped"

# rho values are "fraction of kernels dropped"; the dense end matters for
# large beta targets and the sparse end for small ones. Levels step roughly
# by sqrt(2) so the log-linear interpolation between knots stays tight.
DEFAULT_CALIBRATION_GRID = [
    (rho, levels)
    for rho in (0.0, 0.3, 0.5, 0.7, 0.8, 0.875, 0.92, 0.95, 0.97, 0.98, 0.9875, 0.992, 0.995)
    for levels in (2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256,
                   384, 512, 768, 1024, 1536, 2048, 4096, 8192, 16384)
]


def _metric_row(m: RoundMetrics) -> dict:
    return {
        "round": m.round,
        "loss": m.loss,
        "accuracy": m.accuracy,
        "latency_max_s": m.latency_max_s,
        "energy_total_j": m.energy_total_j,
        "uplink_bytes": m.uplink_bytes,
        "gain_g": m.gain_g,
        "skipped": m.skipped,
    }


def render_metrics(rounds: list[RoundMetrics], fmt: str) -> str:
    """Deterministic text for the per-round metrics table."""
    rows = [_metric_row(m) for m in rounds]
    if fmt == "csv":
        lines = [CSV_HEADER]
        for r in rows:
            lines.append(
                f"{r['round']},{r['loss']!r},{r['accuracy']!r},{r['latency_max_s']!r},"
                f"{r['energy_total_j']!r},{r['uplink_bytes']},{r['gain_g']!r},{r['skipped']}"
            )
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def emit_metrics(rounds: list[RoundMetrics], fmt: str, path: str | None) -> str:
    text = render_metrics(rounds, fmt)
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return text


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    return cfg


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    result = run_experiment(cfg)
    emit_metrics(result.rounds, args.format, args.output)
    if args.checkpoint:
        save_checkpoint(result.model, args.checkpoint)
    return 0


def _cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    state = build_state(cfg)
    rng = rngs.stream(cfg.seed, rngs.CALIBRATE)
    samples = []
    for i in range(max(1, args.samples)):
        shard = state.shards[i % len(state.shards)]
        samples.append(
            local_train(
                state.model,
                shard,
                epochs=max(1, cfg.training.epochs),
                lr=cfg.training.lr,
                batch_size=cfg.training.batch_size,
                rng=rngs.stream(cfg.seed, rngs.CALIBRATE, i),
            )
        )
    predictor = calibrate_predictor(samples, DEFAULT_CALIBRATION_GRID, rng)
    text = predictor.to_json() + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _inspect_wire(data: bytes) -> dict:
    version = data[4]
    alpha, beta = struct.unpack_from("<ff", data, 5)
    (layer_count,) = struct.unpack_from("<H", data, 13)
    info = {
        "kind": "encoded_update",
        "version": version,
        "alpha": round(alpha, 6),
        "beta": round(beta, 6),
        "layer_count": layer_count,
        "total_bytes": len(data),
    }
    # peek at the first layer header for the quantizer parameters
    if layer_count and len(data) >= 15 + 15:
        element_count, u_min, u_max = struct.unpack_from("<Iff", data, 15)
        (levels_minus_1,) = struct.unpack_from("<H", data, 27)
        info.update(
            {
                "first_layer_elements": element_count,
                "u_min": u_min,
                "u_max": u_max,
                "levels": levels_minus_1 + 1,
            }
        )
    return info


def _cmd_inspect(args: argparse.Namespace) -> int:
    with open(args.path, "rb") as fh:
        data = fh.read()
    if data[:4] == CHECKPOINT_MAGIC:
        model = load_checkpoint(args.path)
        info = {
            "kind": "checkpoint",
            "version": model.version,
            "input_dim": model.arch.input_dim,
            "hidden_sizes": list(model.arch.hidden_sizes),
            "output_dim": model.arch.output_dim,
            "activation": model.arch.activation,
            "parameters": model.arch.param_count(),
        }
    elif data[:4] == WIRE_MAGIC:
        info = _inspect_wire(data)
    else:
        raise ValueError(f"{args.path}: neither a checkpoint nor an encoded update")
    print(json.dumps(info, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anycostfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", required=True, help="JSON config path")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--mode", choices=("anycost", "fedavg"), default=None)
    run.add_argument("--output", default=None, help="metrics file (stdout when omitted)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--checkpoint", default=None, help="write the final model here")
    run.set_defaults(func=_cmd_run)

    cal = sub.add_parser("calibrate", help="measure a compression-rate predictor")
    cal.add_argument("--config", required=True)
    cal.add_argument("--seed", type=int, default=None)
    cal.add_argument("--samples", type=int, default=16, help="sample updates to average over")
    cal.add_argument("--output", default=None, help="predictor JSON path (stdout when omitted)")
    cal.set_defaults(func=_cmd_calibrate)

    ins = sub.add_parser("inspect", help="dump a checkpoint or encoded-update header")
    ins.add_argument("path")
    ins.set_defaults(func=_cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
