"""Analytic communication/runtime models for conventional parallel training.

Covers per-device communication volume under data/pipeline/tensor
parallelism, the matching volumes for the parameter-server sharded system,
crossover device counts where the sharded system's per-device volume drops
below the conventional one, a pipeline-aware tightened crossover, and
synchronous-step runtime models for an even-share (cloud-style) and a
stage-balanced (edge-style) baseline, including their failure-recovery
behavior (checkpoint restore and layer recompute).

Volumes are exact integers in bytes, so proportionality laws (flat in D for
the conventional stack, 1/D for the sharded system) hold in exact
arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .cost_model import pipeline_time
from .errors import ConfigError
from .fleet import DeviceSpec, FleetSpec
from .model_dag import ModelConfig, TrainConfig


@dataclass(frozen=True)
class ParallelismConfig:
    tp_degree: int = 1
    pp_stages: int = 1
    dp_replicas: int = 1

    def __post_init__(self):
        if min(self.tp_degree, self.pp_stages, self.dp_replicas) < 1:
            raise ConfigError("parallelism degrees must be >= 1")

    @property
    def total_devices(self) -> int:
        return self.tp_degree * self.pp_stages * self.dp_replicas


@dataclass(frozen=True)
class VolumeReport:
    per_device_ul: int
    per_device_dl: int
    total: int
    components: dict

    @property
    def per_device_total(self) -> int:
        return self.per_device_ul + self.per_device_dl


def baseline_volume(model: ModelConfig, train: TrainConfig, par: ParallelismConfig) -> VolumeReport:
    """Per-device bytes per batch under DP(+PP)(+TP).

    Components: the gradient AllReduce share (4h^2 + 3hH)L/t, inter-stage
    activations 2*B*s*h when p > 1, and the per-layer AllReduce traffic
    2*B*s*h when t > 1. Uplink and downlink are symmetric.
    """
    if par.pp_stages > model.num_layers:
        raise ConfigError(
            f"pipeline stages ({par.pp_stages}) cannot exceed layers ({model.num_layers})"
        )
    h, hi = model.hidden_dim, model.intermediate_dim
    b = model.dtype_bytes
    bsh = train.batch_size * train.seq_len * h
    dp_term = (4 * h * h + 3 * h * hi) * model.num_layers * b // par.tp_degree
    pp_term = 2 * bsh * b if par.pp_stages > 1 else 0
    tp_term = 2 * bsh * b if par.tp_degree > 1 else 0
    per_device = dp_term + pp_term + tp_term
    return VolumeReport(
        per_device_ul=per_device,
        per_device_dl=per_device,
        total=per_device * par.total_devices,
        components={"dp_allreduce": dp_term, "pp_activations": pp_term, "tp_allreduce": tp_term},
    )


def cleave_volume(model: ModelConfig, train: TrainConfig, devices: int) -> VolumeReport:
    """Sharded-system volumes: fixed totals split evenly across D devices.

    Downlink ships activations and weight rows/columns once per use,
    (8Bsh^2 + 18BshH + 4Bs^2h)L elements in total; uplink returns gradients
    (all parameters once), intermediate results, and attention activations,
    ((4h^2+3hH) + Bsh + 2BsH + 5Bsh + Bs^2h)L elements.
    """
    if devices < 1:
        raise ConfigError("device count must be >= 1")
    h, hi, L = model.hidden_dim, model.intermediate_dim, model.num_layers
    b = model.dtype_bytes
    B, s = train.batch_size, train.seq_len
    dl_elems = (8 * B * s * h * h + 18 * B * s * h * hi + 4 * B * s * s * h) * L
    ul_elems = ((4 * h * h + 3 * h * hi) + B * s * h + 2 * B * s * hi + 5 * B * s * h + B * s * s * h) * L
    dl_total = dl_elems * b
    ul_total = ul_elems * b
    return VolumeReport(
        per_device_ul=ul_total // devices,
        per_device_dl=dl_total // devices,
        total=ul_total + dl_total,
        components={
            "dl_weights_activations": (8 * B * s * h * h + 18 * B * s * h * hi) * L * b,
            "dl_attention": 4 * B * s * s * h * L * b,
            "ul_parameters": (4 * h * h + 3 * h * hi) * L * b,
            "ul_intermediate": B * s * h * L * b,
            "ul_activations": (2 * B * s * hi + 5 * B * s * h + B * s * s * h) * L * b,
        },
    )


def crossover_downlink(model: ModelConfig, train: TrainConfig, tp_degree: int) -> int:
    """Smallest D where the sharded system wins on downlink volume:

        D > 3(80 + 4s)L / (16h/(tBs) + 4)

    derived under the standard intermediate size H = 4h; exact rational
    evaluation, returns the smallest strictly-greater integer.
    """
    if model.num_layers == 0:
        return 0
    s, L, h = train.seq_len, model.num_layers, model.hidden_dim
    t, B = tp_degree, train.batch_size
    threshold = Fraction(3 * (80 + 4 * s) * L * t * B * s, 16 * h + 4 * t * B * s)
    return int(threshold) + 1 if threshold.denominator == 1 else math.floor(threshold) + 1


def crossover_uplink(model: ModelConfig, train: TrainConfig, tp_degree: int) -> int:
    """Smallest D where the sharded system wins on uplink volume:

        D > (8h/(Bs) + 13 + s)L / (8h/(tBs) + 2)
    """
    if train.seq_len < 1:
        raise ConfigError("seq_len must be >= 1")
    s, L, h = train.seq_len, model.num_layers, model.hidden_dim
    t, B = tp_degree, train.batch_size
    threshold = Fraction(L * t * (8 * h + (13 + s) * B * s), 8 * h + 2 * t * B * s)
    return int(threshold) + 1 if threshold.denominator == 1 else math.floor(threshold) + 1


def tightened_crossover(
    num_levels: int,
    units_per_level: int,
    unit_dl: float,
    unit_comp: float,
    unit_ul: float,
    alpha_lat: float,
    beta_bw: float,
    baseline_volume_bytes: float,
    dl_bw: float,
    d_max: int = 1 << 20,
) -> int | None:
    """Pipeline-aware crossover via integer scan: smallest D with

        D > S * T_pipeline(ceil(W/D)) / (alpha*ceil(log2 D) + beta*V/W_d)

    where T_pipeline streams a device's share of the level's W units.
    Returns None when no D <= d_max satisfies the condition.
    """
    if min(alpha_lat, beta_bw, dl_bw) < 0 or units_per_level < 1 or num_levels < 1:
        raise ConfigError("tightened crossover needs nonnegative coefficients")
    d = 1
    while d <= d_max:
        share = max(1, math.ceil(units_per_level / d))
        lhs = num_levels * pipeline_time(unit_dl, unit_comp, unit_ul, share)
        denom = alpha_lat * max(1, math.ceil(math.log2(d)) if d > 1 else 1) + beta_bw * (
            baseline_volume_bytes / dl_bw
        )
        if denom > 0 and d > lhs / denom:
            return d
        d = d + 1 if d < 1024 else min(d * 2, d_max + 1)
    return None


# ---------------------------------------------------------------------------
# synchronous-step runtime models
# ---------------------------------------------------------------------------


def _total_flops(model: ModelConfig, train: TrainConfig) -> float:
    h, hi = model.hidden_dim, model.intermediate_dim
    B, s = train.batch_size, train.seq_len
    per_layer = 6 * B * s * (4 * h * h + 3 * h * hi + 2 * s * h)
    return per_layer * model.num_layers


def baseline_runtime(
    model: ModelConfig,
    train: TrainConfig,
    par: ParallelismConfig,
    fleet: FleetSpec,
    mode: str = "alpa",
) -> float:
    """Per-batch runtime of a conventional synchronous stack.

    alpa: every device gets an even share of compute and the full
    per-device communication volume of `baseline_volume`. dtfm: pipeline
    stages sized to device compute (stage-balanced), but every device joins
    the data-parallel AllReduce of the full model gradients at its own link
    rate. The step ends when the slowest device finishes.
    """
    if fleet.size < par.total_devices:
        raise ConfigError(
            f"fleet has {fleet.size} devices, parallelism needs {par.total_devices}"
        )
    if mode not in ("alpa", "dtfm"):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    devices = fleet.devices[: par.total_devices]
    flops_total = _total_flops(model, train)

    if mode == "alpa":
        vol = baseline_volume(model, train, par)
        share = flops_total / len(devices)
        return max(
            vol.per_device_ul / d.ul_bw + vol.per_device_dl / d.dl_bw + share / d.flops
            for d in devices
        )

    # dtfm: compute balanced to capability; DP AllReduce of full gradients
    h, hi, L = model.hidden_dim, model.intermediate_dim, model.num_layers
    b = model.dtype_bytes
    grad_bytes = (4 * h * h + 3 * h * hi) * L * b
    pp_bytes = 2 * train.batch_size * train.seq_len * h * b if par.pp_stages > 1 else 0
    fleet_flops = sum(d.flops for d in devices)
    worst = 0.0
    for d in devices:
        comp = flops_total * (d.flops / fleet_flops) / d.flops  # balanced share
        comm = grad_bytes / d.ul_bw + grad_bytes / d.dl_bw + pp_bytes / d.dl_bw
        worst = max(worst, comp + comm)
    return worst


def recovery_checkpoint_restore(state_bytes: float, device: DeviceSpec) -> float:
    """Restore time: re-download the failed worker's training state."""
    return state_bytes / device.dl_bw + device.dl_overhead


def recovery_layer_recompute(model: ModelConfig, train: TrainConfig, device: DeviceSpec) -> float:
    """Recompute one layer (forward + backward) for the batch in flight on a
    single replacement device and re-ship its hidden state. A pipeline stage
    handles every microbatch of the step, so the full batch is charged."""
    h, hi = model.hidden_dim, model.intermediate_dim
    s = train.seq_len
    tokens = train.batch_size * s
    layer_flops = 6 * tokens * (4 * h * h + 3 * h * hi + 2 * s * h)
    hidden_bytes = 2 * tokens * h * model.dtype_bytes
    return layer_flops / device.flops + hidden_bytes / device.dl_bw + device.dl_overhead
