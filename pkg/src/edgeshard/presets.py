"""Canned desk-scale scenarios: one preset per headline figure/table.

Each preset builds configs deterministically from an integer seed and
returns CSV-ready rows; the CLI writes them out. Scales are chosen so a
laptop reproduces the qualitative results (volume curves, scaling slopes,
straggler/churn behavior, tail tables) in seconds to a few minutes.
"""

from __future__ import annotations

import math

from . import baselines, tail
from .fleet import (
    GB,
    MB,
    TFLOPS,
    FleetSpec,
    HeterogeneityProfile,
    ParameterServerSpec,
    TailModel,
    homogeneous_profile,
    inject_stragglers,
    sample_fleet,
)
from .model_dag import (
    MODEL_PRESETS,
    TrainConfig,
    build_gemm_dag,
    memory_requirements,
    parameter_count,
)
from .reschedule import reschedule_level
from .scheduler import CacheState, schedule_dag
from .simulator import SimConfig, run_ablation, simulate_batch

# fleet whose uplink is the only binding resource: isolates link scaling
# (1 MB/s uplink is the constrained-edge figure; downlink is plugged-in)
UL_BOUND_PROFILE = homogeneous_profile(
    flops=10 * TFLOPS,
    dl_bw=1000 * MB,
    ul_bw=1 * MB,
    dl_overhead=0.001,
    ul_overhead=0.001,
    mem=2 * GB,
)

BIG_PS = ParameterServerSpec(aggregate_bw=400e9, update_flops=1e13)


def preset_fig1_volume(seed: int = 0) -> list[dict]:
    """Per-device communication volume vs device count: flat for the
    conventional stack, 1/D for the sharded system."""
    model = MODEL_PRESETS["llama2-13b"]
    train = TrainConfig(batch_size=128, seq_len=1024)
    rows = []
    par = baselines.ParallelismConfig(tp_degree=8, pp_stages=4, dp_replicas=4)
    base = baselines.baseline_volume(model, train, par)
    for exp in range(6, 14):
        d = 1 << exp
        shard = baselines.cleave_volume(model, train, d)
        rows.append(
            {
                "D": d,
                "system": "baseline_3d",
                "per_device_ul_bytes": base.per_device_ul,
                "per_device_dl_bytes": base.per_device_dl,
            }
        )
        rows.append(
            {
                "D": d,
                "system": "ps_sharded",
                "per_device_ul_bytes": shard.per_device_ul,
                "per_device_dl_bytes": shard.per_device_dl,
            }
        )
    return rows


def preset_table5_tail(seed: int = 0) -> list[dict]:
    return tail.expected_max_table()


def preset_crossover(seed: int = 0) -> list[dict]:
    model = MODEL_PRESETS["llama2-13b"]
    train = TrainConfig(batch_size=128, seq_len=1024)
    rows = [
        {
            "quantity": "downlink_crossover_D",
            "value": baselines.crossover_downlink(model, train, tp_degree=8),
        },
        {
            "quantity": "uplink_crossover_D",
            "value": baselines.crossover_uplink(model, train, tp_degree=8),
        },
    ]
    par = baselines.ParallelismConfig(tp_degree=8, pp_stages=4, dp_replicas=4)
    vol = baselines.baseline_volume(model, train, par)
    tight = baselines.tightened_crossover(
        num_levels=12 * model.num_layers,
        units_per_level=train.batch_size,
        unit_dl=0.02,
        unit_comp=0.05,
        unit_ul=0.04,
        alpha_lat=0.005,
        beta_bw=1.0,
        baseline_volume_bytes=float(vol.per_device_total),
        dl_bw=50 * MB,
    )
    rows.append({"quantity": "tightened_crossover_D", "value": tight})
    return rows


def preset_tail_mc(seed: int = 0, samples: int = 200_000) -> list[dict]:
    """Closed forms versus Monte-Carlo for the tail operators."""
    rows = []
    for alpha, beta in ((2.0, 0.05), (3.0, 0.1)):
        closed = tail.cvar_pareto(1.0, alpha, beta)
        model = TailModel(kind="pareto", x_m=1.0, alpha=alpha)
        import numpy as np

        from .fleet import sample_latency

        rng = np.random.default_rng(seed)
        draws = sample_latency(model, rng, size=samples)
        emp = tail.risk_adjusted_plan_cost(draws, tail.RiskParams(beta=beta))["cvar"]
        rows.append(
            {"quantity": f"cvar_pareto_a{alpha:g}_b{beta:g}", "closed_form": closed, "mc": emp}
        )
    rep = tail.replication_expected_min(1.0, 2.0, 2, samples=samples, seed=seed)
    rows.append(
        {
            "quantity": "replication_min_r2_a2",
            "closed_form": rep["paper_formula"],
            "mc": rep["mc_truth"],
        }
    )
    coded = tail.coded_order_stat_formula(1.0, 3.0, 3, 2, samples=samples, seed=seed)
    rows.append(
        {
            "quantity": "coded_orderstat_n3_k2_a3",
            "closed_form": coded["paper_formula"],
            "mc": coded["mc_truth"],
        }
    )
    return rows


def strong_scaling_fleet(d: int, seed: int = 0) -> FleetSpec:
    return sample_fleet(UL_BOUND_PROFILE, d, seed, ps=BIG_PS)


def preset_fig9_strong_scaling(seed: int = 0, device_counts=(32, 64, 128, 256)) -> list[dict]:
    """Fixed model and batch, growing fleet: sharded runtime vs baseline."""
    model = MODEL_PRESETS["opt-13b"]
    train = TrainConfig(batch_size=32, seq_len=1024)
    dag = build_gemm_dag(model, train)
    rows = []
    for d in device_counts:
        fleet = strong_scaling_fleet(d, seed)
        plan = schedule_dag(dag, fleet)
        sim = simulate_batch(plan, fleet, SimConfig(seed=seed))
        # baseline scales out through data parallelism: per-device volume
        # stays constant, only the compute share shrinks
        par = baselines.ParallelismConfig(tp_degree=2, pp_stages=4, dp_replicas=d // 8)
        alpa = baselines.baseline_runtime(model, train, par, fleet, mode="alpa")
        rows.append({"D": d, "system": "ps_sharded", "runtime_s": sim.batch_runtime})
        rows.append({"D": d, "system": "alpa_like", "runtime_s": alpa})
    return rows


MODEL_SCALING_POINTS = ("llama2-7b", "llama2-13b", "llama2-70b")


def model_scaling_devices(name: str, anchor: str = "llama2-70b", anchor_devices: int = 1024) -> int:
    ref = parameter_count(MODEL_PRESETS[anchor])
    return max(8, round(anchor_devices * parameter_count(MODEL_PRESETS[name]) / ref))


def preset_fig10_model_scaling(seed: int = 0) -> list[dict]:
    """Model size grows with the fleet: runtime should stay flat."""
    train = TrainConfig(batch_size=128, seq_len=1024)
    rows = []
    for name in MODEL_SCALING_POINTS:
        model = MODEL_PRESETS[name]
        d = model_scaling_devices(name)
        fleet = sample_fleet(UL_BOUND_PROFILE, d, seed, ps=BIG_PS)
        dag = build_gemm_dag(model, train)
        plan = schedule_dag(dag, fleet)
        sim = simulate_batch(plan, fleet, SimConfig(seed=seed))
        rows.append({"model": name, "D": d, "runtime_s": sim.batch_runtime})
    return rows


def preset_fig11_batch_scaling(seed: int = 0, batches=(32, 64, 128, 256)) -> list[dict]:
    """Batch size grows with the fleet (2 sequences per device)."""
    model = MODEL_PRESETS["opt-13b"]
    rows = []
    for batch in batches:
        train = TrainConfig(batch_size=batch, seq_len=1024, microbatch_size=2)
        d = batch  # two sequences per device
        fleet = sample_fleet(UL_BOUND_PROFILE, d, seed, ps=BIG_PS)
        dag = build_gemm_dag(model, train)
        plan = schedule_dag(dag, fleet)
        sim = simulate_batch(plan, fleet, SimConfig(seed=seed))
        rows.append({"batch": batch, "D": d, "runtime_s": sim.batch_runtime})
    return rows


STRAGGLER_PROFILE = homogeneous_profile(
    flops=10 * TFLOPS,
    dl_bw=50 * MB,
    ul_bw=7 * MB,
    dl_overhead=0.005,
    ul_overhead=0.005,
    mem=2 * GB,
)


def straggler_scenario(seed: int = 0, devices: int = 32):
    model = MODEL_PRESETS["opt-13b"]
    train = TrainConfig(batch_size=8, seq_len=1024)
    fleet = sample_fleet(STRAGGLER_PROFILE, devices, seed)
    return model, train, fleet


def preset_straggler(seed: int = 0, fractions=(0.0, 0.1, 0.2, 0.3)) -> list[dict]:
    """Latency under a growing straggler share, for all three systems."""
    model, train, fleet = straggler_scenario(seed)
    dag = build_gemm_dag(model, train)
    par = baselines.ParallelismConfig(tp_degree=1, pp_stages=8, dp_replicas=4)
    rows = []
    for fraction in fractions:
        straggled = inject_stragglers(fleet, fraction, 10.0, seed=seed)
        plan = schedule_dag(dag, straggled)
        sim = simulate_batch(plan, straggled, SimConfig(seed=seed))
        rows.append(
            {
                "straggler_fraction": fraction,
                "system": "ps_sharded",
                "runtime_s": sim.batch_runtime,
            }
        )
        for mode in ("alpa", "dtfm"):
            runtime = baselines.baseline_runtime(model, train, par, straggled, mode=mode)
            rows.append(
                {
                    "straggler_fraction": fraction,
                    "system": f"{mode}_like",
                    "runtime_s": runtime,
                }
            )
    return rows


def churn_scenario(seed: int = 0, devices: int = 256):
    model = MODEL_PRESETS["opt-13b"]
    train = TrainConfig(batch_size=128, seq_len=1024)
    fleet = sample_fleet(STRAGGLER_PROFILE, devices, seed)
    return model, train, fleet


def preset_churn_recovery(seed: int = 0) -> list[dict]:
    """Single mid-level failure: shard patching vs restore/recompute."""
    model, train, fleet = churn_scenario(seed)
    dag = build_gemm_dag(model, train)
    plan = schedule_dag(dag, fleet)
    level = plan.levels[0]
    victim = level.allocations[0].assignments[0].device_id
    live = fleet.without([victim])
    patch = reschedule_level(level, {victim}, live, plan.dtype_bytes)
    state_bytes = memory_requirements(model, train).total_bytes / fleet.size
    restore = baselines.recovery_checkpoint_restore(state_bytes, fleet.devices[0])
    recompute = baselines.recovery_layer_recompute(model, train, fleet.devices[0])
    return [
        {"system": "ps_sharded_patch", "recovery_s": patch["recovery_time"]},
        {"system": "checkpoint_restore", "recovery_s": restore},
        {"system": "layer_recompute", "recovery_s": recompute},
    ]


def ablation_scenario(seed: int = 0, devices: int = 32):
    model = MODEL_PRESETS["opt-1.3b"]
    train = TrainConfig(batch_size=16, seq_len=512)
    fleet = inject_stragglers(
        sample_fleet(HeterogeneityProfile(), devices, seed), 0.2, 10.0, seed=seed
    )
    return model, train, fleet


def preset_ablation(seed: int = 0) -> list[dict]:
    """Disable one subsystem at a time on a straggler-laden fleet."""
    model, train, fleet = ablation_scenario(seed)
    dag = build_gemm_dag(model, train)
    plan = schedule_dag(dag, fleet)
    full = simulate_batch(plan, fleet, SimConfig(seed=seed))
    rows = [
        {
            "mode": "full",
            "runtime_s": full.batch_runtime,
            "max_peak_mem_bytes": full.max_peak_mem,
            "mean_ul_bytes": full.mean_ul,
        }
    ]
    for mode in ("no_tp", "no_ps", "no_heterogeneity"):
        result = run_ablation(dag, fleet, mode, SimConfig(seed=seed))
        rows.append(
            {
                "mode": mode,
                "runtime_s": result.batch_runtime,
                "max_peak_mem_bytes": result.max_peak_mem,
                "mean_ul_bytes": result.mean_ul,
            }
        )
    return rows


MOBILE_CAP = 0.5 * GB

MOBILE_PROFILE = HeterogeneityProfile(
    phone_fraction=0.7,
    phone_mem=MOBILE_CAP,
    laptop_mem=MOBILE_CAP,
    dl_overhead=0.002,
    ul_overhead=0.002,
)


def preset_memory_8192(seed: int = 0, devices: int = 8192) -> list[dict]:
    """Peak per-device memory of 8192-device plans for every model scale."""
    from .simulator import peak_memory

    train = TrainConfig(batch_size=128, seq_len=1024)
    rows = []
    for name in MODEL_SCALING_POINTS:
        model = MODEL_PRESETS[name]
        fleet = sample_fleet(MOBILE_PROFILE, devices, seed, ps=BIG_PS)
        dag = build_gemm_dag(model, train)
        plan = schedule_dag(dag, fleet)
        peaks = peak_memory(plan, fleet)
        rows.append(
            {
                "model": name,
                "D": devices,
                "max_peak_mem_bytes": max(peaks.values()),
                "cap_bytes": int(MOBILE_CAP),
            }
        )
    return rows


PRESETS = {
    "fig1": preset_fig1_volume,
    "table5": preset_table5_tail,
    "crossover": preset_crossover,
    "tailcmp": preset_tail_mc,
    "fig9": preset_fig9_strong_scaling,
    "fig10": preset_fig10_model_scaling,
    "fig11": preset_fig11_batch_scaling,
    "straggler": preset_straggler,
    "churn": preset_churn_recovery,
    "ablation": preset_ablation,
    "memory8192": preset_memory_8192,
}

ANALYZE_PRESETS = ("fig1", "table5", "crossover", "tailcmp")
SWEEP_PRESETS = ("fig9", "fig10", "fig11", "straggler")
SIMULATE_PRESETS = ("churn", "ablation", "memory8192")
