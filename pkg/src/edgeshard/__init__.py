"""edgeshard: schedule and simulate sharded GEMM training on edge fleets."""

from .cost_model import CostBreakdown, cost_breakdown, lower_bound_level, per_device_capacity, pipeline_time
from .errors import ConfigError, InfeasibleError
from .fleet import (
    ChurnTrace,
    DeviceSpec,
    FleetSpec,
    HeterogeneityProfile,
    ParameterServerSpec,
    TailModel,
    homogeneous_profile,
    inject_stragglers,
    parse_churn_trace,
    sample_fleet,
    sample_latency,
)
from .model_dag import (
    GemmDag,
    GemmNode,
    MemoryBreakdown,
    ModelConfig,
    TrainConfig,
    MODEL_PRESETS,
    build_gemm_dag,
    dump_node_table,
    memory_requirements,
    parameter_count,
    total_flops,
)
from .oracle import brute_force_oracle
from .reschedule import PatchResult, reschedule_level, reschedule_on_failure
from .scheduler import (
    Assignment,
    CacheState,
    GemmAllocation,
    LevelPlan,
    SchedulePlan,
    min_makespan_level,
    plan_table,
    schedule_dag,
)
from .simulator import (
    SimConfig,
    SimResult,
    peak_memory,
    run_ablation,
    simulate_batch,
    simulate_with_churn,
)
from .verify import verify_gemm_output

__version__ = "0.1.0"
