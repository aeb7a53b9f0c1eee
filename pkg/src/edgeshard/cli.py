"""Command-line scenario runner.

Subcommands: dag | schedule | simulate | analyze | sweep. Scenarios come
from a JSON config file (--config) or a named preset (--preset); every run
is deterministic given (config, seed) and emits CSV/text artifacts under
--out. Exit codes: 0 success, 2 configuration error, 3 infeasible workload.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import presets as presets_mod
from .errors import ConfigError, InfeasibleError
from .fleet import (
    ChurnTrace,
    FleetSpec,
    HeterogeneityProfile,
    ParameterServerSpec,
    homogeneous_profile,
    inject_stragglers,
    parse_churn_trace,
    sample_fleet,
)
from .model_dag import TrainConfig, build_gemm_dag, dump_node_table, resolve_model
from .scheduler import plan_table, schedule_dag
from .simulator import SimConfig, simulate_batch, simulate_with_churn

CSV_SCHEMA = "edgeshard-csv-v1"


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text(f"# schema={CSV_SCHEMA}\n")
        return
    cols = list(rows[0].keys())
    lines = [f"# schema={CSV_SCHEMA}", ",".join(cols)]
    for row in rows:
        lines.append(",".join(_cell(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def build_fleet(spec: dict, seed: int) -> FleetSpec:
    if "count" not in spec:
        raise ConfigError("fleet config needs a `count` field")
    profile_spec = spec.get("profile", {})
    if profile_spec == "homogeneous":
        profile = homogeneous_profile()
    elif isinstance(profile_spec, dict):
        try:
            profile = HeterogeneityProfile(**profile_spec)
        except TypeError as exc:
            raise ConfigError(f"bad fleet profile: {exc}") from None
    else:
        raise ConfigError("fleet profile must be a dict or 'homogeneous'")
    ps_spec = spec.get("ps", {})
    try:
        ps = ParameterServerSpec(**ps_spec)
    except TypeError as exc:
        raise ConfigError(f"bad parameter server config: {exc}") from None
    fleet = sample_fleet(profile, int(spec["count"]), seed=spec.get("seed", seed), ps=ps)
    stragglers = spec.get("stragglers")
    if stragglers:
        fleet = inject_stragglers(
            fleet,
            float(stragglers.get("fraction", 0.0)),
            float(stragglers.get("slowdown", 1.0)),
            seed=stragglers.get("seed", seed),
        )
    return fleet


def scenario_parts(scenario: dict, seed: int):
    try:
        model = resolve_model(scenario["model"])
        train = TrainConfig(**scenario["train"])
    except KeyError as exc:
        raise ConfigError(f"scenario missing field {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    fleet = build_fleet(scenario.get("fleet", {"count": 8}), seed)
    return model, train, fleet


def cmd_dag(args) -> int:
    scenario = load_scenario(args.config)
    model = resolve_model(scenario["model"]) if "model" in scenario else None
    if model is None:
        raise ConfigError("scenario missing field 'model'")
    try:
        train = TrainConfig(**scenario.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    dag = build_gemm_dag(model, train)
    out = Path(args.out) / "dag_nodes.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_node_table(dag))
    print(f"wrote {out} ({sum(len(l) for l in dag.levels)} nodes, {dag.num_levels} levels)")
    return 0


def cmd_schedule(args) -> int:
    scenario = load_scenario(args.config)
    model, train, fleet = scenario_parts(scenario, args.seed)
    dag = build_gemm_dag(model, train)
    plan = schedule_dag(dag, fleet, block=scenario.get("schedule", {}).get("block", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(plan_table(plan))
    write_csv(
        out / "plan_summary.csv",
        [
            {
                "levels": plan.num_levels,
                "devices": len(plan.device_ids),
                "makespan_s": plan.makespan,
            }
        ],
    )
    print(f"predicted makespan: {plan.makespan!r} s over {plan.num_levels} levels")
    return 0


def _sim_config(scenario: dict, seed: int) -> SimConfig:
    spec = scenario.get("sim", {})
    return SimConfig(
        latency_mode=spec.get("latency_mode", "deterministic"),
        seed=spec.get("seed", seed),
        ablation=frozenset(spec.get("ablation", ())),
        verify_outputs=bool(spec.get("verify_outputs", False)),
    )


def cmd_simulate(args) -> int:
    if args.preset:
        return run_preset(args, presets_mod.SIMULATE_PRESETS)
    scenario = load_scenario(args.config)
    model, train, fleet = scenario_parts(scenario, args.seed)
    dag = build_gemm_dag(model, train)
    plan = schedule_dag(dag, fleet)
    sim = _sim_config(scenario, args.seed)
    churn_path = scenario.get("churn")
    if churn_path:
        trace = parse_churn_trace(Path(churn_path).read_text(), seed=args.seed)
        result = simulate_with_churn(plan, fleet, trace, sim, dag=dag)
    else:
        result = simulate_batch(plan, fleet, sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "scenario": scenario.get("name", Path(args.config).stem),
            "D": fleet.size,
            "model": scenario["model"] if isinstance(scenario["model"], str) else "custom",
            "batch": train.batch_size,
            "seed": sim.seed,
            "runtime_s": result.batch_runtime,
            "max_peak_mem_bytes": result.max_peak_mem,
            "mean_ul_bytes": result.mean_ul,
            "mean_dl_bytes": result.mean_dl,
            "recovery_s": sum(ev["recovery_time"] for ev in result.recovery_events),
        }
    ]
    write_csv(out / "sim.csv", rows)
    if result.recovery_events:
        write_csv(out / "recoveries.csv", result.recovery_events)
    print(f"simulated runtime: {result.batch_runtime!r} s")
    return 0


def run_preset(args, allowed) -> int:
    name = args.preset
    if name not in presets_mod.PRESETS:
        raise ConfigError(f"unknown preset {name!r} (have: {', '.join(sorted(presets_mod.PRESETS))})")
    if allowed and name not in allowed:
        raise ConfigError(f"preset {name!r} does not belong to this subcommand")
    rows = presets_mod.PRESETS[name](seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{name}.csv"
    write_csv(target, rows)
    print(f"wrote {target} ({len(rows)} rows)")
    return 0


def _run_one_preset(item):
    name, seed = item
    return name, presets_mod.PRESETS[name](seed=seed)


def cmd_analyze(args) -> int:
    names = [args.preset] if args.preset else list(presets_mod.ANALYZE_PRESETS)
    for name in names:
        if name not in presets_mod.PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one_preset, [(n, args.seed) for n in names]))
    else:
        results = [(n, presets_mod.PRESETS[n](seed=args.seed)) for n in names]
    for name, rows in results:
        write_csv(out / f"{name}.csv", rows)
        print(f"wrote {out / (name + '.csv')} ({len(rows)} rows)")
    return 0


def cmd_sweep(args) -> int:
    if not args.preset:
        raise ConfigError("sweep requires --preset (fig9|fig10|fig11|straggler)")
    return run_preset(args, presets_mod.SWEEP_PRESETS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeshard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("dag", cmd_dag),
        ("schedule", cmd_schedule),
        ("simulate", cmd_simulate),
        ("analyze", cmd_analyze),
        ("sweep", cmd_sweep),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="scenario JSON file")
        p.add_argument("--preset", default=None, help="named scenario preset")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("dag", "schedule") and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        if args.command == "simulate" and not (args.config or args.preset):
            raise ConfigError("simulate requires --config or --preset")
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        level = f" (level {exc.level})" if exc.level is not None else ""
        print(f"infeasible: {exc}{level}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
