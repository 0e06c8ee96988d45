"""Command-line pipeline: simulate, collect, train, optimize, evaluate, report.

Configuration is one strict JSON document; unknown keys fail loudly, defaults
are filled explicitly, and the canonical content hash of the effective config
is stamped into every artifact manifest so any result can be traced back to
exactly one (config, seeds) pair. Stages communicate only through files under
the output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .agent import Policy, RewardWeights
from .dataset import collect_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, ModelError
from .harness import (
    AgentTrainConfig,
    CounterfactualConfig,
    EvalConfig,
    WMTrainConfig,
    WorldModelBundle,
    WorldModelEnvConfig,
    counterfactual_suite,
    episode_row,
    evaluate_policy,
    generation_metrics,
    read_rows_csv,
    run_training,
    write_manifest,
    write_rows_csv,
)
from .scenario import ScenarioConfig, build_scenario, load_scenario, scenario_from_dict, scenario_to_dict

OUT_ROOT_ENV = "CELLTWIN_OUT_ROOT"

DEFAULTS: dict = {
    "scenario": {"preset": "hex7", "seed": 0},
    "out_dir": "out",
    "seeds": [0, 1, 2, 3, 4],
    "jobs": 1,
    "dataset": {
        "n_days": 16,
        "kinds": ["traffic", "users", "rsrp"],
        "split": [0.8, 0.1, 0.1],
    },
    "worldmodel": {
        "diffusion_steps": 100,
        "beta_min": 1e-4,
        "beta_max": 0.02,
        "n_experts": 3,
        "expert_hidden": [64, 64],
        "gate_hidden": [32],
        "cond_emb_dim": 8,
        "time_dim": 8,
        "train_steps": 2500,
        "batch_size": 64,
        "lr": 1e-3,
        "p_uncond": 0.1,
        "guidance_w": 1.0,
        "memory_kinds": ["traffic", "users"],
        "seed": 11,
    },
    "agent": {
        "updates": 300,
        "episodes_per_update": 6,
        "lr": 0.03,
        "hidden": [32],
        "bias_levels": [0.0, 3.0, 6.0],
        "seed": 3,
        "env": {"day_pool": 32, "rsrp_pool": 12, "rsrp_draws": 4, "sample_seed": 19},
    },
    "reward": {
        "lambda_e": 1.0,
        "lambda_r": 1.0,
        "lambda_d": 2.0,
        "rsrp_lo_dbm": -120.0,
        "rsrp_hi_dbm": -80.0,
    },
    "evaluation": {
        "tau": 0.2,
        "percentile": 25.0,
        "greedy_margin_db": 8.0,
        "baseline_bias_db": 3.0,
        "day": 1,
        "predict_mode": "long_term",
        "schemes": ["agent", "empirical", "custom", "greedy"],
        "n_gen_samples": 48,
    },
    "counterfactual": {
        "fractions": [0.5, 0.6, 0.8],
        "lora_rank": 4,
        "lora_alpha": 8.0,
        "adapt_steps": 200,
        "adapt_days": 4,
        "adapt_lr": 2e-3,
        "adapt_seed": 43,
        "retrain_agent": False,
        "retrain_updates": 120,
    },
}


def _merge_strict(defaults, given, path: str):
    """Fill defaults, rejecting unknown keys and gross type mismatches."""
    if isinstance(defaults, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"config key {path or '<root>'} must be an object")
        unknown = set(given) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{sorted(unknown)[0]}")
        return {
            key: _merge_strict(default, given[key], f"{path}.{key}" if path else key)
            if key in given else default
            for key, default in defaults.items()
        }
    if given is None:
        return defaults
    if isinstance(defaults, bool) is not isinstance(given, bool):
        raise ConfigError(f"config key {path} must be a boolean")
    if isinstance(defaults, (int, float)) and not isinstance(given, (int, float)):
        raise ConfigError(f"config key {path} must be a number")
    if isinstance(defaults, str) and not isinstance(given, str):
        raise ConfigError(f"config key {path} must be a string")
    if isinstance(defaults, list) and not isinstance(given, list):
        raise ConfigError(f"config key {path} must be an array")
    return given


@dataclass
class RunConfig:
    effective: dict
    scenario: ScenarioConfig
    config_hash: str
    out_dir: Path

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.effective["seeds"])

    def reward_weights(self) -> RewardWeights:
        return RewardWeights(**self.effective["reward"])

    def wm_config(self) -> WMTrainConfig:
        wm = dict(self.effective["worldmodel"])
        wm["expert_hidden"] = tuple(wm["expert_hidden"])
        wm["gate_hidden"] = tuple(wm["gate_hidden"])
        wm["memory_kinds"] = tuple(wm["memory_kinds"])
        return WMTrainConfig(**wm)

    def agent_config(self) -> AgentTrainConfig:
        ag = {k: v for k, v in self.effective["agent"].items() if k != "env"}
        ag["hidden"] = tuple(ag["hidden"])
        ag["bias_levels"] = tuple(ag["bias_levels"])
        return AgentTrainConfig(**ag)

    def env_config(self) -> WorldModelEnvConfig:
        return WorldModelEnvConfig(**self.effective["agent"]["env"])

    def eval_config(self) -> EvalConfig:
        ev = self.effective["evaluation"]
        return EvalConfig(
            tau=ev["tau"], percentile=ev["percentile"],
            greedy_margin_db=ev["greedy_margin_db"], baseline_bias_db=ev["baseline_bias_db"],
            day=ev["day"], predict_mode=ev["predict_mode"],
        )

    def cf_config(self) -> CounterfactualConfig:
        cf = dict(self.effective["counterfactual"])
        cf["fractions"] = tuple(cf["fractions"])
        return CounterfactualConfig(**cf)

    # -- artifact layout -------------------------------------------------------

    def dataset_path(self, kind: str) -> Path:
        return self.out_dir / "datasets" / f"{kind}.npz"

    def model_path(self, kind: str) -> Path:
        return self.out_dir / "models" / f"{kind}.npz"

    def model_paths(self) -> dict[str, str]:
        return {k: str(self.model_path(k)) for k in ("traffic", "users", "rsrp")}

    @property
    def policy_path(self) -> Path:
        return self.out_dir / "models" / "policy.npz"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"

    def manifest(self, command: str, extra: dict | None = None) -> dict:
        base = {
            "command": command,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "versions": {"celltwin": __version__, "numpy": np.__version__},
        }
        if extra:
            base.update(extra)
        return base


def parse_config(path: str) -> RunConfig:
    """Load one strict config file and resolve it to its effective form."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            given = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(given, dict):
        raise ConfigError("config root must be a JSON object")
    scenario_field = given.get("scenario", DEFAULTS["scenario"])
    if isinstance(scenario_field, str):
        scenario_path = Path(scenario_field)
        if not scenario_path.is_absolute():
            scenario_path = Path(path).parent / scenario_path
        scenario = load_scenario(str(scenario_path))
    else:
        scenario = scenario_from_dict(scenario_field)
    body = {k: v for k, v in given.items() if k != "scenario"}
    effective = _merge_strict({k: v for k, v in DEFAULTS.items() if k != "scenario"}, body, "")
    # Inline the fully resolved scenario so the hash covers its content.
    effective = {"scenario": scenario_to_dict(scenario), **effective}
    if not effective["seeds"]:
        raise ConfigError("config key seeds must be nonempty")
    canonical = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()
    out_root = os.environ.get(OUT_ROOT_ENV, "")
    out_dir = Path(out_root) / effective["out_dir"] if out_root else Path(effective["out_dir"])
    return RunConfig(effective=effective, scenario=scenario, config_hash=digest, out_dir=out_dir)


# -- subcommands --------------------------------------------------------------------


def cmd_simulate(run: RunConfig, args) -> int:
    oracle = build_scenario(run.scenario)
    days = args.days
    step = run.scenario.traffic_step_hours
    out = Path(args.out) if args.out else run.out_dir / "traffic.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cell_id,t_hours,load_mbps\n")
        for day in range(days):
            for k in range(24 // step):
                t = day * 24 + k * step
                for cell in oracle.cells:
                    fh.write(f"{cell.id},{t},{oracle.traffic_at(cell.id, t)!r}\n")
    print(f"wrote {out} ({oracle.n_cells * days * (24 // step)} rows)")
    return 0


def cmd_collect(run: RunConfig, args) -> int:
    oracle = build_scenario(run.scenario)
    ds_cfg = run.effective["dataset"]
    datasets = collect_dataset(
        oracle, n_days=ds_cfg["n_days"], kinds=tuple(ds_cfg["kinds"]),
        split_fractions=tuple(ds_cfg["split"]),
    )
    (run.out_dir / "datasets").mkdir(parents=True, exist_ok=True)
    for kind, sample_set in datasets.items():
        write_dataset(sample_set, str(run.dataset_path(kind)))
        print(f"{kind}: {len(sample_set)} samples -> {run.dataset_path(kind)}")
    write_manifest(run.manifest("collect"), str(run.out_dir / "datasets" / "manifest.json"))
    return 0


def cmd_train_wm(run: RunConfig, args) -> int:
    datasets = {
        kind: read_dataset(str(run.dataset_path(kind)))
        for kind in ("traffic", "users", "rsrp")
    }
    bundle, curves = WorldModelBundle.train_from_datasets(datasets, run.wm_config())
    (run.out_dir / "models").mkdir(parents=True, exist_ok=True)
    bundle.save(run.model_paths())
    rows = [
        {"kind": kind, "step": i, "loss": loss}
        for kind, losses in curves.items()
        for i, loss in enumerate(losses)
    ]
    write_rows_csv(rows, str(run.out_dir / "models" / "wm_losses.csv"), ("kind", "step", "loss"))
    write_manifest(run.manifest("train-wm"), str(run.out_dir / "models" / "manifest.json"))
    for kind, losses in curves.items():
        print(f"{kind}: final loss {np.mean(losses[-50:]):.4f} -> {run.model_path(kind)}")
    return 0


def cmd_eval_gen(run: RunConfig, args) -> int:
    bundle = WorldModelBundle.load(run.model_paths())
    metrics = generation_metrics(bundle, run.scenario, run.effective["evaluation"]["n_gen_samples"])
    run.reports_dir.mkdir(parents=True, exist_ok=True)
    columns = tuple(["metric", "value"])
    rows = [{"metric": k, "value": v} for k, v in sorted(metrics.items())]
    write_rows_csv(rows, str(run.reports_dir / "generation.csv"), columns)
    write_manifest(run.manifest("eval-gen"), str(run.reports_dir / "generation_manifest.json"))
    for row in rows:
        print(f"{row['metric']}: {row['value']:.4f}")
    return 0


def cmd_optimize(run: RunConfig, args) -> int:
    bundle = WorldModelBundle.load(run.model_paths())
    oracle = build_scenario(run.scenario)
    policy, curve = run_training(
        bundle, oracle, run.reward_weights(), run.agent_config(), run.env_config()
    )
    run.policy_path.parent.mkdir(parents=True, exist_ok=True)
    policy.save(str(run.policy_path))
    rows = [{"update": i, "mean_return": r} for i, r in enumerate(curve)]
    write_rows_csv(rows, str(run.out_dir / "models" / "learning_curve.csv"), ("update", "mean_return"))
    write_manifest(run.manifest("optimize"), str(run.out_dir / "models" / "policy_manifest.json"))
    print(f"trained policy over {len(curve)} updates; "
          f"return {curve[0]:+.3f} -> {np.mean(curve[-max(1, len(curve) // 10):]):+.3f}")
    return 0


def _evaluate_one_seed(payload) -> list[dict]:
    scenario, schemes, seed, weights, bundle, policy, cfg = payload
    results = evaluate_policy(scenario, schemes, (seed,), weights, bundle=bundle, policy=policy, cfg=cfg)
    return [episode_row(r, "default", None, results) for r in results]


def cmd_evaluate(run: RunConfig, args) -> int:
    schemes = tuple(run.effective["evaluation"]["schemes"])
    bundle = WorldModelBundle.load(run.model_paths()) if "agent" in schemes else None
    policy = Policy.load(str(run.policy_path)) if "agent" in schemes else None
    payloads = [
        (run.scenario, schemes, seed, run.reward_weights(), bundle, policy, run.eval_config())
        for seed in run.seeds
    ]
    jobs = args.jobs if args.jobs is not None else run.effective["jobs"]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_evaluate_one_seed, payloads))
    else:
        per_seed = [_evaluate_one_seed(p) for p in payloads]
    rows = [row for chunk in per_seed for row in chunk]
    run.reports_dir.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, str(run.reports_dir / "evaluation.csv"))
    write_manifest(run.manifest("evaluate"), str(run.reports_dir / "evaluation_manifest.json"))
    print(f"wrote {run.reports_dir / 'evaluation.csv'} ({len(rows)} rows)")
    return 0


def cmd_counterfactual(run: RunConfig, args) -> int:
    bundle = WorldModelBundle.load(run.model_paths())
    policy = Policy.load(str(run.policy_path))
    rows, wm_rows = counterfactual_suite(
        run.scenario, bundle, policy, run.seeds, run.reward_weights(),
        run.cf_config(), run.eval_config(), run.agent_config(),
    )
    run.reports_dir.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, str(run.reports_dir / "counterfactual.csv"))
    write_rows_csv(
        wm_rows, str(run.reports_dir / "counterfactual_wm.csv"),
        ("peak_fraction", "mae_frozen", "mae_adapted", "mae_frac_frozen", "mae_frac_adapted"),
    )
    write_manifest(run.manifest("counterfactual"), str(run.reports_dir / "counterfactual_manifest.json"))
    print(f"wrote {run.reports_dir / 'counterfactual.csv'} ({len(rows)} rows)")
    return 0


def cmd_report(run: RunConfig, args) -> int:
    summary_rows = []
    for name in ("evaluation", "counterfactual"):
        path = run.reports_dir / f"{name}.csv"
        if not path.exists():
            continue
        rows = read_rows_csv(str(path))
        by_key: dict = {}
        for row in rows:
            phi = row["peak_fraction"]
            # NaN marks "no counterfactual"; canonicalize it or every row is its own group.
            phi = "" if isinstance(phi, float) and np.isnan(phi) else phi
            key = (row["scheme"], row["scenario"], phi)
            by_key.setdefault(key, []).append(row)
        for (scheme, scenario_name, phi), group in sorted(by_key.items(), key=str):
            summary_rows.append({
                "scheme": scheme,
                "scenario": scenario_name,
                "peak_fraction": phi,
                "n_seeds": len(group),
                "utility_median": float(np.median([g["utility"] for g in group])),
                "energy_saved_pct_median": float(np.median([g["energy_saved_pct"] for g in group])),
                "rsrp_delta_db_median": float(np.median([g["rsrp_delta_db"] for g in group])),
                "dropped_rate_median": float(np.median([g["dropped_rate"] for g in group])),
            })
    if not summary_rows:
        print("no report CSVs found; run evaluate or counterfactual first", file=sys.stderr)
        return 1
    columns = ("scheme", "scenario", "peak_fraction", "n_seeds", "utility_median",
               "energy_saved_pct_median", "rsrp_delta_db_median", "dropped_rate_median")
    run.reports_dir.mkdir(parents=True, exist_ok=True)
    write_rows_csv(summary_rows, str(run.reports_dir / "summary.csv"), columns)
    widths = [10, 15, 13, 7, 15, 24, 21, 19]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for row in summary_rows:
        cells = [str(row[c]) if not isinstance(row[c], float) else f"{row[c]:.4f}" for c in columns]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    print(f"wrote {run.reports_dir / 'summary.csv'}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "collect": cmd_collect,
    "train-wm": cmd_train_wm,
    "eval-gen": cmd_eval_gen,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "counterfactual": cmd_counterfactual,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celltwin",
        description="Synthetic cellular twin with a diffusion world model and sleep/offload agent.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="path to the run config JSON")
        if name == "simulate":
            p.add_argument("--days", type=int, default=1, help="number of days to simulate")
            p.add_argument("--out", default=None, help="output CSV path")
        if name == "evaluate":
            p.add_argument("--jobs", type=int, default=None, help="per-seed parallelism")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = parse_config(args.config)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](run, args)
    except (ConfigError, FormatError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
