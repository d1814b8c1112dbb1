"""Experiment orchestration: training runs, policy test flights, exports.

A run directory is reproducible from the resolved config it embeds:

    run_dir/
      config.yaml            resolved configuration including the master seed
      metrics.jsonl          one IterationReport per line, append-only
      rollouts/*.npz         per-rollout trajectory logs, flushed individually
      policy_iter_XX.npz     checkpoint after each iteration
      duals_iter_XX.npz      dual variables after each iteration
      policy_final.npz       the deliverable checkpoint

Evaluation flies a checkpoint closed-loop from observations alone: the policy
callback receives the 40-dim observation vector and nothing else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config
from .dynamics import QuadrotorModel, apply_model_error, default_process_noise, make_state
from .environment import (CrashParams, CrashStatus, detect_crash,
                          generate_forest, generate_winding_hallway,
                          make_scenario, observe)
from .gps import DualState, IterationReport, RunSink, run_gps
from .policy import PolicyNet, forward, init_policy, load_policy, save_policy
from .serialization import dumps_json, format_float, savez_deterministic

logger = logging.getLogger(__name__)

TRAJECTORY_CSV_VERSION = 1
METRICS_CSV_VERSION = 1

STATE_COLUMNS = ["px", "py", "pz", "vx", "vy", "vz",
                 "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
OBS_COLUMNS = ([f"laser{i:02d}" for i in range(30)]
               + ["ovx", "ovy", "ovz", "oqw", "oqx", "oqy", "oqz",
                  "owx", "owy", "owz"])
ACTION_COLUMNS = [f"u{i}" for i in range(4)]
TRAJECTORY_HEADER = ["step"] + STATE_COLUMNS + OBS_COLUMNS + ACTION_COLUMNS + ["crash"]

METRICS_COLUMNS = ["iteration", "crash_count", "n_rollouts", "failed_rollouts",
                   "mean_task_cost", "policy_loss", "mean_step_kl", "nu_min",
                   "nu_mean", "nu_max", "lam_abs_max", "mean_offline_cost",
                   "wall_time_s"]


class DiskSink(RunSink):
    """Streams run artifacts to disk as they are produced."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        (self.run_dir / "rollouts").mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.run_dir / "metrics.jsonl"

    def on_rollout(self, iteration: int, record) -> None:
        name = (f"iter{iteration:02d}_i{record.traj_index:02d}"
                f"_j{record.sample_index:02d}.npz")
        savez_deterministic(self.run_dir / "rollouts" / name, {
            "iteration": np.array([iteration]),
            "traj_index": np.array([record.traj_index]),
            "sample_index": np.array([record.sample_index]),
            "states": record.states,
            "observations": record.observations,
            "actions": record.actions,
            "mean_actions": record.mean_actions,
            "gains": record.gains,
            "precisions": record.precisions,
            "fallbacks": record.fallbacks.astype(np.int8),
            "crash": np.array([record.crash.value]),
            "crash_step": np.array([-1 if record.crash_step is None
                                    else record.crash_step]),
        })

    def on_iteration(self, iteration: int, report: IterationReport,
                     net: PolicyNet, duals: DualState) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(dumps_json(report.to_dict()) + "\n")
        save_policy(net, self.run_dir / f"policy_iter_{iteration:02d}.npz")
        savez_deterministic(self.run_dir / f"duals_iter_{iteration:02d}.npz",
                            {"nu": duals.nu, "lam": duals.lam})


def run_training(config: ExperimentConfig, run_dir) -> list[IterationReport]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(config))
    sink = DiskSink(run_dir)
    net, reports = run_gps(config.gps, variant=config.variant, sink=sink)
    save_policy(net, run_dir / "policy_final.npz")
    return reports


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class TestReport:
    durations_s: np.ndarray
    crash_types: list
    mean_duration_s: float
    sd_duration_s: float

    def to_dict(self) -> dict:
        return {"durations_s": [float(d) for d in self.durations_s],
                "crash_types": list(self.crash_types),
                "mean_duration_s": self.mean_duration_s,
                "sd_duration_s": self.sd_duration_s}


def fly_policy(env, plant, policy_fn, max_steps: int, rng,
               crash_params: CrashParams, dt: float, start_state=None):
    """Closed-loop flight where actions come only from the observation.

    policy_fn: (40,) observation -> (4,) action. Returns (duration seconds,
    terminal status). The caller never exposes the state to policy_fn.
    """
    x = (make_state(p=(0.0, 0.0, 2.0)) if start_state is None
         else np.asarray(start_state, dtype=float).copy())
    for t in range(max_steps):
        o = observe(env, x)
        u = policy_fn(o)
        x = plant.step_noisy(x, u, rng)
        status = detect_crash(env, x, crash_params)
        if status is not CrashStatus.FLYING:
            return (t + 1) * dt, status
    return max_steps * dt, CrashStatus.FLYING


def _test_environment(scenario: str, seed: int):
    if scenario == "forest":
        return generate_forest(seed)
    if scenario == "winding_hallway":
        return generate_winding_hallway(seed)
    return make_scenario(scenario, seed=seed)


def evaluate_policy(net: PolicyNet, config: ExperimentConfig) -> TestReport:
    """Fly the policy over the configured test scenarios and aggregate."""
    gps = config.gps
    true_params = apply_model_error(gps.vehicle, gps.model_error)
    noise = default_process_noise(gps.process_noise_variance)
    plant = QuadrotorModel(true_params, gps.dt_s, noise)
    crash_params = gps.crash
    max_steps = int(round(config.test.episode_cap_s / gps.dt_s))
    start = make_state(p=(0.0, 0.0, gps.target_height_m))

    durations = []
    crash_types = []
    for r in range(config.test.runs):
        env = _test_environment(config.test.scenario, config.test.seed_base + r)
        rng = np.random.default_rng([gps.master_seed, 4000, r])
        duration, status = fly_policy(
            env, plant, lambda o: forward(net, o), max_steps, rng,
            crash_params, gps.dt_s, start_state=start)
        durations.append(duration)
        crash_types.append(status.value)
        logger.info("test run %d/%d: %.2f s (%s)", r + 1, config.test.runs,
                    duration, status.value)
    durations = np.asarray(durations)
    sd = float(durations.std(ddof=1)) if durations.size > 1 else 0.0
    return TestReport(durations, crash_types, float(durations.mean()), sd)


def run_eval(checkpoint_path, config: ExperimentConfig, out_path=None) -> TestReport:
    net = load_policy(checkpoint_path)
    report = evaluate_policy(net, config)
    if out_path is not None:
        Path(out_path).write_text(dumps_json(report.to_dict()) + "\n")
    return report


def random_policy(seed: int = 0) -> PolicyNet:
    """Untrained control, used as a negative control in evaluations."""
    return init_policy(np.random.default_rng([seed, 99]))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _format_row(values) -> str:
    return ",".join(format_float(v) for v in values)


def export_trajectories(run_dir: Path) -> Path:
    """Flatten rollout logs to one CSV row per executed step (59 columns)."""
    run_dir = Path(run_dir)
    rollout_dir = run_dir / "rollouts"
    files = sorted(rollout_dir.glob("*.npz"))
    if not files:
        raise FileNotFoundError(f"no rollout logs under {rollout_dir}")
    out_path = run_dir / "trajectories.csv"
    lines = [",".join(TRAJECTORY_HEADER)]
    for path in files:
        with np.load(path) as data:
            states = data["states"]
            obs = data["observations"]
            actions = data["actions"]
            crashed = str(data["crash"][0]) != CrashStatus.FLYING.value
            L = actions.shape[0]
            for t in range(L):
                flag = 1.0 if (crashed and t == L - 1) else 0.0
                row = np.concatenate([[float(t)], states[t], obs[t],
                                      actions[t], [flag]])
                lines.append(_format_row(row))
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def export_metrics(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    src = run_dir / "metrics.jsonl"
    if not src.exists():
        raise FileNotFoundError(f"missing metrics log {src}")
    import json

    out_path = run_dir / "metrics.csv"
    lines = [",".join(METRICS_COLUMNS)]
    for line in src.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        lines.append(",".join(format_float(row[c]) for c in METRICS_COLUMNS))
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def export_run(run_dir, what: str) -> list:
    """Export artifacts; returns written file paths and a manifest."""
    run_dir = Path(run_dir)
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    written = []
    if what in ("trajectories", "all"):
        written.append(export_trajectories(run_dir))
    if what in ("metrics", "all"):
        written.append(export_metrics(run_dir))
    if not written:
        raise ValueError(f"unknown export target {what!r}")
    manifest = {
        "trajectory_csv_version": TRAJECTORY_CSV_VERSION,
        "metrics_csv_version": METRICS_CSV_VERSION,
        "files": [p.name for p in written],
        "trajectory_columns": TRAJECTORY_HEADER,
        "metrics_columns": METRICS_COLUMNS,
    }
    manifest_path = run_dir / "export_manifest.json"
    manifest_path.write_text(dumps_json(manifest) + "\n")
    written.append(manifest_path)
    return written
