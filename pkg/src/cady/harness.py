"""Experiment orchestration: robustness suites, metrics, and reports.

Every run derives its RNG stream from (master seed, run index), so a suite
rerun with the same config and seeds emits byte-identical records files.
Performance degradation is always measured against the same model's own
nominal (fault-free) performance.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__, causal, envs, training
from .planners import (CemConfig, CemPlanner, EpisodeConfig, ModelStep,
                       MppiConfig, MppiPlanner, RolloutEvaluator,
                       WaypointObjective, cartpole_objective, mpc_run)


def degradation(x, x_ref):
    """PD(x) = (x - x_ref) / x_ref; negative means degradation for
    higher-is-better metrics."""
    return (x - x_ref) / x_ref


@dataclass
class ExperimentReport:
    suite: str
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, **record):
        self.records.append(record)

    def aggregates(self):
        """Mean/std (population) per (condition, metric) over all records."""
        groups = {}
        for rec in self.records:
            cond = rec.get("condition", "")
            for key, val in rec.items():
                if isinstance(val, bool):
                    val = float(val)
                if isinstance(val, (int, float)) and key != "seed":
                    groups.setdefault((cond, key), []).append(float(val))
        out = []
        for (cond, metric), vals in sorted(groups.items()):
            arr = np.array(vals)
            out.append({"condition": cond, "metric": metric,
                        "count": len(vals), "mean": float(arr.mean()),
                        "std": float(arr.std())})
        return out

    def provenance(self):
        canonical = json.dumps(self.config, sort_keys=True)
        return {
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "code_version": __version__,
        }


def emit_report(report, out_dir, formats=("csv", "json")):
    """Write records, aggregates, and the config snapshot to disk."""
    if not report.records:
        raise ValueError("refusing to emit an empty report")
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, report.suite)
    columns = []
    for rec in report.records:
        for key in rec:
            if key not in columns:
                columns.append(key)
    written = []
    if "csv" in formats:
        path = base + "_records.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for rec in report.records:
                writer.writerow([_cell(rec.get(c)) for c in columns])
        written.append(path)
        path = base + "_aggregates.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["condition", "metric", "count", "mean", "std"])
            for row in report.aggregates():
                writer.writerow([row["condition"], row["metric"],
                                 row["count"], repr(float(row["mean"])),
                                 repr(float(row["std"]))])
        written.append(path)
    if "json" in formats:
        path = base + "_report.json"
        with open(path, "w") as f:
            json.dump({
                "suite": report.suite,
                "provenance": report.provenance(),
                "records": report.records,
                "aggregates": report.aggregates(),
            }, f, sort_keys=True, indent=1)
        written.append(path)
    path = base + "_config.json"
    with open(path, "w") as f:
        json.dump(report.config, f, sort_keys=True, indent=1)
    written.append(path)
    return written


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def load_records_csv(path):
    """Re-ingest an emitted records file (strings parsed back to numbers)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        columns = next(reader)
        records = []
        for row in reader:
            rec = {}
            for key, val in zip(columns, row):
                try:
                    rec[key] = int(val)
                except ValueError:
                    try:
                        rec[key] = float(val)
                    except ValueError:
                        rec[key] = val
            records.append(rec)
    return records


def emit_trajectory_csv(log, path, state_dim, action_dim):
    header = ["t"] + [f"true_s{i}" for i in range(state_dim)] \
        + [f"obs_s{i}" for i in range(state_dim)] \
        + [f"a{i}" for i in range(action_dim)] + ["reward", "done"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t, true_s, obs, action, reward, done in log.rows:
            action = np.atleast_1d(action)
            writer.writerow([t] + [repr(float(v)) for v in true_s]
                            + [repr(float(v)) for v in obs]
                            + [repr(float(v)) for v in action]
                            + [repr(float(reward)), int(done)])


def emit_reward_curve_csv(rewards, seed, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "reward", "seed"])
        for trial, reward in enumerate(rewards):
            writer.writerow([trial, repr(float(reward)), seed])


# -- cartpole episode runners -------------------------------------------------

def _cartpole_components(model, cem_cfg, params, fixed_mask=None):
    env = envs.CartpoleEnv(params)
    reward_fn, alive_fn = cartpole_objective(env.params)
    edge_probs = model.edge_probs or causal.EdgeProbMatrix.all_ones(
        model.spec.input_dim, model.spec.n)
    step = ModelStep(model, edge_probs)
    if fixed_mask is not None:
        step = FixedMaskStep(model, fixed_mask)
    evaluator = RolloutEvaluator(step, reward_fn, alive_fn)
    planner = CemPlanner(cem_cfg, env.action_bounds)
    return env, planner, evaluator


class FixedMaskStep:
    """Model transition with a single deterministic mask (ablation)."""

    def __init__(self, model, mask):
        self.model = model
        self.mask = mask.M if isinstance(mask, causal.CausalMask) else mask
        self.model_calls = 0

    def __call__(self, states, actions, rng):
        self.model_calls += 1
        from .model import predict_next_batch
        return predict_next_batch(self.model, states, actions, self.mask, rng)


def run_cartpole_episode(model, seed, cem_cfg=None, params=None, fault=None,
                         fixed_mask=None):
    """One planned cartpole episode; returns the cumulative reward."""
    cem_cfg = cem_cfg or CemConfig()
    params = params or envs.CartpoleParams()
    env, planner, evaluator = _cartpole_components(
        model, cem_cfg, params, fixed_mask)
    rng = np.random.default_rng(seed)
    episode = EpisodeConfig(max_steps=params.episode_length)
    log = mpc_run(env, planner, evaluator, episode, fault=fault, rng=rng)
    return log.metrics["reward"]


def run_mission_episode(model, seed, mission, mppi_cfg=None, params=None,
                        fault=None, max_steps=None):
    """One planned diff-drive mission; returns the metrics dict."""
    mppi_cfg = mppi_cfg or MppiConfig()
    params = params or envs.DiffDriveParams()
    env = envs.DiffDriveEnv(params)
    objective = WaypointObjective()
    edge_probs = model.edge_probs or causal.EdgeProbMatrix.all_ones(
        model.spec.input_dim, model.spec.n)
    evaluator = RolloutEvaluator(ModelStep(model, edge_probs),
                                 objective.reward_fn)
    planner = MppiPlanner(mppi_cfg, env.action_bounds)
    rng = np.random.default_rng(seed)
    if max_steps is None:
        max_steps = int(np.ceil(mission.time_limit / params.dt)) + 1
    episode = EpisodeConfig(max_steps=max_steps, mission=mission,
                            dt=params.dt)
    log = mpc_run(env, planner, evaluator, episode, fault=fault, rng=rng,
                  objective=objective,
                  init_state=np.zeros(3))
    return log.metrics


# -- suites ---------------------------------------------------------------------

def run_freeze_suite(models, seeds, cem_cfg=None, params=None, onset=0.1,
                     config=None):
    """Freeze each state variable, each model, each seed; report PD.

    `models` maps a model name to a trained model (edge distribution
    attached for the causally-masked one).
    """
    params = params or envs.CartpoleParams()
    report = ExperimentReport(suite="freeze", config=config or {})
    for name, model in models.items():
        nominal = [run_cartpole_episode(model, 10_000 + s, cem_cfg, params)
                   for s in seeds]
        x_ref = float(np.mean(nominal))
        for var in range(4):
            fault = envs.FaultConfig(mode="freeze", index=var, onset=onset)
            for s in seeds:
                reward = run_cartpole_episode(model, 10_000 + s, cem_cfg,
                                              params, fault=fault)
                report.add(condition=name, variable=var, seed=s,
                           reward=reward, x_ref=x_ref,
                           pd=degradation(reward, x_ref))
    return report


def run_noise_suite(models, seeds, sigma2=0.05, cem_cfg=None, params=None,
                    config=None):
    """Gaussian observation noise on cartpole; PD per model."""
    params = params or envs.CartpoleParams()
    report = ExperimentReport(suite="noise", config=config or {})
    fault = envs.FaultConfig(mode="gaussian_noise", sigma2=sigma2)
    for name, model in models.items():
        nominal = [run_cartpole_episode(model, 20_000 + s, cem_cfg, params)
                   for s in seeds]
        x_ref = float(np.mean(nominal))
        for s in seeds:
            reward = run_cartpole_episode(model, 20_000 + s, cem_cfg, params,
                                          fault=fault)
            report.add(condition=name, seed=s, sigma2=sigma2, reward=reward,
                       x_ref=x_ref, pd=degradation(reward, x_ref))
    return report


def run_mission_noise_sweep(models, seeds, mission, sweep=(0.01, 0.05, 0.1,
                                                           0.2, 0.5, 1.0),
                            mppi_cfg=None, params=None, config=None):
    """Noise sweep over missions; success rate plus successful-runs-only
    time/distance statistics."""
    report = ExperimentReport(suite="missions", config=config or {})
    for sigma2 in sweep:
        fault = None if sigma2 == 0.0 else envs.FaultConfig(
            mode="gaussian_noise", sigma2=sigma2)
        for name, model in models.items():
            for s in seeds:
                metrics = run_mission_episode(model, 30_000 + s, mission,
                                              mppi_cfg, params, fault=fault)
                report.add(condition=f"{name}/sigma2={sigma2}", model=name,
                           sigma2=sigma2, seed=s,
                           success=bool(metrics["success"]),
                           time=metrics["time"],
                           distance=metrics["distance"])
    return report


def mission_statistics(report):
    """Success rate over all runs; time/distance over successful runs only."""
    groups = {}
    for rec in report.records:
        groups.setdefault(rec["condition"], []).append(rec)
    stats = {}
    for cond, recs in sorted(groups.items()):
        succ = [r for r in recs if r["success"]]
        entry = {"success_rate": len(succ) / len(recs)}
        for metric in ("time", "distance"):
            vals = np.array([r[metric] for r in succ])
            entry[metric + "_mean"] = float(vals.mean()) if len(succ) else None
            entry[metric + "_std"] = float(vals.std()) if len(succ) else None
        stats[cond] = entry
    return stats


def run_fixed_graph_ablation(model, repetitions=10, threshold=0.5,
                             cem_cfg=None, params=None, config=None):
    """Distribution sampling vs the thresholded modal graph, paired runs."""
    if model.edge_probs is None:
        raise ValueError("ablation requires an estimated edge distribution")
    fixed = causal.threshold_mask(model.edge_probs, threshold)
    report = ExperimentReport(suite="ablation", config=config or {})
    for rep in range(repetitions):
        r_dist = run_cartpole_episode(model, 40_000 + rep, cem_cfg, params)
        r_fixed = run_cartpole_episode(model, 40_000 + rep, cem_cfg, params,
                                       fixed_mask=fixed)
        report.add(condition="distribution", seed=rep, reward=r_dist)
        report.add(condition="fixed", seed=rep, reward=r_fixed)
        report.add(condition="paired_diff", seed=rep,
                   reward_delta=r_dist - r_fixed)
    return report


# -- intervention suite -----------------------------------------------------------

def _excitation_trajectory(params, schedule, total_steps, rng,
                           excitation=None):
    """Random-control diff-drive run with a mid-trajectory gain intervention.

    Returns a TransitionDataset of (state, commanded action, next state); the
    gains are applied simulator-side only. `excitation` optionally narrows
    the commanded-control sampling ranges (defaults to the action bounds);
    equalizing the excitation energy across controls lets downstream error
    comparisons isolate how many outputs each control feeds.
    """
    env = envs.DiffDriveEnv(params)
    state = env.reset(rng, state=np.zeros(3))
    low, high = env.action_bounds
    exc_low, exc_high = excitation if excitation is not None else (low, high)
    dataset = training.TransitionDataset(3, 2)
    for t in range(total_steps):
        action = rng.uniform(exc_low, exc_high)
        sim_action = envs.apply_intervention(action, schedule, t, low, high)
        next_state, _, _ = env.step(sim_action)
        dataset.append(state, action, next_state, trial=0, step=t)
        state = next_state
    return dataset


def _drop_wrapped(dataset):
    """Drop transitions whose heading delta crossed the (-pi, pi] seam."""
    keep = np.abs(dataset.deltas()[:, 2]) <= np.pi / 2
    return dataset.subset(keep)


def run_intervention_suite(models, schedules, seeds, params=None,
                           train_cfg=None, finetune_epochs=16,
                           onset_step=250, total_steps=500, config=None,
                           excitation=None):
    """Pre/post-intervention and post-fine-tuning one-step MSE per model.

    `schedules` maps a schedule name to per-control gains (gain_v, gain_w);
    the intervention fires at `onset_step` of a random-excitation run.
    """
    params = params or envs.DiffDriveParams()
    train_cfg = train_cfg or training.TrainConfig()
    report = ExperimentReport(suite="interventions", config=config or {})
    for sched_name, gains in schedules.items():
        schedule = envs.InterventionSchedule(onset_step=onset_step,
                                             gains=tuple(gains))
        for s in seeds:
            rng = np.random.default_rng(50_000 + s)
            traj = _excitation_trajectory(params, schedule, total_steps, rng,
                                          excitation=excitation)
            pre = _drop_wrapped(traj.subset(np.arange(onset_step)))
            post = _drop_wrapped(
                traj.subset(np.arange(onset_step, total_steps)))
            for name, model in models.items():
                tuned = copy.deepcopy(model)
                mse_pre = training.one_step_mse(
                    tuned, pre, np.random.default_rng(s), angle_dims=(2,))
                mse_post = training.one_step_mse(
                    tuned, post, np.random.default_rng(s), angle_dims=(2,))
                training.finetune(tuned, post, train_cfg,
                                  np.random.default_rng(60_000 + s),
                                  epochs=finetune_epochs)
                mse_ft = training.one_step_mse(
                    tuned, post, np.random.default_rng(s), angle_dims=(2,))
                report.add(condition=f"{name}/{sched_name}", model=name,
                           schedule=sched_name, seed=s,
                           gain_v=gains[0], gain_w=gains[1],
                           mse_pre=mse_pre["aggregate_expected"],
                           mse_post=mse_post["aggregate_expected"],
                           mse_finetuned=mse_ft["aggregate_expected"])
    return report
