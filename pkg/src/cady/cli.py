"""Command-line interface: train, attribute, eval, plan, suite, report."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import causal, config as config_mod, envs, harness, training
from .model import load_checkpoint, save_checkpoint
from .planners import CemPlanner, EpisodeConfig


def _out_dir(args, cfg=None):
    if args.out:
        return args.out
    if cfg and "out_dir" in cfg:
        return cfg["out_dir"]
    return os.environ.get("CADY_OUT_DIR", "cady_out")


def _parent_names(env_name):
    if env_name == "cartpole":
        return (["x", "theta", "x_dot", "theta_dot", "a"],
                ["x_next", "theta_next", "x_dot_next", "theta_dot_next"])
    return (["x", "y", "theta", "v", "w"],
            ["x_next", "y_next", "theta_next"])


def cmd_train(args):
    cfg = config_mod.load_config(args.config)
    out = _out_dir(args, cfg)
    os.makedirs(out, exist_ok=True)
    seed = args.seed
    spec = config_mod.model_spec(cfg)
    tcfg = config_mod.train_config(cfg)
    acfg = config_mod.attribution_config(cfg)
    rho = config_mod.rho_min(cfg)
    mode = cfg.get("mode", "sysid")
    rng = np.random.default_rng(seed)
    if mode == "mbrl":
        env = envs.CartpoleEnv()
        from .planners import cartpole_objective
        planner = CemPlanner(config_mod.cem_config(cfg), env.action_bounds)
        mbrl = cfg.get("mbrl", {})
        fd, pd, rewards, dataset = training.mbrl_loop(
            env, planner, spec, mbrl.get("trials", 20), tcfg, rng,
            objective=cartpole_objective(env.params), attr_cfg=acfg,
            rho_min=rho, max_steps=mbrl.get("max_steps", 200))
        harness.emit_reward_curve_csv(
            rewards, seed, os.path.join(out, "reward_curve.csv"))
    elif mode == "sysid":
        sysid = cfg.get("sysid", {})
        if "dataset" in cfg:
            dataset = training.TransitionDataset.from_csv(
                cfg["dataset"], spec.n, spec.p)
        else:
            dataset = training.generate_diffdrive_dataset(
                sysid.get("transitions", 10_000), rng,
                rollout_len=sysid.get("rollout_len", 5))
        fc = training.train_contribution_model(dataset, spec, tcfg, rng)
        pd = training.estimate_distribution(fc, dataset, acfg, rng,
                                            rho_min=rho)
        fd = training.train_dynamics_model(dataset, spec, pd, tcfg, rng)
        save_checkpoint(fc, os.path.join(out, "baseline.json"))
    else:
        raise ValueError(f"unknown training mode: {mode}")
    if mode == "mbrl":
        # Dense baseline: same architecture, all-ones masks, same data.
        baseline = training.train_contribution_model(dataset, spec, tcfg, rng)
        save_checkpoint(baseline, os.path.join(out, "baseline.json"))
    save_checkpoint(fd, os.path.join(out, "cady.json"))
    dataset.to_csv(os.path.join(out, "dataset.csv"))
    parents, outputs = _parent_names(cfg.get("environment", "cartpole"))
    causal.export_edge_prob_csv(pd, os.path.join(out, "edge_probs.csv"),
                                parents, outputs)
    print(f"trained mode={mode} rows={len(dataset)} out={out}")
    return 0


def cmd_attribute(args):
    model = load_checkpoint(args.checkpoint)
    if model.edge_probs is None:
        raise ValueError(
            f"checkpoint {args.checkpoint} carries no edge distribution")
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    env_name = "cartpole" if model.spec.n == 4 else "diffdrive"
    parents, outputs = _parent_names(env_name)
    path = os.path.join(out, "edge_probs.csv")
    causal.export_edge_prob_csv(model.edge_probs, path, parents, outputs)
    print(f"edge probabilities written to {path}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    dataset = training.TransitionDataset.from_csv(
        args.dataset, model.spec.n, model.spec.p)
    angle_dims = (2,) if model.spec.n == 3 else ()
    result = training.one_step_mse(model, dataset,
                                   np.random.default_rng(args.seed),
                                   angle_dims=angle_dims)
    print(json.dumps({
        "per_dim": result["per_dim"].tolist(),
        "aggregate": result["aggregate"],
        "per_dim_expected": result["per_dim_expected"].tolist(),
        "aggregate_expected": result["aggregate_expected"],
    }, sort_keys=True))
    return 0


def cmd_plan(args):
    cfg = config_mod.load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args, cfg)
    os.makedirs(out, exist_ok=True)
    env_name = cfg.get("environment", "cartpole")
    if env_name == "cartpole":
        reward = harness.run_cartpole_episode(
            model, args.seed, config_mod.cem_config(cfg))
        print(f"episode reward: {reward}")
    else:
        metrics = harness.run_mission_episode(
            model, args.seed, config_mod.mission(cfg),
            config_mod.mppi_config(cfg))
        print(json.dumps(metrics, sort_keys=True))
    return 0


def _load_suite_models(cfg):
    section = cfg.get("checkpoints", {})
    for key in ("cady", "baseline"):
        if key not in section:
            raise ValueError(f"config is missing checkpoints.{key}")
        if not os.path.exists(section[key]):
            raise FileNotFoundError(
                f"checkpoint not found: {section[key]}")
    return {"cady": load_checkpoint(section["cady"]),
            "baseline": load_checkpoint(section["baseline"])}


def cmd_suite(args):
    cfg = config_mod.load_config(args.config)
    out = _out_dir(args, cfg)
    base_seed = args.seed
    models = _load_suite_models(cfg)
    if args.kind == "freeze":
        section = cfg.get("freeze", {})
        seeds = [base_seed + i for i in range(section.get("runs", 5))]
        report = harness.run_freeze_suite(
            models, seeds, config_mod.cem_config(cfg),
            onset=section.get("onset", 0.1), config=cfg)
    elif args.kind == "noise":
        section = cfg.get("noise", {})
        seeds = [base_seed + i for i in range(section.get("trials", 20))]
        report = harness.run_noise_suite(
            models, seeds, sigma2=section.get("sigma2", 0.05),
            cem_cfg=config_mod.cem_config(cfg), config=cfg)
    elif args.kind == "missions":
        section = cfg.get("noise", {})
        seeds = [base_seed + i for i in range(section.get("trials", 10))]
        report = harness.run_mission_noise_sweep(
            models, seeds, config_mod.mission(cfg),
            sweep=tuple(section.get("sweep",
                                    (0.01, 0.05, 0.1, 0.2, 0.5, 1.0))),
            mppi_cfg=config_mod.mppi_config(cfg), config=cfg)
    elif args.kind == "ablation":
        section = cfg.get("ablation", {})
        report = harness.run_fixed_graph_ablation(
            models["cady"], repetitions=section.get("repetitions", 10),
            threshold=section.get("threshold", 0.5),
            cem_cfg=config_mod.cem_config(cfg), config=cfg)
    elif args.kind == "interventions":
        section = cfg.get("intervention", {})
        schedules = {
            name: tuple(gains) for name, gains in
            section.get("gain_schedules",
                        {"w_gain": (1.0, 0.5), "v_gain": (0.5, 1.0)}).items()}
        seeds = [base_seed + i for i in range(section.get("runs", 10))]
        report = harness.run_intervention_suite(
            models, schedules, seeds,
            train_cfg=config_mod.train_config(cfg),
            finetune_epochs=section.get("finetune_epochs", 16),
            onset_step=section.get("onset_step", 250),
            total_steps=section.get("total_steps", 500), config=cfg)
    else:
        raise ValueError(f"unknown suite: {args.kind}")
    written = harness.emit_report(report, out)
    for path in written:
        print(path)
    return 0


def cmd_report(args):
    records = harness.load_records_csv(args.records)
    report = harness.ExperimentReport(suite="recomputed", records=records)
    print(json.dumps(report.aggregates(), sort_keys=True, indent=1))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cady",
        description="Causally-informed dynamics learning and planning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, checkpoint=False, dataset=False):
        if config:
            p.add_argument("--config", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if dataset:
            p.add_argument("--dataset", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)

    common(sub.add_parser("train", help="train models (modes: mbrl, sysid)"),
           config=True)
    common(sub.add_parser("attribute",
                          help="export the edge-probability matrix"),
           checkpoint=True)
    common(sub.add_parser("eval", help="one-step MSE on a dataset"),
           checkpoint=True, dataset=True)
    common(sub.add_parser("plan", help="run a single planned episode"),
           config=True, checkpoint=True)
    suite = sub.add_parser("suite", help="run an experiment suite")
    suite.add_argument("kind", choices=["freeze", "noise", "missions",
                                        "ablation", "interventions"])
    common(suite, config=True)
    report = sub.add_parser("report", help="recompute aggregates")
    report.add_argument("--records", required=True)
    report.add_argument("--seed", type=int, default=0)
    report.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "attribute": cmd_attribute,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "suite": cmd_suite,
    "report": cmd_report,
}


def cli_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
