"""Command-line interface: backtest, generate, pretrain, train and compare."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import agents as ag
from .config import ExperimentConfig
from .data import PriceFrame, generate_universe, write_csv
from .environment import MarketEnv, run_episode
from .errors import ConfigError, PortfolioError
from .metrics import PerformanceReport
from .pretrain import Dataset, generate_dataset, pretrain
from .tensor import load_parameters, save_parameters

log = logging.getLogger("portfolio_rl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMPARE_COLUMNS = ["agent", "cumulative_return", "sharpe", "max_drawdown"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- building blocks

def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.episodes is not None:
        overrides.append(f"episodes={args.episodes}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    return cfg.with_overrides(overrides) if overrides else cfg


def build_universe(cfg: ExperimentConfig) -> PriceFrame:
    try:
        return generate_universe(cfg.universe_spec())
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def build_envs(cfg, frame):
    split = cfg.split_index(frame.timestamps)
    common = dict(window=cfg.window, beta=cfg.beta, reward_kind=cfg.reward_kind)
    train = MarketEnv(frame, start=cfg.window, end=split, **common)
    test = MarketEnv(frame, start=split, end=frame.T - 1, **common)
    return train, test


def build_network(cfg, M):
    p = cfg.agent_params()
    kind = cfg.agent["kind"]
    if kind == "reinforce":
        return ag.PolicyNet(M, cfg.window, p["channels"], p["hidden"], seed=cfg.seed)
    if kind == "dsrqn":
        return ag.DsrqnNet(M, cfg.window, p["channels"], p["hidden"], seed=cfg.seed)
    if kind == "msm":
        return ag.ScoreMachines(M, cfg.window, p["channels"], p["hidden"], p["mixture_hidden"], seed=cfg.seed)
    return None


def train_agent(cfg, train_env, test_env, net=None):
    """Fit the configured agent on the training range.

    Returns (agent for evaluation, learning-curve rows, trained network or None).
    """
    kind = cfg.agent["kind"]
    p = cfg.agent_params()
    curve = []
    train_returns = np.log(train_env.frame.values[1:train_env.end + 1] / train_env.frame.values[:train_env.end])
    if kind == "buy_and_hold":
        return ag.BuyAndHold(p["weights"]), curve, None
    if kind == "uniform":
        return ag.UniformRebalance(), curve, None
    if kind == "random":
        return ag.RandomAgent(cfg.seed, p["concentration"]), curve, None
    if kind == "oracle":
        return ag.OracleAgent(), curve, None
    if kind == "smm":
        return ag.SMMAgent(cfg.beta, p["lookback"], cfg.seed), curve, None
    if kind == "var":
        order = p["p"] or ag.select_order_aic(train_returns, p["p_max"])
        model = ag.fit_var(train_returns, order)
        agent = ag.ModelBasedAgent(model, cfg.beta, p["horizon"], p["alpha"], online=p["online"],
                                   online_lr=p["online_lr"], seed=cfg.seed)
        return agent, curve, None
    if kind == "rnn":
        model = ag.RnnPredictor(train_env.M, p["hidden"], seed=cfg.seed)
        losses = model.fit(train_returns, epochs=p["fit_epochs"], lr=p["lr"], seed=cfg.seed)
        curve = [(i, -float(v), None) for i, v in enumerate(losses)]
        agent = ag.ModelBasedAgent(model, cfg.beta, p["horizon"], p["alpha"], online=p["online"],
                                   online_lr=p["online_lr"], seed=cfg.seed)
        return agent, curve, None
    net = net if net is not None else build_network(cfg, train_env.M)
    episodes = cfg.n_episodes()
    if kind == "dsrqn":
        learner = ag.DsrqnAgent(net, gamma=cfg.gamma, lr=p["lr"], beta=cfg.beta)
        for ep in range(episodes):
            learner.train = True
            traj, _ = run_episode(train_env, learner)
            learner.train = False
            test_traj, _ = run_episode(test_env, learner)
            curve.append((ep, float(np.sum(traj.rewards)), float(np.sum(test_traj.rewards))))
        learner.train = False
        return learner, curve, net
    rc = ag.ReinforceConfig(episodes=episodes, gamma=cfg.gamma, lr=p["lr"], kappa=p["kappa"],
                            kappa_anneal=p["kappa_anneal"], baseline=p["baseline"], seed=cfg.seed)
    net, lc = ag.reinforce_train(net, train_env, config=rc, eval_env=test_env)
    curve = list(zip(lc.episodes, lc.train_return, lc.test_return))
    return ag.PolicyAgent(net, name=kind), curve, net


def write_curve(rows, path: Path) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["episode", "train_return", "test_return"])
        for e, a, b in rows:
            wr.writerow([e, repr(float(a)), "" if b is None else repr(float(b))])


def run_pretraining(cfg, net, out: Path):
    pp = cfg.pretrain_params()
    data = generate_dataset(pp["N"], net.M, cfg.window, cfg.beta, seed=cfg.seed, mean=pp["mean"])
    net, curve = pretrain(net, data, lam=pp["lam"], epochs=pp["epochs"], lr=pp["lr"], batch=pp["batch"],
                          patience=pp["patience"], seed=cfg.seed)
    curve.to_csv(out / "pretrain_curve.csv")
    return net


# ---------------------------------------------------------------- commands

def cmd_backtest(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    frame = build_universe(cfg)
    train_env, test_env = build_envs(cfg, frame)
    out.mkdir(parents=True, exist_ok=True)
    net = build_network(cfg, frame.M)
    if net is not None and cfg.pretrain is not None:
        net = run_pretraining(cfg, net, out)
    agent, curve, net = train_agent(cfg, train_env, test_env, net)
    traj, report = run_episode(test_env, agent)
    (out / "report.json").write_text(report.to_json() + "\n")
    traj.to_csv(out / "trajectory.csv", frame.assets)
    write_curve(curve, out / "learning_curve.csv")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    log.info("backtest %s: cumulative return %.6f", cfg.label, report.cumulative_return)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    frame = build_universe(cfg)
    train_env, test_env = build_envs(cfg, frame)
    out.mkdir(parents=True, exist_ok=True)
    net = build_network(cfg, frame.M)
    if net is None:
        raise UsageError(f"{cfg.agent['kind']} agents have no trainable network")
    if cfg.pretrain is not None:
        net = run_pretraining(cfg, net, out)
    _, curve, net = train_agent(cfg, train_env, test_env, net)
    write_curve(curve, out / "learning_curve.csv")
    save_parameters(net, out / "checkpoint", meta={"agent": cfg.agent["kind"], "M": frame.M, "window": cfg.window})
    (out / "config.json").write_text(cfg.to_json() + "\n")
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    frame = build_universe(cfg)
    net = build_network(cfg, frame.M)
    if net is None or cfg.agent["kind"] not in ("reinforce", "msm"):
        raise UsageError("pretrain needs a reinforce or msm agent")
    out.mkdir(parents=True, exist_ok=True)
    net = run_pretraining(cfg, net, out)
    save_parameters(net, out / "checkpoint", meta={"agent": cfg.agent["kind"], "M": frame.M, "window": cfg.window})
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, dataset: bool = False) -> int:
    """Write the configured universe as prices.csv, or with `dataset` a pre-training dataset."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if dataset:
        pp = cfg.pretrain_params()
        M = cfg.universe_spec().M if not isinstance(cfg.universe, str) else build_universe(cfg).M
        data = generate_dataset(pp["N"], M, cfg.window, cfg.beta, seed=cfg.seed, mean=pp["mean"])
        data.save(out / "dataset")
        return EXIT_OK
    frame = build_universe(cfg)
    write_csv(frame, out / "prices.csv")
    return EXIT_OK


def read_report(path: Path) -> dict:
    path = Path(path)
    if path.is_file() and path.suffix == ".json" and path.name != "report.json":
        path = Path(ExperimentConfig.from_file(path).out)
    report = path / "report.json" if path.is_dir() else path
    if not report.exists():
        raise UsageError(f"missing run artifact: {report}")
    return json.loads(report.read_text())


def cmd_compare(runs, out: Path) -> int:
    """One row per run, in the order given: cumulative return, Sharpe, maximum drawdown."""
    if len(runs) < 2:
        raise UsageError("compare needs at least two runs")
    rows = []
    for r in runs:
        rep = read_report(r)
        run_dir = Path(r) if Path(r).is_dir() else Path(r).parent
        label = run_dir.name
        cfg_file = run_dir / "config.json"
        if cfg_file.exists():
            label = ExperimentConfig.from_file(cfg_file).label
        rows.append([label] + [rep.get(k) for k in COMPARE_COLUMNS[1:]])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "comparison.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(COMPARE_COLUMNS)
        for row in rows:
            wr.writerow([row[0]] + ["" if v is None else repr(float(v)) for v in row[1:]])
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portfolio-rl", description="Portfolio optimization and trading agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--episodes", type=int)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="set a config value; dotted keys for nested fields, JSON values")

    for name, text in [("backtest", "train if needed, then evaluate on the test range"),
                       ("train", "train a network agent and save a checkpoint"),
                       ("pretrain", "supervised pre-training against the QP"),
                       ("generate", "write a universe CSV or a pre-training dataset")]:
        p = sub.add_parser(name, help=text)
        common(p)
        if name == "generate":
            p.add_argument("--dataset", action="store_true", help="generate a pre-training dataset")
    p = sub.add_parser("compare", help="comparison matrix over finished runs")
    p.add_argument("runs", nargs="+", help="run directories, report files or configs")
    p.add_argument("--out", default=".", help="directory for comparison.csv")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("PORTFOLIO_RL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "compare":
            return cmd_compare(args.runs, Path(args.out))
        cfg = load_config(args)
        if args.command == "backtest":
            return cmd_backtest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        return cmd_generate(cfg, dataset=args.dataset)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PortfolioError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
