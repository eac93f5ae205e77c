import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from portfolio_rl.cli import EXIT_OK, EXIT_USAGE, main
from portfolio_rl.config import ExperimentConfig
from portfolio_rl.data import PriceFrame, business_days, load_csv, to_returns, write_csv
from portfolio_rl.errors import ConfigError


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return str(path)


def constant_csv(tmp_path, T=40, M=2):
    frame = PriceFrame(business_days(T), [f"S{i}" for i in range(M)], np.full((T, M), 25.0))
    write_csv(frame, tmp_path / "flat.csv")
    return str(tmp_path / "flat.csv")


def sine_universe(T=120):
    return {"generator": "sine", "M": 2, "T": T, "seed": 3,
            "params": {"amplitude": [20, 30], "period": [25, 38], "phase": [0, 1]}}


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- backtest

def test_buy_and_hold_on_flat_prices_pays_only_entry_cost(tmp_path):
    cfg = write_config(tmp_path / "c.json", universe=constant_csv(tmp_path), agent={"kind": "buy_and_hold"},
                       window=5, beta=0.002, split=0.5)
    assert run("backtest", "--config", cfg, "--out", tmp_path / "run") == EXIT_OK
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["cumulative_return"] == pytest.approx(-0.002, abs=1e-12)
    rows = list(csv.reader((tmp_path / "run" / "trajectory.csv").open()))
    assert rows[0] == ["t", "reward", "cost", "w_S0", "w_S1"]
    assert (tmp_path / "run" / "learning_curve.csv").exists()
    assert ExperimentConfig.from_file(tmp_path / "run" / "config.json").agent == {"kind": "buy_and_hold"}


def test_missing_csv_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "prices.csv"
    cfg = write_config(tmp_path / "c.json", universe=str(missing), agent={"kind": "uniform"})
    assert run("backtest", "--config", cfg, "--out", tmp_path / "run") == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("fields", [{"agent": {"kind": "uniform"}, "colour": "red"},
                                    {"agent": {"kind": "uniform", "lr": 0.1}},
                                    {"agent": {"kind": "genius"}}])
def test_bad_configs_are_rejected(tmp_path, fields):
    cfg = write_config(tmp_path / "c.json", universe=sine_universe(), **fields)
    assert run("backtest", "--config", cfg, "--out", tmp_path / "run") == EXIT_USAGE
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"universe": sine_universe(), **fields})


def test_overrides_and_flags(tmp_path):
    cfg = ExperimentConfig.from_dict({"universe": sine_universe(), "agent": {"kind": "reinforce"}})
    changed = cfg.with_overrides(["agent.lr=0.01", "beta=0", "seed=4"])
    assert changed.agent_params()["lr"] == 0.01 and changed.beta == 0 and changed.seed == 4
    assert cfg.beta == 0.002  # overrides return a new config
    with pytest.raises(ConfigError):
        cfg.with_overrides(["nonsense=1"])


@pytest.mark.parametrize("kind", ["reinforce", "dsrqn", "smm"])
def test_reruns_are_byte_identical(tmp_path, kind):
    agent = {"kind": kind}
    if kind in ("reinforce", "dsrqn"):
        agent.update(channels=2, hidden=4)
    cfg = write_config(tmp_path / "c.json", universe=sine_universe(), agent=agent, window=10, split=0.7)
    for name in ("a", "b"):
        assert run("backtest", "--config", cfg, "--seed", 7, "--episodes", 2, "--out", tmp_path / name) == EXIT_OK
    for f in ("report.json", "trajectory.csv", "learning_curve.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_and_pretrain_write_checkpoints(tmp_path):
    cfg = write_config(tmp_path / "c.json", universe=sine_universe(), agent={"kind": "reinforce", "channels": 2,
                       "hidden": 4}, window=10, pretrain={"N": 10, "epochs": 2})
    assert run("train", "--config", cfg, "--episodes", 1, "--out", tmp_path / "t") == EXIT_OK
    assert (tmp_path / "t" / "checkpoint.bin").exists() and (tmp_path / "t" / "pretrain_curve.csv").exists()
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "p") == EXIT_OK
    assert (tmp_path / "p" / "checkpoint.json").exists()


# ---------------------------------------------------------------- generate

def test_generate_sine_csv(tmp_path):
    cfg = write_config(tmp_path / "c.json", universe=sine_universe(50))
    assert run("generate", "--config", cfg, "--out", tmp_path / "g") == EXIT_OK
    frame = load_csv(tmp_path / "g" / "prices.csv")
    assert frame.M == 2 and frame.T == 50


def test_generate_aaft_from_csv_keeps_spectra(tmp_path):
    rng = np.random.default_rng(0)
    src = PriceFrame(business_days(200), ["a", "b", "c"],
                     50 * np.exp(np.cumsum(rng.normal(0, 0.01, (200, 3)), axis=0)))
    write_csv(src, tmp_path / "src.csv")
    before = (tmp_path / "src.csv").read_bytes()
    universe = {"generator": "aaft", "M": 3, "T": 200, "seed": 9, "params": {"source": str(tmp_path / "src.csv")}}
    cfg = write_config(tmp_path / "c.json", universe=universe)
    assert run("generate", "--config", cfg, "--out", tmp_path / "g") == EXIT_OK
    a = to_returns(load_csv(tmp_path / "src.csv"), "log").values
    b = to_returns(load_csv(tmp_path / "g" / "prices.csv"), "log").values
    assert np.abs(np.abs(np.fft.rfft(a, axis=0)) - np.abs(np.fft.rfft(b, axis=0))).max() < 1e-9
    assert not np.allclose(a, b)
    assert (tmp_path / "src.csv").read_bytes() == before


def test_generate_dataset_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.json", universe=sine_universe(), window=8, agent={"kind": "reinforce"},
                       pretrain={"N": 100})
    assert run("generate", "--dataset", "--config", cfg, "--out", tmp_path / "d") == EXIT_OK
    manifest = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert manifest["meta"]["N"] == 100


# ---------------------------------------------------------------- compare

def test_compare_rows_follow_given_order(tmp_path):
    runs = []
    for kind in ("uniform", "buy_and_hold"):
        cfg = write_config(tmp_path / f"{kind}.json", universe=sine_universe(), agent={"kind": kind},
                           window=10, name=kind)
        assert run("backtest", "--config", cfg, "--out", tmp_path / kind) == EXIT_OK
        runs.append(tmp_path / kind)
    assert run("compare", runs[1], runs[0], "--out", tmp_path / "cmp") == EXIT_OK
    rows = list(csv.reader((tmp_path / "cmp" / "comparison.csv").open()))
    assert rows[0] == ["agent", "cumulative_return", "sharpe", "max_drawdown"]
    assert [r[0] for r in rows[1:]] == ["buy_and_hold", "uniform"]
    shutil.copytree(runs[0], tmp_path / "twin")
    assert run("compare", runs[0], tmp_path / "twin", "--out", tmp_path / "cmp2") == EXIT_OK
    rows = list(csv.reader((tmp_path / "cmp2" / "comparison.csv").open()))
    assert rows[1] == rows[2]
    assert run("compare", runs[0], "--out", tmp_path / "cmp3") == EXIT_USAGE
    assert run("compare", runs[0], tmp_path / "absent", "--out", tmp_path / "cmp3") == EXIT_USAGE


def test_installed_entry_point(tmp_path):
    exe = shutil.which("portfolio-rl")
    if exe is None:
        pytest.skip("console script not installed")
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "backtest" in out.stdout
    assert subprocess.run([exe, "frobnicate"], capture_output=True).returncode == EXIT_USAGE
