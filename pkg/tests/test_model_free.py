import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import value_iteration
from portfolio_rl.agents import (DsrqnAgent, DsrqnNet, FiniteMDP, MixtureNet, PolicyAgent, PolicyNet,
                                 ReinforceConfig, ScoreMachines, dirichlet_log_prob, dsrqn_step,
                                 msm_forward, msm_transfer, q_learning_tabular, reinforce_train)
from portfolio_rl.agents.model_free import discounted_returns, sample_dirichlet
from portfolio_rl.data import PortfolioVector, PriceFrame, business_days
from portfolio_rl.environment import AgentObservation, MarketEnv, run_episode
from portfolio_rl.tensor import Adam, Tensor, core


def one_step_env(growth, window=4):
    """Flat prices for the window, then one move by `growth` per asset: a one-step bandit."""
    growth = np.asarray(growth, float)
    v = np.ones((window + 2, growth.size)) * 100.0
    v[-1] *= growth
    return MarketEnv(PriceFrame(business_days(window + 2), [f"A{i}" for i in range(growth.size)], v),
                     window=window, beta=0.0, start=window, end=window + 1)


def random_observation(rng, M=3, T=8):
    return AgentObservation(rng.normal(0, 0.01, (T, M)), PortfolioVector.uniform(M), T)


# ---------------------------------------------------------------- tabular Q-learning

def test_bandit_learns_expected_rewards():
    mdp = FiniteMDP(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]))
    table = q_learning_tabular(mdp, steps=10_000, gamma=0.0)
    assert np.abs(table.q - [[0.0, 1.0]]).max() < 1e-2
    assert table.greedy_policy()[0] == 1


def test_two_state_chain_matches_value_iteration():
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 0] = 1.0  # action 0 goes to state 0
    P[0, 1, 1] = P[1, 1, 1] = 1.0  # action 1 goes to state 1
    R = np.array([[0.0, 0.2], [1.0, 0.5]])
    table = q_learning_tabular(FiniteMDP(P, R), steps=200_000, gamma=0.9)
    assert np.abs(table.q - value_iteration(P, R, 0.9)).max() < 1e-3


def test_zero_learning_rate_keeps_table():
    mdp = FiniteMDP.random(3, 2, np.random.default_rng(0))
    assert np.array_equal(q_learning_tabular(mdp, steps=1000, alpha=0.0).q, np.zeros((3, 2)))


@settings(max_examples=6, deadline=None)
@given(st.integers(2, 3), st.integers(2, 3), st.integers(0, 10_000))
def test_q_learning_reaches_fixed_point(n_states, n_actions, seed):
    # at 200k steps about one random small MDP in six still sits above 1e-2 from sampling noise alone
    mdp = FiniteMDP.random(n_states, n_actions, np.random.default_rng(seed))
    table = q_learning_tabular(mdp, steps=2_000_000, gamma=0.9, seed=seed)
    assert np.abs(table.q - value_iteration(mdp.P, mdp.R, 0.9)).max() < 1e-2


def test_mdp_validation():
    from portfolio_rl.errors import ValidationError
    with pytest.raises(ValidationError):
        FiniteMDP(np.full((2, 1, 2), 0.7), np.zeros((2, 1)))


# ---------------------------------------------------------------- Dirichlet policy

def test_dirichlet_log_prob_matches_scipy():
    from scipy.stats import dirichlet
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4))
    a = rng.dirichlet(np.ones(4))
    ours = float(dirichlet_log_prob(Tensor(p[None]), a[None], 7.0).data[0])
    assert ours == pytest.approx(dirichlet.logpdf(a, 7.0 * p), rel=1e-12)


def test_sampled_actions_are_valid():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = sample_dirichlet(rng, np.array([0.999, 0.0005, 0.0005]), 50.0)
        assert abs(a.sum() - 1) < 1e-12 and a.min() > 0


def test_discounted_returns_by_hand():
    assert np.allclose(discounted_returns([1.0, 2.0, 3.0], 0.5), [1 + 1 + 0.75, 2 + 1.5, 3])
    assert np.allclose(discounted_returns([1.0, 2.0, 3.0], 0.0), [1, 2, 3])


def test_score_function_estimator_matches_analytic_gradient():
    # one-step bandit: reward = a . r + noise, so E[reward] = softmax(theta) . r
    rng = np.random.default_rng(0)
    r = np.array([0.02, -0.01, 0.005, 0.0])
    theta = np.array([0.3, -0.2, 0.1, 0.0])
    kappa = 50.0
    p = np.exp(theta) / np.exp(theta).sum()
    analytic = p * (r - p @ r)
    n = 10_000
    acts = np.array([sample_dirichlet(rng, p, kappa) for _ in range(n)])
    rewards = acts @ r + rng.normal(0, 0.01, n)
    t = Tensor(np.tile(theta, (n, 1)), requires_grad=True)
    logp = dirichlet_log_prob(core.softmax(t, axis=-1), acts, kappa)
    (logp * Tensor(rewards)).sum().backward()
    estimate = t.grad.mean(axis=0)
    cos = estimate @ analytic / (np.linalg.norm(estimate) * np.linalg.norm(analytic))
    assert cos > 0.9


# ---------------------------------------------------------------- REINFORCE

@pytest.mark.parametrize("seed", [0, 1])
def test_reinforce_bandit_concentrates_on_dominant_asset(seed):
    env = one_step_env([1.05, 1.0, 0.99])
    net = PolicyNet(3, 4, channels=2, hidden=4, seed=seed)
    hit = []

    def stop(ep, train_ret, test_ret):
        obs = env.reset()
        agent = PolicyAgent(net)
        agent.begin_episode(env)
        if agent.act(obs).weights[0] >= 0.9:
            hit.append(ep)
            return True

    _, curve = reinforce_train(net, env, config=ReinforceConfig(episodes=500, lr=2e-2, seed=seed),
                               callback=stop)
    assert hit and hit[0] < 500


def test_reinforce_seeds_give_different_trajectories():
    env = one_step_env([1.05, 1.0, 0.99])
    curves = []
    for seed in (0, 1):
        net = PolicyNet(3, 4, channels=2, hidden=4, seed=0)
        _, c = reinforce_train(net, env, config=ReinforceConfig(episodes=5, seed=seed))
        curves.append(c.train_return)
    assert curves[0] != curves[1]


def test_constant_rewards_leave_parameters_in_place():
    env = one_step_env([1.0, 1.0])  # every allocation earns exactly 0
    net = PolicyNet(2, 4, channels=2, hidden=4, seed=0)
    before = net.state_dict()
    reinforce_train(net, env, config=ReinforceConfig(episodes=20, lr=1e-2, gamma=1.0))
    drift = max(np.abs(before[k] - v).max() for k, v in net.state_dict().items())
    assert drift < 1e-6


def test_learning_curve_csv(tmp_path):
    env = one_step_env([1.02, 1.0])
    _, curve = reinforce_train(PolicyNet(2, 4, channels=2, hidden=4), env,
                               config=ReinforceConfig(episodes=3), eval_env=env, eval_every=2)
    curve.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "episode,train_return,test_return" and len(lines) == 4
    assert lines[2].endswith(",")  # no evaluation at episode 1


# ---------------------------------------------------------------- DSRQN

def test_identical_action_values_give_uniform_weights():
    net = DsrqnNet(3, 8, channels=2, hidden=4, seed=0)
    net.head.W.data[:] = 0.0
    agent = DsrqnAgent(net)
    w = dsrqn_step(agent, random_observation(np.random.default_rng(0)), train=False)
    assert np.allclose(w.weights, 1 / 3, atol=1e-15)


def test_td_without_discount_regresses_toward_rewards():
    obs = random_observation(np.random.default_rng(1))
    agent = DsrqnAgent(DsrqnNet(3, 8, channels=2, hidden=4, seed=0), gamma=0.0, lr=1e-3)
    r = np.array([0.0, 3.0, 0.0])
    q1 = []
    for _ in range(100):
        dsrqn_step(agent, obs, r)
        q1.append(agent.q_values(obs)[1])
    assert np.all(np.diff(q1) > 0)
    agent.opt.lr = 1e-2
    for _ in range(400):
        agent.td_update(obs, r)
    assert np.abs(agent.q_values(obs) - r).max() < 1e-2


def test_eval_mode_is_bitwise_frozen():
    env = MarketEnv(PriceFrame(business_days(40), ["a", "b", "c"],
                               100 * np.exp(np.cumsum(np.random.default_rng(0).normal(0, 0.01, (40, 3)), 0))),
                    window=8)
    net = DsrqnNet(3, 8, channels=2, hidden=4, seed=0)
    before = net.state_dict()
    run_episode(env, DsrqnAgent(net, train=False))
    assert all(before[k].tobytes() == v.tobytes() for k, v in net.state_dict().items())
    run_episode(env, DsrqnAgent(net, train=True))
    assert any(before[k].tobytes() != v.tobytes() for k, v in net.state_dict().items())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_all_agents_emit_valid_portfolios(seed):
    rng = np.random.default_rng(seed)
    v = 100 * np.exp(np.cumsum(rng.normal(0, 0.02, (30, 3)), 0))
    env = MarketEnv(PriceFrame(business_days(30), ["a", "b", "c"], v), window=8, beta=0.002)
    agents = [DsrqnAgent(DsrqnNet(3, 8, channels=2, hidden=4, seed=seed)),
              PolicyAgent(PolicyNet(3, 8, channels=2, hidden=4, seed=seed), stochastic=True, seed=seed),
              PolicyAgent(ScoreMachines(3, 8, channels=2, hidden=4, mixture_hidden=4, seed=seed))]
    for agent in agents:
        traj, _ = run_episode(env, agent)
        W = traj.weights_matrix()
        assert np.all(np.abs(W.sum(axis=1) - 1) <= 1e-9) and W.min() >= 0


# ---------------------------------------------------------------- mixture of score machines

@pytest.mark.parametrize("M,pairs", [(2, 1), (3, 3), (12, 66)])
def test_score_counts(M, pairs):
    sm = ScoreMachines(M, 8, channels=2, hidden=4, seed=0)
    scores = sm.scores(np.zeros((2, 8, M))).data
    assert scores.shape == (2, M + pairs)
    assert (sm.n_first_order, sm.n_second_order) == (M, pairs)


def test_score_machines_do_not_grow_with_universe():
    counts = {M: ScoreMachines(M, 10, seed=0) for M in (3, 6, 12)}
    sm_sizes = {M: s.score_machine_parameter_count() for M, s in counts.items()}
    assert len(set(sm_sizes.values())) == 1
    mix = {M: s.mixture.parameter_count() for M, s in counts.items()}
    hidden = 32
    for M, n in mix.items():
        n_in = M + M * (M - 1) // 2
        assert n == n_in * hidden + hidden + M * hidden + hidden * M + M


def test_duplicated_asset_gets_identical_first_order_score():
    rng = np.random.default_rng(0)
    X = rng.normal(0, 0.01, (1, 8, 3))
    X[..., 2] = X[..., 0]
    s = ScoreMachines(3, 8, channels=2, hidden=4, seed=1).scores(X).data[0]
    assert s[0] == s[2]


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_scores_follow_asset_permutations(perm, seed):
    X = np.random.default_rng(seed).normal(0, 0.01, (2, 8, 4))
    sm = ScoreMachines(4, 8, channels=2, hidden=4, seed=seed)
    s = sm.scores(X).data
    sp = sm.scores(X[..., list(perm)]).data
    assert np.allclose(sp[:, :4], s[:, list(perm)], atol=1e-12)
    # a pair (i, j) of the permuted universe is the original pair (perm i, perm j), possibly reversed
    lookup = {p: k for k, p in enumerate(sm.pairs)}
    for k, (i, j) in enumerate(sm.pairs):
        a, b = perm[i], perm[j]
        if a < b:
            assert np.allclose(sp[:, 4 + k], s[:, 4 + lookup[(a, b)]], atol=1e-12)


def test_single_asset_universe_is_all_in():
    sm = ScoreMachines(1, 8, channels=2, hidden=4)
    obs = random_observation(np.random.default_rng(0), M=1)
    assert np.array_equal(msm_forward(sm, obs).weights, [1.0])


def test_transfer_freezes_score_machines_and_sizes_mixture():
    rng = np.random.default_rng(0)
    sm = ScoreMachines(4, 8, channels=2, hidden=4, seed=0)
    moved = msm_transfer(sm, 3)
    assert moved.mixture.input_width == 6
    before = {k: v.copy() for k, v in moved.state_dict().items() if k.startswith("sm")}
    opt = Adam(moved.parameters(trainable_only=True), lr=0.1)
    X = rng.normal(0, 0.01, (5, 8, 3))
    past = np.full((5, 3), 1 / 3)
    for _ in range(3):
        opt.zero_grad()
        (moved(X, past) * Tensor(rng.normal(size=(5, 3)))).sum().backward()
        opt.step()
    after = moved.state_dict()
    assert before and all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert moved.parameter_count(trainable_only=True) == moved.mixture.parameter_count()
    assert isinstance(moved.mixture, MixtureNet)


def test_transfer_to_permuted_universe_recovers_quickly():
    from portfolio_rl.agents import OracleAgent, evaluate_policy
    from portfolio_rl.data import UniverseSpec, gen_waves
    frame = gen_waves(UniverseSpec("sine", M=3, T=300, seed=3, params={
        "amplitude": [20, 30, 25], "period": [25, 38, 31], "phase": [0, 1, 2]}))
    perm = [2, 0, 1]
    shuffled = PriceFrame(frame.timestamps, [frame.assets[i] for i in perm], frame.values[:, perm])
    env = MarketEnv(frame, window=20, beta=0.0, start=20, end=frame.T - 1)
    env2 = MarketEnv(shuffled, window=20, beta=0.0, start=20, end=frame.T - 1)
    sm = ScoreMachines(3, 20, channels=4, hidden=8, mixture_hidden=16, seed=0)
    sm, _ = reinforce_train(sm, env, config=ReinforceConfig(episodes=80, gamma=0.0, lr=3e-3, seed=0))
    original = evaluate_policy(sm, env)
    oracle = sum(run_episode(env, OracleAgent())[0].rewards)
    assert original > 0.9 * oracle
    # a quarter of the original budget, training only the fresh mixture
    moved = msm_transfer(sm, 3, seed=1)
    moved, _ = reinforce_train(moved, env2, config=ReinforceConfig(episodes=20, gamma=0.0, lr=3e-2, seed=1))
    assert evaluate_policy(moved, env2) >= 0.95 * original
