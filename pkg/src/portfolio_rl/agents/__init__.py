"""Agents: baselines, model-based planners and model-free learners."""

from .base import Agent, BuyAndHold, OracleAgent, RandomAgent, SMMAgent, UniformRebalance
from .model_based import (ModelBasedAgent, RnnPredictor, VarModel, aic_scores, fit_var,
                          online_update, plan_action, predict_path, select_order_aic)
from .model_free import (DsrqnAgent, FiniteMDP, LearningCurve, PolicyAgent, QTable,
                         ReinforceConfig, dirichlet_log_prob, dsrqn_step, evaluate_policy,
                         q_learning_tabular, reinforce_train)
from .networks import (DsrqnNet, MixtureNet, PolicyNet, ScoreMachine, ScoreMachines,
                       WindowEncoder, msm_forward, msm_transfer)
