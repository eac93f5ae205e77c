"""Sequential portfolio-management laboratory.

Market data, risk metrics, one-step portfolio optimizers, a small
reverse-mode autodiff engine, a backtest environment and a ladder of
trading agents (static optimizers, model-based predictors, model-free
reinforcement learners).
"""

__version__ = "0.1.0"
