"""Risk-profiled safety-critic DDPG ensemble with a softmax meta-controller.

Modules: ``data`` (OHLCV ingestion, indicators, splits, synthetic markets),
``env`` (portfolio MDP), ``risk`` (risk score and compliance overlay),
``nn`` (numpy MLPs and Adam), ``agent`` (safety-critic DDPG), ``meta``
(controller and aggregation), ``train``, ``backtest`` and ``cli``.
"""

__version__ = "0.1.0"
