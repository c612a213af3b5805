"""Volatility-spike forecasting for BTC: ingestion, whale-alert parsing,
features, Synthesizer Transformer models, evaluation and backtesting."""

__version__ = "0.1.0"
