"""Portfolio construction for ranked equity-factor signals.

Five schemes turn a predictor into positions (FF buckets, neutral, beta
rescaled, beta-optimal and eigenvalue-clipped Markowitz) plus a cost-aware
Markowitz on a smoothed predictor. The package also carries the data layer,
a daily backtest and the diagnostics used to compare schemes.
"""

from .errors import ComputationError, ConfigError, DataError, PortconError

__version__ = "0.1.0"

__all__ = ["ComputationError", "ConfigError", "DataError", "PortconError", "__version__"]
