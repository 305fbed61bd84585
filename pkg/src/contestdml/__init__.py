"""Double machine learning for the effect of starting first in two-player
contests, with forests, heterogeneity estimators and a contest simulator."""

__version__ = "0.1.0"

from .errors import ConfigError, ContestDMLError, DataError, NumericError, RankDeficientError  # noqa: E402

__all__ = ["ConfigError", "ContestDMLError", "DataError", "NumericError", "RankDeficientError", "__version__"]
