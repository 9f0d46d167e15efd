"""Static figure rendering for TNO metrics and training logs."""

from .figures import (MalformedCsvError, plot_error_curves, plot_training_log,
                      read_metrics, read_train_log)

__version__ = "0.1.0"

__all__ = ["MalformedCsvError", "plot_error_curves", "plot_training_log",
           "read_metrics", "read_train_log"]
