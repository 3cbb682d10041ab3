"""Multi-task learning to rank on a small numpy autodiff engine."""

from . import autodiff, balancers, data, losses, metrics, model

__version__ = "0.1.0"

__all__ = ["autodiff", "balancers", "data", "losses", "metrics", "model", "__version__"]
