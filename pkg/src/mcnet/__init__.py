"""Memory-compensated talking-head animation on a small numpy autodiff core."""

from .config import ConfigError, ModelConfig, RunConfig, desk_config, load_config
from .model import MCNet, count_parameters, init

__all__ = ["ConfigError", "MCNet", "ModelConfig", "RunConfig", "count_parameters", "desk_config",
           "init", "load_config"]
__version__ = "0.1.0"
