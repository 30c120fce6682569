"""Tabular laboratory for belief-based meta-RL with bisimulation task metrics."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config  # noqa: E402
from .errors import LabError  # noqa: E402
from .harness import emit_plot_data, run_experiment, selfcheck  # noqa: E402
from .tasks import TabularTask, TaskFamily, generate_family  # noqa: E402

__all__ = [
    "__version__",
    "ExperimentConfig",
    "LabError",
    "TabularTask",
    "TaskFamily",
    "emit_plot_data",
    "generate_family",
    "load_config",
    "run_experiment",
    "selfcheck",
]
