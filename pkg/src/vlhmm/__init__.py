"""Variable length hidden Markov models: context-tree estimation by penalised likelihood."""

__version__ = "0.1.0"

from .tree import ContextTree
from .vlmc import TransitionParams
from .emissions import EmissionParams
from .inference import FullParams, em_fit, loglik
from .selection import ExperimentConfig, Penalty, prune_search, run_experiment

__all__ = [
    "ContextTree",
    "TransitionParams",
    "EmissionParams",
    "FullParams",
    "em_fit",
    "loglik",
    "Penalty",
    "prune_search",
    "ExperimentConfig",
    "run_experiment",
    "__version__",
]
