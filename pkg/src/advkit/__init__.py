"""advkit: attention-guided adversarial attacks and baselines on a small numpy autograd."""
from .attacks import ATTACKS, AttackConfig, AttackResult, run_attack
from .data import Dataset, desk_digits, load_dataset
from .defenses import DefenseConfig, apply_defense
from .errors import AdvkitError
from .model import Model, build_model, load_weights, save_weights, train

__version__ = "0.1.0"

__all__ = [
    "ATTACKS",
    "AdvkitError",
    "AttackConfig",
    "AttackResult",
    "Dataset",
    "DefenseConfig",
    "Model",
    "apply_defense",
    "build_model",
    "desk_digits",
    "load_dataset",
    "load_weights",
    "run_attack",
    "save_weights",
    "train",
]
