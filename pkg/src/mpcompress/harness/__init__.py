from .config import ConfigError, ExperimentConfig, from_dict, link_preset, load_config
from .datasets import Dataset, DatasetSpec, gen_synthetic, load_idx, make_dataset
from .runner import run_experiment

__all__ = [
    "ConfigError",
    "Dataset",
    "DatasetSpec",
    "ExperimentConfig",
    "from_dict",
    "gen_synthetic",
    "link_preset",
    "load_config",
    "load_idx",
    "make_dataset",
    "run_experiment",
]
