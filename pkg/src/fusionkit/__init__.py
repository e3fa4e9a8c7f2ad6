"""Merge, ensemble, mask and prune neural-network checkpoints.

Checkpoints are tensor maps (``dict[str, np.ndarray]``) stored as
safetensors files. See :mod:`fusionkit.merge_algorithms` for the fusion
methods and :mod:`fusionkit.pipeline` for the config-driven pipeline.
"""

__version__ = "0.1.0"

from .checkpoint_io import CheckpointRef, load_file, open_lazy, save_map  # noqa: E402
from .merge_algorithms import MergeSpec, merge, run  # noqa: E402
from .model_pool import KeyFilter, ModelPool  # noqa: E402

__all__ = [
    "CheckpointRef",
    "KeyFilter",
    "MergeSpec",
    "ModelPool",
    "load_file",
    "merge",
    "open_lazy",
    "run",
    "save_map",
]
