"""Label-free replay with cluster prototypes for continual representation learning."""

from .buffer import ReplayBuffer, build_task_entries, load, persist, select_dimensions, select_support
from .clustering import kmeans, minibatch_kmeans
from .errors import LRCPError
from .losses import (
    combined_loss,
    preserve_loss,
    pseudo_contrastive_loss,
    pull_loss,
    push_loss,
    supcon_loss,
)
from .metrics import AccuracyMatrix, average_accuracy, bwt, classify
from .numeric import adam_init, adam_step, init_projector, normalize, project
from .runner import RunConfig, RunReport, run

__all__ = [
    "AccuracyMatrix", "LRCPError", "ReplayBuffer", "RunConfig", "RunReport",
    "adam_init", "adam_step", "average_accuracy", "build_task_entries", "bwt", "classify",
    "combined_loss", "init_projector", "kmeans", "load", "minibatch_kmeans", "normalize",
    "persist", "preserve_loss", "project", "pseudo_contrastive_loss", "pull_loss",
    "push_loss", "run", "select_dimensions", "select_support", "supcon_loss",
]

__version__ = "0.1.0"
