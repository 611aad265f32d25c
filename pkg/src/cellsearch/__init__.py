"""Desk-scale differentiable skip-cell architecture search with
JS-divergence stability pruning, on a synthetic 2-D segmentation task."""

import os as _os

# Cap BLAS threading before numpy spins up its pools; single-threaded
# kernels keep tiny-matrix runs fast and reduction order fixed.
if "CELLSEARCH_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["CELLSEARCH_THREADS"])

from .autodiff import Parameter, ShapeError, Tensor, adam_step, backward, sgd_step
from .backbone import UNetBackbone, evaluate_model, pretrain_backbone
from .cell import ArchParams, CellSpec, CellWeights, ChannelMask, DiscreteGenotype
from .ops import CANDIDATE_OPS, OpKind
from .pruner import ImportanceState, PruneEvent
from .runio import RunConfig, reference_config
from .search import SearchConfig, SearchResult, run_search, train_final
from .task import SegDataset, SynthVolume, generate_dataset, patient_dice, segmentation_loss
from .trajectory import TrajectoryLog

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "backward",
    "sgd_step",
    "adam_step",
    "OpKind",
    "CANDIDATE_OPS",
    "CellSpec",
    "ArchParams",
    "ChannelMask",
    "CellWeights",
    "DiscreteGenotype",
    "SegDataset",
    "SynthVolume",
    "generate_dataset",
    "segmentation_loss",
    "patient_dice",
    "UNetBackbone",
    "pretrain_backbone",
    "evaluate_model",
    "ImportanceState",
    "PruneEvent",
    "TrajectoryLog",
    "SearchConfig",
    "SearchResult",
    "run_search",
    "train_final",
    "RunConfig",
    "reference_config",
    "__version__",
]
