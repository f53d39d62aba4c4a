"""Joint multi-prior encoding toolkit for topology-aware vessel segmentation."""

from .grids import BinaryMask, DistanceMap, SoftMask, VoxelGrid, binarize, load_grid, save_grid
from .metrics import MetricsReport, evaluate_all
from .phantoms import PhantomSample, TreeSpec, generate_tree, make_dataset
from .prior_nets import LossWeights, PriorCodec, PriorNetSpec
from .seg_core import ResUNet, SegModelSpec, VariantSpec
from .topology import compute_edt, extract_ridge, skeletonize

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "DistanceMap",
    "SoftMask",
    "VoxelGrid",
    "binarize",
    "load_grid",
    "save_grid",
    "MetricsReport",
    "evaluate_all",
    "PhantomSample",
    "TreeSpec",
    "generate_tree",
    "make_dataset",
    "LossWeights",
    "PriorCodec",
    "PriorNetSpec",
    "ResUNet",
    "SegModelSpec",
    "VariantSpec",
    "compute_edt",
    "extract_ridge",
    "skeletonize",
    "__version__",
]
