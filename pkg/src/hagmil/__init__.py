"""HAG-MIL: hierarchical attention-guided multiple instance learning with an integrated attention transformer."""

from .data_io import FeaturePyramid, SynthConfig, synth_generate
from .hag import HagConfig, evaluate, infer, train
from .iat import IatConfig, IatModel, iat_forward
from .metrics import EvalReport, auc, classify_metrics
from .pyramid import QuadTreeIndex, build_quadtree
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "FeaturePyramid", "GradTape", "HagConfig", "IatConfig", "IatModel", "QuadTreeIndex",
    "SynthConfig", "Tensor", "auc", "backward", "build_quadtree", "classify_metrics", "evaluate",
    "iat_forward", "infer", "synth_generate", "train",
]
