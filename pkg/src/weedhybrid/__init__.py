"""Hybrid CNN-ViT-GNN weed detection pipeline, desk scale.

Subpackages: tensor (autodiff core), imaging (preprocessing), backbone
(feature extractor), heads (multi-task outputs and losses), gan (class
rebalancing), pretrain (contrastive initialization), training (optimizer,
folds, metrics), deploy (checkpoints, pruning, quantization), synthdata /
dataio / config / cli (dataset and command-line plumbing).
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor  # noqa: F401
