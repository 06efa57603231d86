"""Cross-supervised two-stage shape detection on a synthetic world.

Box-annotated and image-annotated categories are trained jointly: the
proposal network and detection branch learn from boxes only, while harvested
proposals let image-labeled categories train the shared leaf classifier.
Ancestor categories are scored at inference by summing descendant-leaf
probabilities over a category tree.
"""

from .geometry import Box, BoxDelta
from .taxonomy import Taxonomy, build_taxonomy, leaf_softmax, aggregate
from .detector import Detection, ModelParams, Proposal, detect, propose
from .losses import LossBreakdown, SampleKind, TrainSample, batch_loss_and_grads
from .trainer import TrainConfig, train
from .evaluator import EvalReport, average_precision, evaluate_model, mean_ap
from .synthworld import WorldConfig, demo_world_config, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Box",
    "BoxDelta",
    "Taxonomy",
    "build_taxonomy",
    "leaf_softmax",
    "aggregate",
    "Detection",
    "ModelParams",
    "Proposal",
    "detect",
    "propose",
    "LossBreakdown",
    "SampleKind",
    "TrainSample",
    "batch_loss_and_grads",
    "TrainConfig",
    "train",
    "EvalReport",
    "average_precision",
    "evaluate_model",
    "mean_ap",
    "WorldConfig",
    "demo_world_config",
    "generate_dataset",
    "__version__",
]
