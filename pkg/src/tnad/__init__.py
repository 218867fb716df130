"""One-class anomaly detection with a spaced matrix product operator.

A sample is embedded as a product state, mapped by a learned MPO ``P``, and
scored by ``log ||P Phi(x)||^2`` (higher is more normal). Training pulls
normal samples onto the sphere ``log ||P Phi(x)||^2 = 1`` while penalizing
``log ||P||_F^2``, the total normality the model assigns to the whole input
space.
"""

from .embedding import EmbeddingSpec, ProductState, embed_batch, embed_sample, phi_four, phi_trig
from .evaluation import auroc, run_odds, run_one_class_image
from .mpo import MpoModel, MpoShape, decision_log, decision_logs, fnorm_log, init_mpo, load, save, score
from .training import TrainConfig, train

__all__ = [
    "EmbeddingSpec", "ProductState", "embed_batch", "embed_sample", "phi_four", "phi_trig",
    "auroc", "run_odds", "run_one_class_image",
    "MpoModel", "MpoShape", "decision_log", "decision_logs", "fnorm_log", "init_mpo", "load", "save", "score",
    "TrainConfig", "train",
]
__version__ = "0.1.0"
