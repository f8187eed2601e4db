from .decoder import CountingPredictor, LinePredictor, PointPredictor
from .drssm import DRSSM, density_reorder, inverse_reorder, semantic_labels
from .encoder import Encoder, EncoderConfig
from .losses import LossWeights, combine, loss_components, structure_loss, total_loss
from .network import MDCNeXt, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint, summary
from .pfssm import PFSSM, PromptFilter

__all__ = [
    "CountingPredictor", "LinePredictor", "PointPredictor", "DRSSM", "density_reorder",
    "inverse_reorder", "semantic_labels", "Encoder", "EncoderConfig", "LossWeights", "combine",
    "loss_components", "structure_loss", "total_loss", "MDCNeXt", "ModelConfig", "ModelOutput",
    "load_checkpoint", "save_checkpoint", "summary", "PFSSM", "PromptFilter",
]
