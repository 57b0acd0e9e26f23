"""Speech-to-LLM encoder trained to mimic text prompts through a frozen decoder LM."""

from .encoder import AudioEncoder, EncoderConfig, WaveformInput, pool_uniform, project
from .ctc import ctc_greedy_collapse, pool_ctc_aligned, word_start_indices
from .objectives import LossWeights, feature_distill_loss, logit_distill_loss, ntp_loss, total_loss
from .training import TrainConfig, lr_at_step, train

__all__ = [
    "AudioEncoder", "EncoderConfig", "WaveformInput", "pool_uniform", "project",
    "ctc_greedy_collapse", "pool_ctc_aligned", "word_start_indices",
    "LossWeights", "feature_distill_loss", "logit_distill_loss", "ntp_loss", "total_loss",
    "TrainConfig", "lr_at_step", "train",
]
__version__ = "0.1.0"
