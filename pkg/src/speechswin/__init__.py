"""Log-Mel features, a shifted-window hierarchical Transformer over spectrogram segments, and leave-one-speaker-out training."""

from .autodiff import Tape, Tensor, backward
from .dsp import AudioClip, DSPConfig
from .model import ModelConfig, feature_maps, forward, init_params
from .training import EvalReport, LabeledDataset, TrainedModel, compute_metrics, evaluate, train_fold

__version__ = "0.1.0"
