"""PPG-to-respiration signal translation with a from-scratch 1D conv autodiff stack."""

from respnet.errors import RespNetError
from respnet.model import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from respnet.signalio import SynthConfig, WindowedDataset, build_dataset, synth_cohort, synth_record
from respnet.tensor import Tensor, backward
from respnet.trainer import TrainConfig, predict, train

__all__ = [
    "ModelConfig",
    "RespNetError",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "WindowedDataset",
    "backward",
    "build_dataset",
    "build_model",
    "forward",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "synth_cohort",
    "synth_record",
    "train",
]
