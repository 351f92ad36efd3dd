"""Token-based driver gaze prediction with bounding-box data cleansing."""

from .data import BBox, DatasetManifest, Frame, SynthSpec, load_manifest, synth_dataset
from .model import CueingModel, ModelConfig, count_flops, load_checkpoint, save_checkpoint
from .train import RenderParams, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "DatasetManifest",
    "Frame",
    "SynthSpec",
    "load_manifest",
    "synth_dataset",
    "CueingModel",
    "ModelConfig",
    "count_flops",
    "load_checkpoint",
    "save_checkpoint",
    "RenderParams",
    "TrainConfig",
    "evaluate",
    "train",
]
