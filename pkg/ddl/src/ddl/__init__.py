"""Learned-dictionary volume upsampling, toy scale."""

from .io import IoError, PairEntry, load_volume, read_manifest, save_volume
from .model import (AtomEncoder, AtomGenerator, DdlConfig, DdlModel,
                    ParameterError, ShapeError, generate_dictionary,
                    reconstruct)
from .train import (TrainResult, enhance_volume, load_checkpoint, load_pairs,
                    save_checkpoint)
from .train import train as train_model

__all__ = [
    "AtomEncoder", "AtomGenerator", "DdlConfig", "DdlModel", "IoError",
    "PairEntry", "ParameterError", "ShapeError", "TrainResult",
    "enhance_volume", "generate_dictionary", "load_checkpoint",
    "load_pairs", "load_volume", "read_manifest", "reconstruct",
    "save_checkpoint", "save_volume", "train_model",
]
