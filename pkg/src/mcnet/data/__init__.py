from .checkpoint import (CheckpointError, ShapeMismatchError, TrainState, load_checkpoint,
                         load_tensors, save_checkpoint, save_tensors)
from .imageio import ImageFormatError, read_image, read_rgb, write_pgm, write_ppm
from .manifest import FrameDataset, ManifestError, Pair, read_manifest, sample_batch, sample_pair, write_manifest
from .synth import SyntheticScene, random_scene, render_sequence, write_dataset

__all__ = [
    "CheckpointError", "FrameDataset", "ImageFormatError", "ManifestError", "Pair",
    "ShapeMismatchError", "SyntheticScene", "TrainState", "load_checkpoint", "load_tensors",
    "random_scene", "read_image", "read_manifest", "read_rgb", "render_sequence", "sample_batch",
    "sample_pair", "save_checkpoint", "save_tensors", "write_dataset", "write_manifest", "write_pgm",
    "write_ppm",
]
