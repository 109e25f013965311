"""Volumes, cases, preprocessing, patch sampling, phantoms, tiling and splits."""

from .case import (
    CaseRecord,
    TrainSample,
    Window,
    apply_transform,
    augment,
    collate,
    crop_window,
    load_case,
    load_dataset,
    sample_patch,
    save_case,
    save_dataset,
    stack_slices,
)
from .phantom import PhantomSpec, synth_case, synth_dataset
from .preprocess import HU_HI, HU_LO, apply_liver_roi, dilate_liver, hu_window
from .split import fold_split, load_split, save_split, train_test_ids
from .tiling import coverage, extract_tiles, stitch, tile_plan
from .volume import Volume, load_volume, save_volume

__all__ = [
    "CaseRecord", "HU_HI", "HU_LO", "PhantomSpec", "TrainSample", "Volume", "Window", "apply_liver_roi",
    "apply_transform", "augment", "collate", "coverage", "crop_window", "dilate_liver", "extract_tiles",
    "fold_split", "hu_window", "load_case", "load_dataset", "load_split", "load_volume", "sample_patch",
    "save_case", "save_dataset", "save_split", "save_volume", "stack_slices", "stitch", "synth_case",
    "synth_dataset", "tile_plan", "train_test_ids",
]
