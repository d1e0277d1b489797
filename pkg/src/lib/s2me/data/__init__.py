"""
Synthetic corpus, scribble synthesis, augmentation, corruptions and the S2TF container.
"""

from .augment import augment, flip_sample, resize_image, resize_labels
from .corrupt import CORRUPTION_KINDS, corrupt, parse_corruption, psnr
from .scribbles import generate_scribbles, largest_component, random_walk
from .synthetic import (
    MIN_SIZE,
    SPLITS,
    DatasetManifest,
    Sample,
    corpus_statistics,
    generate_synthetic_dataset,
    load_sample,
    render_sample,
)
from .tensorfile import decode_tensors, encode_tensors, tensor_file_read, tensor_file_write

__all__ = [
    "CORRUPTION_KINDS", "DatasetManifest", "MIN_SIZE", "SPLITS", "Sample", "augment",
    "corpus_statistics", "corrupt", "decode_tensors", "encode_tensors", "flip_sample",
    "generate_scribbles", "generate_synthetic_dataset", "largest_component", "load_sample",
    "parse_corruption", "psnr", "random_walk", "render_sample", "resize_image", "resize_labels",
    "tensor_file_read", "tensor_file_write",
]
