"""Reversible adversarial examples via reversible image transformation."""

from .attacks import AdvResult, AttackConfig, cw_l2, deepfool, ifgsm, read_attack_configs, run_attack
from .bitstream import BitReader, BitStream, BitWriter, ParseError
from .data import LabeledImages, digit_images, read_corpus, write_dataset
from .image import BlockGrid, ImageFormatError, load_image, partition, psnr, save_image
from .nn import ToyNetClassifier, load_weights, save_weights
from .pipeline import EvalReport, evaluate, make_rae, payload_comparison, rde_required_bits
from .rdh import CapacityError, NoEmbeddedDataError, RDHError, rdh_capacity, rdh_embed, rdh_extract
from .rit import (
    AuxPayload,
    IntegrityError,
    ReversibleImageTransform,
    best_rotation,
    deserialize_aux,
    feasible_mean_shift,
    pair_blocks,
    restore,
    serialize_aux,
    transform,
)

__version__ = "0.1.0"

__all__ = [
    "AdvResult", "AttackConfig", "AuxPayload", "BitReader", "BitStream", "BitWriter", "BlockGrid",
    "CapacityError", "EvalReport", "ImageFormatError", "IntegrityError", "LabeledImages",
    "NoEmbeddedDataError", "ParseError", "RDHError", "ReversibleImageTransform", "ToyNetClassifier",
    "best_rotation", "cw_l2", "deepfool", "deserialize_aux", "digit_images", "evaluate",
    "feasible_mean_shift", "ifgsm", "load_image", "load_weights", "make_rae", "pair_blocks",
    "partition", "payload_comparison", "psnr", "rdh_capacity", "rdh_embed", "rdh_extract",
    "rde_required_bits", "read_attack_configs", "read_corpus", "restore", "run_attack",
    "save_image", "save_weights", "serialize_aux", "transform", "write_dataset",
]
