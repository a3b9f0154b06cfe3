"""Numpy reference implementation of an efficient multi-scale convolutional
attention decoder, with cost accounting, losses and a small CLI."""

from .cost import CostReport, analyze, calibrate_gate, compare_gate_costs, config_cost, count_flops, count_params
from .decoder import (Decoder, DecoderConfig, PredictionMaps, PyramidFeatures, aggregate_predictions,
                      build_decoder, decoder_forward, final_map, standard_config, synth_features, tiny_config)
from .io import FormatError, load_config, load_decoder, read_tensor, save_decoder, write_tensor
from .losses import (LossWeights, additive_loss, bce_iou_weighted, ce_dice_loss, dice_score, hd95,
                     iou_score, mutation_loss)
from .tensor import ConfigError, ConvParams, NormParams, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConvParams", "CostReport", "Decoder", "DecoderConfig", "FormatError", "LossWeights",
    "NormParams", "PredictionMaps", "PyramidFeatures", "ShapeError", "additive_loss", "aggregate_predictions",
    "analyze", "bce_iou_weighted", "build_decoder", "calibrate_gate", "ce_dice_loss", "compare_gate_costs",
    "config_cost", "count_flops", "count_params", "decoder_forward", "dice_score", "final_map", "hd95",
    "iou_score", "load_config", "load_decoder", "mutation_loss", "read_tensor", "save_decoder",
    "standard_config", "synth_features", "tiny_config", "write_tensor",
]
