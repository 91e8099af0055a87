"""Quantization-aware training with learned fractional bit-widths.

The package is numpy-only. ``tensor`` is a small reverse-mode autodiff
engine, ``quantizers`` holds the DoReFa weight and PACT activation
quantizers, ``controller`` searches the network-wide weight and activation
bit-widths, ``cost`` does the BitOPs / compression accounting and ``train``
ties everything into an experiment runner driven by ``cli``.
"""

from .controller import BitWidthController, ControllerConfig, FractionalBitWidth
from .cost import bitops_layer, bitops_network, hard_loss, weight_compression_rate
from .models import ModelSpec, Precision, build_model
from .quantizers import pact_forward, quantize_unit, quantize_weights_forward
from .train import TrainConfig, evaluate, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BitWidthController", "ControllerConfig", "FractionalBitWidth", "ModelSpec", "Precision", "TrainConfig",
    "bitops_layer", "bitops_network", "build_model", "evaluate", "hard_loss", "pact_forward",
    "quantize_unit", "quantize_weights_forward", "run_experiment", "weight_compression_rate",
]
