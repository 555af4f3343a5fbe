"""quantnet: quantization-aware training with learned per-layer scales,
BN-free transformation, and compilation to bit-exact integer inference.
"""

from .errors import (CompileError, ConfigError, DataError, DimensionError,
                     DivergenceError, EquivalenceError, QuantnetError,
                     StructureError, UsageError)
from .integer import (IntegerLayerPlan, IntegerModel, OpCounter,
                      accumulator_bits, compile_layer, compile_model,
                      scan_plan, verify_equivalence)
from .layers import (ActQuantNode, AddNode, BatchNormNode, Conv1dNode,
                     Conv2dNode, DenseNode, InputNode, NetworkSpec, PoolNode,
                     ReluNode, absorb_bn_scale, bn_fold, build_kws_net,
                     build_resblock_net, replace_bn_relu)
from .noise import (NoiseSpec, eval_noise_ladder, inject, noise_aware_train,
                    noisy_eval, robustness_tune)
from .quantizer import (QuantConfig, code64, dequantize_codes,
                        learned_quantize, quantize_array, round_half_away,
                        to_integer_codes)
from .tensor import Tape, Tensor, backward
from .training import (Adam, NesterovSGD, StageSpec, TrainResult,
                       distillation_loss, run_gradual_quantization,
                       train_stage, validate_schedule)

__version__ = "0.1.0"

__all__ = [
    "ActQuantNode", "Adam", "AddNode", "BatchNormNode", "CompileError",
    "ConfigError", "Conv1dNode", "Conv2dNode", "DataError", "DenseNode",
    "DimensionError", "DivergenceError", "EquivalenceError",
    "IntegerLayerPlan", "IntegerModel", "InputNode", "NesterovSGD",
    "NetworkSpec", "NoiseSpec", "OpCounter", "PoolNode", "QuantConfig",
    "QuantnetError", "ReluNode", "StageSpec", "StructureError", "Tape",
    "Tensor", "TrainResult", "UsageError", "absorb_bn_scale",
    "accumulator_bits", "backward", "bn_fold", "build_kws_net",
    "build_resblock_net", "code64", "compile_layer", "compile_model",
    "dequantize_codes", "distillation_loss", "eval_noise_ladder", "inject",
    "learned_quantize", "noise_aware_train", "noisy_eval", "quantize_array",
    "replace_bn_relu", "robustness_tune", "round_half_away",
    "run_gradual_quantization", "scan_plan", "to_integer_codes",
    "train_stage", "validate_schedule", "verify_equivalence",
]
