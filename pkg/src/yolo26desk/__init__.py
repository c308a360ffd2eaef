"""Desk-scale NMS-free detector stack on numpy.

Modules: ``archspec`` (architecture files and scaling), ``shapetrace`` (static
shapes and parameter counts), ``tensor`` (reverse-mode autodiff), ``blocks``
(network modules and checkpoints), ``assign`` (task-aligned assignment),
``loss``, ``optim`` (MuSGD), ``decode`` (Top-K and an NMS baseline),
``harness`` (synthetic data, training, AP, benchmarks) and ``cli``.
"""

from .archspec import ArchSpec, ArchSpecError, BlockDef, ScaleProfile, apply_scale, load_reference, parse_spec
from .blocks import DetectOutputs, Model
from .decode import DecodeConfig, Detection, nms_oracle, topk_select
from .optim import MuSGD, MuSGDConfig
from .shapetrace import TensorShape, trace
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "ArchSpecError",
    "BlockDef",
    "DecodeConfig",
    "Detection",
    "DetectOutputs",
    "Model",
    "MuSGD",
    "MuSGDConfig",
    "ScaleProfile",
    "Tensor",
    "TensorShape",
    "apply_scale",
    "backward",
    "load_reference",
    "nms_oracle",
    "parse_spec",
    "topk_select",
    "trace",
]
