"""Controllable 3D-aware portrait generation.

Two stages live here: a NeRF-based GAN whose per-layer modulations come from
learnable orthonormal subspaces (explicit camera control plus unsupervised
semantic controls), and a distillation stage that teaches a frozen 2D style
generator explicit pose control through a canonical latent mapper and
learnable pose sub-directions.
"""

from .camera import CameraView, RayBatch, camera_from_view, generate_rays
from .compositing import CompositeResult, composite
from .errors import (AdapterError, CheckpointError, ConfigError, Ctrl3DError,
                     DataError, NumericError)
from .generator import (ControlCode, GeneratorConfig, RadianceGenerator,
                        edit_control, sample_control)
from .sampling import SampleSet, hierarchical_sample, stratified_sample

__all__ = [
    "AdapterError",
    "CameraView",
    "CheckpointError",
    "CompositeResult",
    "ConfigError",
    "ControlCode",
    "Ctrl3DError",
    "DataError",
    "GeneratorConfig",
    "NumericError",
    "RadianceGenerator",
    "RayBatch",
    "SampleSet",
    "camera_from_view",
    "composite",
    "edit_control",
    "generate_rays",
    "hierarchical_sample",
    "sample_control",
    "stratified_sample",
]

__version__ = "0.1.0"
