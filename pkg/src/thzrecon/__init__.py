"""Monostatic THz channel scans to 2-D geometry and surface materials."""

__version__ = "0.1.0"

from .channel import SPEED_OF_LIGHT, ArrayConfig, ChannelFrequencyResponse, Mpc, synthesize_cfr  # noqa: E402
from .geometry import (  # noqa: E402
    SlidingWindowSmoother,
    StructureFitter,
    StructureTemplate,
    compute_metrics,
    fit_structure,
    refine_region,
    template_delay,
)
from .materials import MaterialDatabase, MaterialIdentifier, calibrate_to_normal, fresnel_reflection  # noqa: E402
from .padp import Padp, padp_from_cfr  # noqa: E402
from .pipeline import PipelineConfig, benchmark_search_space, run_pipeline  # noqa: E402
from .sage import CcaSageEstimator, sage_column  # noqa: E402
from .scene import Scene, generate_ground_truth, reference_scene  # noqa: E402
from .segmentation import RegionSegmenter, label_components, morphological_close  # noqa: E402

__all__ = [
    "SPEED_OF_LIGHT",
    "ArrayConfig",
    "CcaSageEstimator",
    "ChannelFrequencyResponse",
    "MaterialDatabase",
    "MaterialIdentifier",
    "Mpc",
    "Padp",
    "PipelineConfig",
    "RegionSegmenter",
    "Scene",
    "SlidingWindowSmoother",
    "StructureFitter",
    "StructureTemplate",
    "benchmark_search_space",
    "calibrate_to_normal",
    "compute_metrics",
    "fit_structure",
    "fresnel_reflection",
    "generate_ground_truth",
    "label_components",
    "morphological_close",
    "padp_from_cfr",
    "reference_scene",
    "refine_region",
    "run_pipeline",
    "sage_column",
    "synthesize_cfr",
    "template_delay",
]
