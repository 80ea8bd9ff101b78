"""voxgeo: volumetric geometry and uncertainty toolkit for cascaded
dental CBCT segmentation pipelines."""

__version__ = "0.1.0"

from .volcore import (LabelVolume, PatchSpec, ProbVolume, ScalarVolume,
                      read_volume, write_volume)
from .uncertainty import (AmbiguityField, Conv3dParams, FeatureMap, GatingMask,
                          RefinerParams, ambiguity_field, foreground_prob,
                          gated_fusion, gating_mask)
from .geometry import (SignedDistanceVolume, signed_distance_map,
                       sdm_bruteforce_oracle)

__all__ = [
    "__version__",
    "ScalarVolume", "LabelVolume", "ProbVolume", "PatchSpec",
    "read_volume", "write_volume",
    "AmbiguityField", "GatingMask", "FeatureMap", "Conv3dParams",
    "RefinerParams", "foreground_prob", "ambiguity_field", "gating_mask",
    "gated_fusion",
    "SignedDistanceVolume", "signed_distance_map", "sdm_bruteforce_oracle",
]
