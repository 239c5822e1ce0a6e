"""mixsep: joint speaker diarization and source separation of meetings.

An integrated von-Mises-Fisher / complex Angular Central Gaussian mixture
model fitted with EM, per-segment speaker counting by component fusion, and
cross-segment speaker alignment by prototype clustering.
"""

from .cacg import PosteriorTensor, SpatialComponent, StftTensor, cacgmm_em
from .errors import ConfigurationError, InvalidInputError, MixsepError, NumericalError
from .frontend import AudioBuffer, SegmentSpec, VadMask
from .integrated import (
    FusionEvent,
    JointEmConfig,
    JointModel,
    count_speakers,
    joint_em,
)
from .numerics import HermitianPD
from .pipeline import Diarization, SegmentResult, run_meeting
from .synth import ScenarioConfig, SegmentPlan, build_meeting, sample_cacg, sample_vmf
from .vmf import EmbeddingSequence, SpectralComponent, VmfMixture, vmfmm_em

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "ConfigurationError",
    "Diarization",
    "EmbeddingSequence",
    "FusionEvent",
    "HermitianPD",
    "InvalidInputError",
    "JointEmConfig",
    "JointModel",
    "MixsepError",
    "NumericalError",
    "PosteriorTensor",
    "ScenarioConfig",
    "SegmentPlan",
    "SegmentResult",
    "SegmentSpec",
    "SpatialComponent",
    "SpectralComponent",
    "StftTensor",
    "VadMask",
    "VmfMixture",
    "build_meeting",
    "cacgmm_em",
    "count_speakers",
    "joint_em",
    "run_meeting",
    "sample_cacg",
    "sample_vmf",
    "vmfmm_em",
]
