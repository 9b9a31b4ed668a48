"""Perception-aware adversarial protection of images against
diffusion-model style imitation."""

from .constraints import (
    ConstraintWeights,
    TotalLoss,
    WaveletFilterPair,
    clip_alignment_loss,
    dwt_lowpass,
    masked_lowpass_loss,
    masked_lpips_loss,
    perturbation_penalty,
    total_loss,
    wavelet,
)
from .errors import (
    ImpastoError,
    InvalidConfigError,
    InvalidInputError,
    InvalidOracleError,
    OracleError,
    ProtectionAborted,
    UnsupportedOperationError,
)
from .fusion import FusionState, FusionWeights, fuse_maps, iwr_update
from .image import (
    ImageTensor,
    LuminancePlane,
    read_png,
    to_luminance,
    write_png,
)
from .jnd import (
    JndKind,
    RawJndMap,
    SensitivityMap,
    StrengthMap,
    STRENGTH_LEVELS,
    estimate_all,
    postprocess_map,
)
from .oracle import (
    GuidanceOracle,
    LspSpec,
    RemoteOracle,
    SurrogateOracle,
)
from .protect import (
    DifficultyMap,
    PRESETS,
    ProtectionConfig,
    ProtectionResult,
    dap_difficulty,
    default_grid_target,
    pgd_step,
    project_linf,
    protect_run,
)

__version__ = "0.1.0"

__all__ = [
    "ConstraintWeights",
    "TotalLoss",
    "WaveletFilterPair",
    "clip_alignment_loss",
    "dwt_lowpass",
    "masked_lowpass_loss",
    "masked_lpips_loss",
    "perturbation_penalty",
    "total_loss",
    "wavelet",
    "ImpastoError",
    "InvalidConfigError",
    "InvalidInputError",
    "InvalidOracleError",
    "OracleError",
    "ProtectionAborted",
    "UnsupportedOperationError",
    "FusionState",
    "FusionWeights",
    "fuse_maps",
    "iwr_update",
    "ImageTensor",
    "LuminancePlane",
    "read_png",
    "to_luminance",
    "write_png",
    "JndKind",
    "RawJndMap",
    "SensitivityMap",
    "StrengthMap",
    "STRENGTH_LEVELS",
    "estimate_all",
    "postprocess_map",
    "GuidanceOracle",
    "LspSpec",
    "RemoteOracle",
    "SurrogateOracle",
    "DifficultyMap",
    "PRESETS",
    "ProtectionConfig",
    "ProtectionResult",
    "dap_difficulty",
    "default_grid_target",
    "pgd_step",
    "project_linf",
    "protect_run",
    "__version__",
]
