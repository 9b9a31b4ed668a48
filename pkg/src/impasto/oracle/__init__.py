from .base import (
    ALIGNMENT_PROMPT,
    Capability,
    GuidanceOracle,
    LspResult,
    LspSpec,
    MaskedLoss,
)
from .diagnostics import SpotCheckReport, spotcheck_lsp_gradient
from .remote import ENDPOINT_ENV, RemoteOracle, resolve_endpoint
from .surrogate import SurrogateExtractor, SurrogateOracle

__all__ = [
    "ALIGNMENT_PROMPT",
    "Capability",
    "GuidanceOracle",
    "LspResult",
    "LspSpec",
    "MaskedLoss",
    "SpotCheckReport",
    "spotcheck_lsp_gradient",
    "ENDPOINT_ENV",
    "RemoteOracle",
    "resolve_endpoint",
    "SurrogateExtractor",
    "SurrogateOracle",
]
