from .models import ModelSuite, WORKING_SIZE, prompt_embedding
from .service import ENDPOINT_ENV, GuidanceService, WorkerServer, resolve_endpoint

__version__ = "0.1.0"

__all__ = [
    "ModelSuite",
    "WORKING_SIZE",
    "prompt_embedding",
    "ENDPOINT_ENV",
    "GuidanceService",
    "WorkerServer",
    "resolve_endpoint",
    "__version__",
]
