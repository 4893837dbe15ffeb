"""Cloud side: shared-model registry, its TCP protocol, and model files."""

from .client import CloudClient, CloudServerError, CloudTransportError, client_download, client_upload
from .registry import FusionPolicy, NoPendingUploads, Registry, RegistryError, SharedModelRecord
from .serialization import FormatError, dumps_model, load_model, loads_model, save_model
from .server import CloudServer, serve

__all__ = [
    "CloudClient", "CloudServer", "CloudServerError", "CloudTransportError", "FormatError", "FusionPolicy",
    "NoPendingUploads", "Registry", "RegistryError", "SharedModelRecord", "client_download", "client_upload",
    "dumps_model", "load_model", "loads_model", "save_model", "serve",
]
