from .bundle import BackendBundle, BackendKind
from .http import BackendError, HttpBackend, HttpConfig
from .scripted import (
    CommandExhausted,
    MultimodalInfo,
    ScriptedBackend,
    ScriptedConfig,
    distinct_positions,
    intensity_band,
)
from .status import StatusView, format_status, parse_status

__all__ = [
    "BackendBundle",
    "BackendError",
    "BackendKind",
    "CommandExhausted",
    "HttpBackend",
    "HttpConfig",
    "MultimodalInfo",
    "ScriptedBackend",
    "ScriptedConfig",
    "StatusView",
    "distinct_positions",
    "format_status",
    "intensity_band",
    "parse_status",
]
