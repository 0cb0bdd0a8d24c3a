"""Configuration for kiln."""

from config.settings import (
    TOOL_NAME,
    __version__,
    CONTAINER_MAGIC,
    CONTAINER_FORMAT_VERSION,
    SNAPSHOT_MAGIC,
    SNAPSHOT_FORMAT_VERSION,
    PROTOCOL_MAGIC,
    PROTOCOL_VERSION,
    BLOB_ALIGNMENT,
    STEP_RULE_DEFAULTS,
    Settings,
    get_settings,
)

__all__ = [
    "TOOL_NAME",
    "__version__",
    "CONTAINER_MAGIC",
    "CONTAINER_FORMAT_VERSION",
    "SNAPSHOT_MAGIC",
    "SNAPSHOT_FORMAT_VERSION",
    "PROTOCOL_MAGIC",
    "PROTOCOL_VERSION",
    "BLOB_ALIGNMENT",
    "STEP_RULE_DEFAULTS",
    "Settings",
    "get_settings",
]
