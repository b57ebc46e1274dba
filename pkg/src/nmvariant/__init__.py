"""n-variant, m-replica intrusion tolerance: scheduling, tagging, voting and security simulation."""

from .config import ConfigError, SystemConfig, load_config
from .fleet import FleetState, ReplicaRef, ReplicaState, new_fleet
from .tagging import RequestTag, TagKey, TagVerdict, make_tag, verify_tag

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "SystemConfig", "load_config",
    "FleetState", "ReplicaRef", "ReplicaState", "new_fleet",
    "RequestTag", "TagKey", "TagVerdict", "make_tag", "verify_tag",
]
