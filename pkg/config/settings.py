"""
Global configuration settings for the fedgate storage federation
"""

import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

# Load environment variables (secrets referenced as "env:NAME" in config files)
load_dotenv()

CONFIG_ENV_VAR = 'FEDGATE_CONFIG'

# Default configuration values
DEFAULT_CONFIG = {
    # Server settings
    'LISTEN_ADDRESS': '127.0.0.1:8080',
    'INSECURE_HEADER_AUTH': False,
    'TRUST_FORWARDED_FOR': False,

    # Resolution settings
    'FANOUT_TIMEOUT': 3.0,
    'FANOUT_WORKERS': 64,
    'PRESIGN_EXPIRY': 3600.0,

    # Health polling
    'HEALTH_POLL_INTERVAL': 30.0,
    'PROBE_TIMEOUT': 2.0,
    'FAILURE_THRESHOLD': 2,

    # Cache settings
    'CACHE_TTL_POSITIVE': 300.0,
    'CACHE_TTL_NEGATIVE': 30.0,
    'L1_MAX_ENTRIES': 10000,
    'L2': 'memory',

    # Authorization settings
    'REQUIRED_ATTRIBUTE_PREFIX': '/atlas',
    'SCRATCH_PREFIX': '/scratch',
}


def get_config() -> Dict[str, Any]:
    """Get a copy of the default configuration values"""
    return DEFAULT_CONFIG.copy()


def resolve_config_path(explicit: Optional[str] = None) -> Optional[str]:
    """Pick the config file: explicit --config first, FEDGATE_CONFIG second"""
    if explicit:
        return explicit
    return os.environ.get(CONFIG_ENV_VAR) or None


def print_config_status():
    """Print the built-in defaults and where the config file comes from"""

    print("Default Configuration:")
    print("=" * 50)

    for key, value in get_config().items():
        print(f"{key}: {value}")

    print("\nConfig File:")
    print("=" * 50)

    path = resolve_config_path()
    if path:
        print(f"✅ {CONFIG_ENV_VAR}: {path}")
    else:
        print(f"❌ {CONFIG_ENV_VAR}: Not set")
        print("   └─ pass --config <path> to fedgate commands")


if __name__ == "__main__":
    print_config_status()
