"""changewatch: deep-temporal urban change monitoring"""

__version__ = "0.1.0"
__pubdate__ = "2024-11-04T16:12:40Z"

BUNDLE_VERSION = 1
"""Version of the observation bundle / raster format."""

CHECKPOINT_VERSION = 1
"""Version of the model checkpoint format."""
