"""kmslab: a laboratory for key-manager storage designs.

The package pairs four interchangeable key-storage backends with a
two-party key-manager synchronization protocol, a deterministic
discrete-event simulator, experiment presets with CSV reporting, and an
HTTP key-delivery service in the style of ETSI GS QKD 014.
"""

from kmslab.keystore import Design, StoredKey, SupplyKey

__version__ = "0.1.0"

__all__ = ["Design", "StoredKey", "SupplyKey", "__version__"]
