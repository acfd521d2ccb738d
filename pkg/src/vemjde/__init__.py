"""Joint detection-estimation of evoked brain activity by variational EM.

Per parcel, the model couples a shared FIR hemodynamic filter, per-voxel
response levels with a hidden Potts labeling, low-frequency drifts and
white or AR(1) noise; the engine estimates all of them jointly.
"""

from importlib import resources

__version__ = "0.1.0"


def data_path(name: str):
    """Filesystem path of a packaged data file (masks, preset configs)."""
    return resources.files("vemjde").joinpath("data", name)
