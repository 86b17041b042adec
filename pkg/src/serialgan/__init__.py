"""Serial dual-autoencoder GAN for plant-disease anomaly detection, in numpy."""

from ._accel import HAS_NUMBA, backend

__version__ = "0.1.0"

BACKEND = backend()

__all__ = ["BACKEND", "HAS_NUMBA", "__version__"]
