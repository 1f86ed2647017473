"""Residual-based forensics for AI-generated music.

A bounded-mask UNet extracts a residual from a magnitude spectrogram, HPSS
splits it into seven mel-domain channels, and a compact CNN scores each
segment. The rest of the package trains those networks on synthetic data and
evaluates detectors: metrics, sanity gates, ROC sweeps, codec sweeps,
effective bandwidth and imputation accounting.
"""

from .errors import ArtifactError
from .pipeline import Detector, FrontendConfig

__version__ = "0.1.0"

__all__ = ["ArtifactError", "Detector", "FrontendConfig", "__version__"]
