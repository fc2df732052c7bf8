"""Multi-task over-the-air federated learning with sub-connected analog beamforming."""

from .system import ConfigError, RandomStream, SystemConfig, sample_channels, sample_noise

__version__ = "0.1.0"

__all__ = ["ConfigError", "RandomStream", "SystemConfig", "sample_channels", "sample_noise", "__version__"]
