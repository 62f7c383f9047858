"""Multi-agent traffic signal control with multi-task latent features."""

__version__ = "0.1.0"
