"""Language-guided scene-level diffusion for multi-agent traffic."""

__version__ = "0.1.0"
