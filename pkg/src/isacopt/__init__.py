"""Cost-efficient BS activation and beamforming for cell-free ISAC under radiation limits."""
__version__ = "0.1.0"
