"""Semi-signed neural SDF fitting for unoriented point clouds."""

__version__ = "0.1.0"
