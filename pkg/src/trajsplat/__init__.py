"""Graph-partitioned Gaussian splatting for large scenes, at desk scale."""

__version__ = "0.1.0"
