"""graphseg - segment graph signals into connected zones of constant value."""

__version__ = "0.1.0"
__description__ = "Graph-fused adaptive ridge segmentation with warm-started penalty paths"
