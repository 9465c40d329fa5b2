"""Dynamic free-viewpoint rendering from multi-view video: explicit per-frame
density grids, learned multi-view radiance blending, sequential training with
ray-based experience replay, and block-SVD density compression."""

__version__ = "0.1.0"
