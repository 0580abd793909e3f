"""Part-aware 3D generation: layout diffusion, per-part full-resolution occupancy,
sparse feature refinement, and box-level editing."""

__version__ = "0.1.0"
