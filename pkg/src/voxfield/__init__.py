"""Sparse voxel radiance fields in numpy: voxel grids with learnable corner embeddings,
a shared MLP, differentiable ray marching, progressive training, editing and composition."""

__version__ = "0.1.0"
