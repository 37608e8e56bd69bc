"""Desk-scale interactive world model with a persistent voxel 3D state.

A ground-truth voxel micro-world produces trajectories; learned world,
camera and pixel models are trained with rectified flow matching and
assembled into an autoregressive world -> camera -> projection -> pixels
loop that supports explicit 3D initialisation and mid-episode edits.
"""

__version__ = "0.1.0"
