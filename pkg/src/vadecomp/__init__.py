"""Decomposition of overlapping-sparse 3D vertex-activity images.

Simulates charged particles leaving scintillation light in a voxelized
detector, then recovers per-particle kinematics from the summed image with a
peeling seeder followed by gradient-descent refinement of a differentiable
forward model.
"""

from .kernels import BACKEND
from .physics import ParticleKinematics, ParticleType, PhysicsConstants

__version__ = "0.1.0"

__all__ = ["BACKEND", "ParticleKinematics", "ParticleType", "PhysicsConstants"]
