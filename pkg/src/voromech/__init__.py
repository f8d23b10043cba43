"""Coupled rigid-particle mechanics and mass transport on Voronoi duals."""

from .mesh import (
    CircleHole,
    DensityField,
    DualMesh,
    Geometry,
    MeshError,
    PointSet,
    build_dual_mesh,
    generate_points,
)

__all__ = [
    "CircleHole",
    "DensityField",
    "DualMesh",
    "Geometry",
    "MeshError",
    "PointSet",
    "build_dual_mesh",
    "generate_points",
]

__version__ = "0.1.0"
