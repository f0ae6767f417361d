"""Geometry kernels: expressions, atlases, gluing, extension, completion and geodesy."""

from app.geometry.atlas import ManifoldWithBoundary, Mesh, MetricField, manifold_from_spec, sample_mesh
from app.geometry.complete import CONFORMAL_TAG
from app.geometry.extend import TILDE_TAG
from app.geometry.glue import GluedManifold, glue_from_spec

__all__ = [
    "CONFORMAL_TAG",
    "TILDE_TAG",
    "GluedManifold",
    "ManifoldWithBoundary",
    "Mesh",
    "MetricField",
    "glue_from_spec",
    "manifold_from_spec",
    "sample_mesh",
]
