"""Reifenberg-type parameterization of sets close to cones over simplicial complexes."""
from ._backend import BACKEND
from .cone_model import (
    ComplexCone,
    ConeSet,
    SimpleCone,
    alpha,
    angle_range,
    blow_up,
    catalog_reference,
    check_non_flat,
    project_to_branch,
    validate_complex_cone,
)

__all__ = [
    "BACKEND",
    "ComplexCone",
    "ConeSet",
    "SimpleCone",
    "alpha",
    "angle_range",
    "blow_up",
    "catalog_reference",
    "check_non_flat",
    "project_to_branch",
    "validate_complex_cone",
]
