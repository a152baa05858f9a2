"""Characteristic flows and monotone Lagrangian parameterisations for
``phi_z + (phi^2 / 2)_t = w`` with continuous ``phi``."""
__version__ = "0.1.0"

from .fields import Domain, GraphPoint, ScalarField, TestFunction, bump_eval, eval_field, sup_norm
from .characteristics import (
    Characteristic, FlowOptions, Selection, MULTIVALUED, dafermos_defect, extremal, h_sequence,
    integrate, lipschitz_along, merged, second_derivative_along,
)
from .lagrangian import (
    ExtendOptions, ExtensionTrace, LagrangianParam, build_full_param, build_minimal_param,
    covered_length_ledger, extend_param, lagrangian_source, mollify_param, param_lip_profile,
    theta_encode,
)
from .verification import (
    CheckRecord, VerificationReport, broad_representative, check_broad, distributional_residual,
    graph_distance, graph_map, holder_vertical_check, intrinsic_lip_constant, linear_characteristic,
)
from .gallery import GalleryInstance, gallery

__all__ = [
    "Domain", "GraphPoint", "ScalarField", "TestFunction", "bump_eval", "eval_field", "sup_norm",
    "Characteristic", "FlowOptions", "Selection", "MULTIVALUED", "dafermos_defect", "extremal",
    "h_sequence", "integrate", "lipschitz_along", "merged", "second_derivative_along",
    "ExtendOptions", "ExtensionTrace", "LagrangianParam", "build_full_param", "build_minimal_param",
    "covered_length_ledger", "extend_param", "lagrangian_source", "mollify_param", "param_lip_profile",
    "theta_encode",
    "CheckRecord", "VerificationReport", "broad_representative", "check_broad", "distributional_residual",
    "graph_distance", "graph_map", "holder_vertical_check", "intrinsic_lip_constant", "linear_characteristic",
    "GalleryInstance", "gallery",
]
