"""Graph-cut segmentation with gradient vector flow shape priors.

A pre-segmentation is turned into a GVF field whose discretized paths lead
every voxel to the object core.  Requiring the foreground to be closed along
those paths is encoded as infinite arcs in a minimum s-excess graph, solved
exactly by a single minimum s-t cut, for one object or several objects tied
together by inclusion, exclusion and maximum-distance constraints.
"""

from .gvf import (CORE, DiscreteFlow, GvfParams, VectorField, binary_gradient, build_flow, compute_gvf,
                  discretize, extract_core, trace_path)
from .maxflow import INF, CutResult, SExcessGraph, max_flow, solve_s_excess
from .metrics import assd, dsc
from .mrf import (PairwiseEdges, PairwiseTerm, SegmentParams, ShapePrior, UnaryTerm, boundary_weight,
                  build_graph, energy, log_likelihood_unary, segment, sigmoid_transform)
from .multiobject import (InteractionConstraint, ObjectSpec, build_joint_graph, decode, segment_joint,
                          verify_constraints)
from .volume import (GridShape, LabelVolume, Neighborhood, ScalarVolume, distance_transform, index,
                     read_volume, write_volume)

__version__ = "0.1.0"

__all__ = [
    "CORE",
    "DiscreteFlow",
    "GvfParams",
    "VectorField",
    "binary_gradient",
    "build_flow",
    "compute_gvf",
    "discretize",
    "extract_core",
    "trace_path",
    "INF",
    "CutResult",
    "SExcessGraph",
    "max_flow",
    "solve_s_excess",
    "assd",
    "dsc",
    "PairwiseEdges",
    "PairwiseTerm",
    "SegmentParams",
    "ShapePrior",
    "UnaryTerm",
    "boundary_weight",
    "build_graph",
    "energy",
    "log_likelihood_unary",
    "segment",
    "sigmoid_transform",
    "InteractionConstraint",
    "ObjectSpec",
    "build_joint_graph",
    "decode",
    "segment_joint",
    "verify_constraints",
    "GridShape",
    "LabelVolume",
    "Neighborhood",
    "ScalarVolume",
    "distance_transform",
    "index",
    "read_volume",
    "write_volume",
]
