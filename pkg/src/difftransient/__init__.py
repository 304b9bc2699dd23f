"""Differentiable transient rendering with interior and boundary gradient estimators."""
from .estimators import (TransientHistogram, estimate_boundary, estimate_gradient, estimate_interior,
                         render_forward, sample_boundary_segment)
from .geometry import BindingKind, EdgeKind, Mesh, ParameterBinding, classify_edges, is_silhouette
from .histogram import read_histogram, write_histogram
from .optimize import OptimizeConfig, OptimizeTrace, loss_and_gradient, run_adam
from .scene import Camera, EstimatorDefaults, MeshInstance, Parameter, Scene, SceneDescription
from .scenefile import load_scene, parse_scene, save_scene, serialize_scene
from .temporal import FrameSpec, TemporalProfile, correlate
from .transport import Bsdf
from .validation import FdConfig, compare, fd_gradient

__all__ = [
    "BindingKind", "Bsdf", "Camera", "EdgeKind", "EstimatorDefaults", "FdConfig", "FrameSpec", "Mesh",
    "MeshInstance", "OptimizeConfig", "OptimizeTrace", "Parameter", "ParameterBinding", "Scene",
    "SceneDescription", "TemporalProfile", "TransientHistogram", "classify_edges", "compare", "correlate",
    "estimate_boundary", "estimate_gradient", "estimate_interior", "fd_gradient", "is_silhouette",
    "load_scene", "loss_and_gradient", "parse_scene", "read_histogram", "render_forward", "run_adam",
    "sample_boundary_segment", "save_scene", "serialize_scene", "write_histogram",
]

__version__ = "0.1.0"
