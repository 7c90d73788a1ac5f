"""voxflow: sparse hierarchical SDF volume decoding and toy flow distillation."""

__version__ = "0.1.0"

from .field import (
    ShapeSpec,
    ToyVecsetLatents,
    HeadConfig,
    analytic_sdf,
    attention_weights,
    build_surface_latents,
    eval_field,
    flops_per_query,
    parse_shape,
)
from .hierdec import DecodeConfig, dense_decode, hierarchical_decode
from .akvs import AkvsConfig, hierarchical_decode_akvs
from .surface import Mesh, marching_cubes, boundary_edge_count, write_obj, read_obj
from .metrics import volume_iou, surface_iou

__all__ = [
    "ShapeSpec",
    "ToyVecsetLatents",
    "HeadConfig",
    "analytic_sdf",
    "attention_weights",
    "build_surface_latents",
    "eval_field",
    "flops_per_query",
    "parse_shape",
    "DecodeConfig",
    "dense_decode",
    "hierarchical_decode",
    "AkvsConfig",
    "hierarchical_decode_akvs",
    "Mesh",
    "marching_cubes",
    "boundary_edge_count",
    "write_obj",
    "read_obj",
    "volume_iou",
    "surface_iou",
]
