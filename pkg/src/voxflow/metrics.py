"""IoU metrics, run reports, and the benchmark harness."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from ._validation import check_same_shape, check_volume
from .field import ShapeSpec, ToyVecsetLatents, build_surface_latents, format_shape
from .hierdec import DecodeConfig, DecodeReport, dense_decode, hierarchical_decode
from .surface import sign_volume

REPORT_SCHEMA_VERSION = 1


def volume_iou(a, b) -> float:
    """Intersection over union of two occupancy grids (1.0 if both empty)."""
    a = np.asarray(check_volume(a), dtype=bool)
    b = np.asarray(check_volume(b), dtype=bool)
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def surface_iou(sdf_a, sdf_b, band_voxels: int = 2, gamma: float = 0.0,
                trunc: float = 0.125) -> float:
    """Occupancy IoU restricted to the near-surface band of either volume.

    The band is ``band_voxels`` voxel widths expressed in the volumes'
    normalized tSDF units: a field truncated at ``trunc`` world units maps
    one voxel of world distance (2/res) to (2/res)/trunc normalized units.
    """
    a = np.asarray(check_volume(sdf_a), dtype=np.float64)
    b = np.asarray(check_volume(sdf_b), dtype=np.float64)
    check_same_shape(a, b)
    if band_voxels < 1:
        raise ValueError("band_voxels must be >= 1")
    res = a.shape[0]
    h_norm = (2.0 / res) / trunc
    band = np.minimum(np.abs(a), np.abs(b)) <= band_voxels * h_norm
    if not band.any():
        return 1.0
    occ_a = a[band] <= gamma
    occ_b = b[band] <= gamma
    union = np.count_nonzero(occ_a | occ_b)
    if union == 0:
        return 1.0
    return np.count_nonzero(occ_a & occ_b) / union


@dataclass
class RunReport:
    """One benchmark record: config echo, timings, accuracy, accounting."""

    shape: str
    mode: str
    seed: int
    target_res: int
    wall_time: float                       # median decode seconds
    decode: DecodeReport
    v_iou: Optional[float] = None
    s_iou: Optional[float] = None
    config: dict = dc_field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decode"] = self.decode.to_dict()
        d["reduction"] = self.decode.reduction
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


DEFAULT_SUITE = ("sphere:r=0.5", "torus:R=0.5,r=0.15", "box:h=0.4",
                 "union2:r=0.35,h=0.25")
DEFAULT_MODES = ("dense", "hier", "hier+akvs")


def _decode_once(latents: ToyVecsetLatents, mode: str, cfg: DecodeConfig,
                 seed: int):
    if mode == "dense":
        return dense_decode(latents, cfg.target_res)
    if mode == "hier":
        return hierarchical_decode(latents, cfg)
    if mode == "hier+akvs":
        from .akvs import AkvsConfig, hierarchical_decode_akvs
        if cfg.akvs is None:
            cfg = dataclasses.replace(cfg, akvs=AkvsConfig())
        return hierarchical_decode_akvs(latents, cfg, seed=seed)
    raise ValueError(f"unknown mode '{mode}'")


def bench_run(shapes=DEFAULT_SUITE, modes=DEFAULT_MODES, seeds=(0,),
              cfg: Optional[DecodeConfig] = None, M: int = 1024,
              repeats: int = 3, sink=None,
              reference_mode: str = "dense") -> list[RunReport]:
    """Run the decode suite; emit one JSON line per (shape, mode, seed).

    Wall time is the median over ``repeats`` runs and covers the decode
    only (no latent construction, meshing, or I/O).  Accuracy columns
    compare each mode's volume against the ``reference_mode`` volume from
    the same shape and seed.
    """
    from .field import parse_shape

    cfg = cfg or DecodeConfig()
    reports = []
    try:
        for shape_str in shapes:
            shape = shape_str if isinstance(shape_str, ShapeSpec) else parse_shape(shape_str)
            name = format_shape(shape)
            for seed in seeds:
                latents = build_surface_latents(shape, M, seed)
                volumes = {}
                for mode in modes:
                    times = []
                    vol = rep = None
                    for _ in range(max(1, repeats)):
                        t0 = time.perf_counter()
                        vol, rep = _decode_once(latents, mode, cfg, seed)
                        times.append(time.perf_counter() - t0)
                    volumes[mode] = vol
                    report = RunReport(
                        shape=name, mode=mode, seed=seed,
                        target_res=cfg.target_res,
                        wall_time=float(np.median(times)), decode=rep,
                        config={"M": M, "base_res": cfg.base_res,
                                "eta": cfg.eta, "gamma": cfg.gamma,
                                "dilation_radius": cfg.dilation_radius})
                    ref = volumes.get(reference_mode)
                    if ref is not None:
                        report.v_iou = volume_iou(sign_volume(ref, cfg.gamma),
                                                  sign_volume(vol, cfg.gamma))
                        report.s_iou = surface_iou(ref, vol)
                    reports.append(report)
                    if sink is not None:
                        sink.write(report.to_json() + "\n")
                        sink.flush()
    except Exception:
        if sink is not None:
            sink.flush()
        raise
    return reports


def reports_to_csv(reports: list[RunReport], sink) -> None:
    """Flatten reports into a CSV summary."""
    writer = csv.writer(sink)
    writer.writerow(["shape", "mode", "seed", "target_res", "wall_time",
                     "total_queries", "reduction", "v_iou", "s_iou"])
    for r in reports:
        writer.writerow([r.shape, r.mode, r.seed, r.target_res,
                         f"{r.wall_time:.6f}", r.decode.total_queries,
                         f"{r.decode.reduction:.6f}",
                         "" if r.v_iou is None else f"{r.v_iou:.6f}",
                         "" if r.s_iou is None else f"{r.s_iou:.6f}"])
