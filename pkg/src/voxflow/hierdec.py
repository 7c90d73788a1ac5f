"""Coarse-to-fine sparse volume decoding.

The decoder evaluates the field densely at a small base resolution, then
repeatedly selects the voxels that matter (surface crossings plus a
near-surface band), dilates the selection to absorb sampling slop,
subdivides and re-queries only those voxels.  Voxels never queried at a
fine level inherit the value of their nearest queried ancestor, which
cannot invent spurious sign crossings.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import ndimage

from ._kernels import eval_dense_grid, eval_points_grouped
from .field import ToyVecsetLatents

BBOX_MIN = -1.0
BBOX_MAX = 1.0

_DENSE_TILE = 8


def _tile_for(res: int) -> int:
    """Evaluation tile with roughly constant world size across resolutions."""
    return max(4, res // 32)

FVDM1_MAGIC = b"FVDM1"


# ---------------------------------------------------------------------------
# configuration and report


@dataclass
class DecodeConfig:
    """All thresholds and policies of the hierarchical decoder."""

    target_res: int = 256
    base_res: int = 64
    gamma: float = 0.0            # isosurface threshold, normalized units
    eta: float = 0.95             # near-surface band threshold, normalized units
    dilation_radius: int = 1      # 26-neighborhood box dilation
    final_skip_findnear: bool = True
    final_double_expand: bool = True
    # "x4" collapses the last two doublings into one 4x expansion;
    # "staged" keeps two 2x expansions with a dilation in between but no
    # re-selection round
    double_expand_style: str = "x4"
    akvs: Optional["AkvsConfig"] = None  # noqa: F821 - defined in .akvs

    def __post_init__(self):
        if not (0.0 <= self.gamma < self.eta <= 1.0):
            raise ValueError("need 0 <= gamma < eta <= 1")
        if self.base_res > self.target_res:
            raise ValueError("base_res must not exceed target_res")
        if self.double_expand_style not in ("x4", "staged"):
            raise ValueError("double_expand_style must be 'x4' or 'staged'")


@dataclass
class DecodeReport:
    """Query accounting for one decode run."""

    target_res: int
    per_level: list[tuple[int, int]] = dc_field(default_factory=list)  # (res, queries)
    stage_times: dict[str, float] = dc_field(default_factory=dict)
    # populated by the KV-selected pipeline
    m_kv_per_level: list[float] = dc_field(default_factory=list)
    attention_flops_full: int = 0
    attention_flops_selected: int = 0
    selection_stats: list[dict] = dc_field(default_factory=list)
    # True where the target level was actually evaluated (all-True for the
    # dense oracle); feeds masked surface extraction so skipped regions
    # surface as open boundary instead of phantom coarse geometry
    final_mask: Optional[np.ndarray] = None

    @property
    def total_queries(self) -> int:
        return sum(n for _, n in self.per_level)

    @property
    def dense_equivalent(self) -> int:
        return self.target_res ** 3

    @property
    def reduction(self) -> float:
        return 1.0 - self.total_queries / self.dense_equivalent

    def to_dict(self) -> dict:
        return {
            "target_res": self.target_res,
            "per_level": [{"res": r, "queries": n} for r, n in self.per_level],
            "total_queries": self.total_queries,
            "dense_equivalent": self.dense_equivalent,
            "reduction": self.reduction,
            "stage_times": self.stage_times,
            "m_kv_per_level": self.m_kv_per_level,
            "attention_flops_full": self.attention_flops_full,
            "attention_flops_selected": self.attention_flops_selected,
            "selection_stats": self.selection_stats,
        }


# ---------------------------------------------------------------------------
# storage


@dataclass
class SparseVoxelSet:
    """A duplicate-free set of voxel index triples at one resolution."""

    resolution: int
    linear: np.ndarray  # sorted unique linear indices, x + r*(y + r*z)

    @classmethod
    def from_indices(cls, resolution: int, ijk: np.ndarray) -> "SparseVoxelSet":
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        if len(ijk) and (ijk.min() < 0 or ijk.max() >= resolution):
            raise ValueError("voxel indices out of range")
        lin = ijk[:, 0] + resolution * (ijk[:, 1] + resolution * ijk[:, 2])
        return cls(resolution, np.unique(lin))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SparseVoxelSet":
        res = mask.shape[0]
        lin = np.flatnonzero(mask.ravel(order="F"))
        return cls(res, lin)

    def indices(self) -> np.ndarray:
        r = self.resolution
        x = self.linear % r
        y = (self.linear // r) % r
        z = self.linear // (r * r)
        return np.stack([x, y, z], axis=1)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.resolution ** 3, dtype=bool)
        m[self.linear] = True
        return m.reshape((self.resolution,) * 3, order="F")

    def __len__(self) -> int:
        return len(self.linear)


@dataclass
class LevelVolume:
    """Per-resolution tSDF storage.

    The base level stores a dense array; finer levels store sparse
    voxel values and fall back to the parent chain for anything unstored.
    Values are normalized tSDF in [-1, 1].
    """

    resolution: int
    dense_values: Optional[np.ndarray] = None            # (r, r, r) float32
    sparse: Optional[SparseVoxelSet] = None
    sparse_values: Optional[np.ndarray] = None            # aligned with sparse.linear
    parent: Optional["LevelVolume"] = None

    def dense(self) -> np.ndarray:
        """Materialize the full grid, resolving unstored voxels via ancestors."""
        if self.dense_values is not None:
            return self.dense_values
        if self.parent is None:
            raise ValueError("missing base level")
        up = upsample_nearest(self.parent.dense(), self.resolution)
        if self.sparse is not None and len(self.sparse):
            flat = up.ravel(order="F")
            flat[self.sparse.linear] = self.sparse_values
            up = flat.reshape((self.resolution,) * 3, order="F")
        return up

    def lookup(self, i: int, j: int, k: int) -> float:
        """Single-voxel lookup through the ancestor chain."""
        if self.dense_values is not None:
            return float(self.dense_values[i, j, k])
        r = self.resolution
        lin = i + r * (j + r * k)
        if self.sparse is not None:
            pos = np.searchsorted(self.sparse.linear, lin)
            if pos < len(self.sparse.linear) and self.sparse.linear[pos] == lin:
                return float(self.sparse_values[pos])
        pr = self.parent.resolution
        return self.parent.lookup(i * pr // r, j * pr // r, k * pr // r)


def upsample_nearest(values: np.ndarray, to_res: int) -> np.ndarray:
    """Nearest-ancestor upsampling: fine voxel j maps to coarse floor(j*from/to)."""
    from_res = values.shape[0]
    idx = (np.arange(to_res) * from_res) // to_res
    return np.ascontiguousarray(values[np.ix_(idx, idx, idx)])


# ---------------------------------------------------------------------------
# grid primitives


def get_resolutions(target: int, base: int) -> list[int]:
    """Doubling schedule from base to target, clamping the last step."""
    if base < 8:
        raise ValueError("base resolution must be >= 8")
    if base > target:
        raise ValueError("base resolution exceeds target")
    levels = [base]
    while 2 * levels[-1] < target:
        levels.append(2 * levels[-1])
    if levels[-1] != target:
        levels.append(target)
    return levels


def gen_grid_points(res: int, bbox=(BBOX_MIN, BBOX_MAX)) -> np.ndarray:
    """Voxel centers in x-fastest order (index = x + r*(y + r*z))."""
    if res < 1:
        raise ValueError("resolution must be >= 1")
    lo, hi = bbox
    h = (hi - lo) / res
    idx = np.arange(res ** 3, dtype=np.int64)
    x = idx % res
    y = (idx // res) % res
    z = idx // (res * res)
    pts = np.empty((res ** 3, 3), dtype=np.float64)
    pts[:, 0] = lo + (x + 0.5) * h
    pts[:, 1] = lo + (y + 0.5) * h
    pts[:, 2] = lo + (z + 0.5) * h
    return pts


def voxel_centers(res: int, ijk: np.ndarray, bbox=(BBOX_MIN, BBOX_MAX)) -> np.ndarray:
    lo, hi = bbox
    h = (hi - lo) / res
    return lo + (np.asarray(ijk, dtype=np.float64) + 0.5) * h


# ---------------------------------------------------------------------------
# selection operators


def find_intersect(vol: LevelVolume | np.ndarray, gamma: float) -> SparseVoxelSet:
    """Voxels with some 26-neighbor of opposite occupancy (value <= gamma)."""
    values = vol.dense() if isinstance(vol, LevelVolume) else vol
    occ = values <= gamma
    struct3 = np.ones((3, 3, 3), dtype=bool)
    near_in = ndimage.binary_dilation(occ, structure=struct3)
    near_out = ndimage.binary_dilation(~occ, structure=struct3)
    boundary = (occ & near_out) | (~occ & near_in)
    return SparseVoxelSet.from_mask(boundary)


def find_near(vol: LevelVolume | np.ndarray, eta: float) -> SparseVoxelSet:
    """Voxels whose normalized tSDF magnitude is below eta."""
    values = vol.dense() if isinstance(vol, LevelVolume) else vol
    return SparseVoxelSet.from_mask(np.abs(values) < eta)


def dilate(vs: SparseVoxelSet, radius: int) -> SparseVoxelSet:
    """Box dilation by (2*radius+1)^3, clipped to the grid."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or len(vs) == 0:
        return vs
    mask = ndimage.binary_dilation(vs.mask(), structure=np.ones((3, 3, 3), bool),
                                   iterations=radius)
    return SparseVoxelSet.from_mask(mask)


def union(a: SparseVoxelSet, b: SparseVoxelSet) -> SparseVoxelSet:
    if a.resolution != b.resolution:
        raise ValueError("resolution mismatch")
    return SparseVoxelSet(a.resolution, np.union1d(a.linear, b.linear))


def expand(vs: SparseVoxelSet, from_res: int, to_res: int) -> SparseVoxelSet:
    """Children of each coarse voxel at the finer grid.

    Fine voxel j belongs to coarse voxel floor(j*from/to); the children of
    all coarse voxels partition the fine grid exactly once.  Supports the
    regular 2x step and clamped jumps up to 4x.
    """
    if not (from_res < to_res <= 4 * from_res):
        raise ValueError(f"invalid resolution pair {from_res} -> {to_res}")
    ijk = vs.indices()
    axes = []
    for axis in range(3):
        i = ijk[:, axis]
        lo = -(-i * to_res // from_res)            # ceil(i*to/from)
        hi = -(-(i + 1) * to_res // from_res)      # ceil((i+1)*to/from)
        axes.append((lo, hi))
    max_span = max(int((hi - lo).max()) if len(ijk) else 0 for lo, hi in axes)
    children = []
    for a in range(max_span):
        for b in range(max_span):
            for c in range(max_span):
                x = axes[0][0] + a
                y = axes[1][0] + b
                z = axes[2][0] + c
                ok = (x < axes[0][1]) & (y < axes[1][1]) & (z < axes[2][1])
                if ok.any():
                    children.append(np.stack([x[ok], y[ok], z[ok]], axis=1))
    if not children:
        return SparseVoxelSet(to_res, np.empty(0, dtype=np.int64))
    return SparseVoxelSet.from_indices(to_res, np.concatenate(children))


def assemble(levels: list[LevelVolume]) -> np.ndarray:
    """Dense array at the finest level with nearest-ancestor fill."""
    if not levels or levels[0].dense_values is None:
        raise ValueError("missing base level")
    return levels[-1].dense()


# ---------------------------------------------------------------------------
# decoding pipelines


def dense_decode(latents: ToyVecsetLatents, res: int) -> tuple[np.ndarray, DecodeReport]:
    """Evaluate the field at every voxel center of a res^3 grid."""
    report = DecodeReport(target_res=res)
    t0 = time.perf_counter()
    out = np.empty((res, res, res), dtype=np.float32)
    h = (BBOX_MAX - BBOX_MIN) / res
    eval_dense_grid(res, BBOX_MIN, h, latents.anchors, latents.normals,
                    latents.offsets, latents.tau, latents.trunc, out,
                    _tile_for(res))
    report.per_level.append((res, res ** 3))
    report.stage_times[f"dense_{res}"] = time.perf_counter() - t0
    report.final_mask = np.ones((res,) * 3, dtype=bool)
    return out, report


def _evaluated_mask(level: "LevelVolume") -> np.ndarray:
    res = level.resolution
    if level.dense_values is not None:
        return np.ones((res,) * 3, dtype=bool)
    flat = np.zeros(res ** 3, dtype=bool)
    if level.sparse is not None:
        flat[level.sparse.linear] = True
    return flat.reshape((res,) * 3, order="F")


def effective_schedule(cfg: DecodeConfig) -> list[int]:
    """Resolution schedule after applying the final-expansion policy."""
    levels = get_resolutions(cfg.target_res, cfg.base_res)
    # collapse the last two doublings into one x4 jump, but never at the
    # cost of the only FindNear round: a schedule needs a non-final
    # selection left over for the near-surface augmentation to run at all
    if (cfg.final_double_expand and cfg.double_expand_style == "x4"
            and len(levels) >= 4 and levels[-1] == 2 * levels[-2]):
        levels = levels[:-2] + [levels[-1]]
    return levels


def _select_voxels(values: np.ndarray, cfg: DecodeConfig,
                   skip_findnear: bool) -> SparseVoxelSet:
    sel = find_intersect(values, cfg.gamma)
    if not skip_findnear:
        sel = union(sel, find_near(values, cfg.eta))
    return dilate(sel, cfg.dilation_radius)


def _query_sparse(latents: ToyVecsetLatents, res: int, ijk: np.ndarray) -> np.ndarray:
    """Evaluate voxel centers grouped by spatial tile for candidate reuse."""
    pts = voxel_centers(res, ijk)
    tile = _tile_for(res)
    tile_id = (ijk[:, 0] // tile
               + (res // tile + 1) * (ijk[:, 1] // tile
                  + (res // tile + 1) * (ijk[:, 2] // tile)))
    uniq, gid = np.unique(tile_id, return_inverse=True)
    order = np.argsort(gid, kind="stable")
    counts = np.bincount(gid, minlength=len(uniq))
    group_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    token_ids = np.arange(latents.num_tokens, dtype=np.int64)
    token_ptr = np.zeros((len(uniq), 2), dtype=np.int64)
    token_ptr[:, 1] = latents.num_tokens
    out = np.empty(len(pts), dtype=np.float64)
    eval_points_grouped(np.ascontiguousarray(pts[order]), group_ptr, token_ids,
                        token_ptr, latents.anchors, latents.normals,
                        latents.offsets, latents.tau, latents.trunc, out)
    result = np.empty_like(out)
    result[order] = out
    return result.astype(np.float32)


def hierarchical_decode(latents: ToyVecsetLatents,
                        cfg: DecodeConfig) -> tuple[np.ndarray, DecodeReport]:
    """Run the coarse-to-fine pipeline; returns the assembled volume and report."""
    levels = effective_schedule(cfg)
    report = DecodeReport(target_res=cfg.target_res)

    t0 = time.perf_counter()
    base_vals = np.empty((levels[0],) * 3, dtype=np.float32)
    h = (BBOX_MAX - BBOX_MIN) / levels[0]
    eval_dense_grid(levels[0], BBOX_MIN, h, latents.anchors, latents.normals,
                    latents.offsets, latents.tau, latents.trunc, base_vals,
                    _tile_for(levels[0]))
    report.per_level.append((levels[0], levels[0] ** 3))
    report.stage_times[f"level_{levels[0]}"] = time.perf_counter() - t0

    vols = [LevelVolume(levels[0], dense_values=base_vals)]
    staged = (cfg.final_double_expand and cfg.double_expand_style == "staged")
    for li in range(1, len(levels)):
        t0 = time.perf_counter()
        res_from, res_to = levels[li - 1], levels[li]
        is_final = li == len(levels) - 1
        skip_fn = is_final and cfg.final_skip_findnear
        sel = _select_voxels(vols[-1].dense(), cfg, skip_fn)
        if staged and is_final and res_to == 4 * res_from:
            mid = expand(sel, res_from, 2 * res_from)
            mid = dilate(mid, cfg.dilation_radius)
            children = expand(mid, 2 * res_from, res_to)
        else:
            children = expand(sel, res_from, res_to)
        values = _query_sparse(latents, res_to, children.indices())
        vols.append(LevelVolume(res_to, sparse=children, sparse_values=values,
                                parent=vols[-1]))
        report.per_level.append((res_to, len(children)))
        report.stage_times[f"level_{res_to}"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    volume = assemble(vols)
    report.stage_times["assemble"] = time.perf_counter() - t0
    report.final_mask = _evaluated_mask(vols[-1])
    return volume, report


# ---------------------------------------------------------------------------
# FVDM1 volume dump


def write_volume(volume: np.ndarray, bbox_min=(-1.0,) * 3, bbox_max=(1.0,) * 3,
                 *, path=None, sink=None) -> bytes | None:
    """Write the FVDM1 dump: magic, u32 resolutions, f32 bbox, f32 values.

    All fields little-endian; values in x-fastest order.
    """
    vol = np.asarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise ValueError("volume must be 3D")
    header = FVDM1_MAGIC + struct.pack("<3I", *vol.shape)
    header += struct.pack("<6f", *bbox_min, *bbox_max)
    payload = header + vol.ravel(order="F").tobytes()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(payload)
        return None
    if sink is not None:
        sink.write(payload)
        return None
    return payload


def read_volume(source) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read an FVDM1 dump; returns (volume, bbox_min, bbox_max)."""
    if isinstance(source, (str, bytes)) and not isinstance(source, bytes):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    if data[:5] != FVDM1_MAGIC:
        raise ValueError("not an FVDM1 volume dump")
    nx, ny, nz = struct.unpack_from("<3I", data, 5)
    bbox = struct.unpack_from("<6f", data, 17)
    values = np.frombuffer(data, dtype="<f4", offset=41, count=nx * ny * nz)
    vol = values.reshape((nx, ny, nz), order="F")
    return vol.copy(), np.array(bbox[:3]), np.array(bbox[3:])
