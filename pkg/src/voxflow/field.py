"""Analytic SDF oracles and the synthetic cross-attention vecset field.

The field is a softmax cross-attention over a set of surface-anchored
tokens: each token carries an anchor point, a unit normal and a plane
offset, and a query point attends to tokens with the kernel score
``-||q - p_i||^2 / tau``.  The attended value is the signed
tangent-plane distance ``n_i . q + d_i``, truncated to ``+-trunc`` and
normalized to [-1, 1].  Small ``tau`` makes the attention local, which
is what the sparse decoding algorithms exploit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field as dc_field

import numpy as np

from ._kernels import eval_points_grouped
from ._validation import check_points

# Shapes must stay inside the unit cube with this margin.
CUBE_MARGIN = 0.05

# Lateral half-extent of the thin_plate slab (the thickness is the knob).
PLATE_HALF_EXTENT = 0.6
_FPS_NORMAL_WEIGHT = 0.05  # normal term in the anchor-spreading metric

# Width of the frequency positional encoding assumed by the FLOPs model:
# 8 frequencies x sin/cos x 3 coordinates.
POSITIONAL_ENCODING_WIDTH = 48

SHAPE_KINDS = ("sphere", "box", "torus", "thin_plate", "union2")


class SurfaceSamplingError(RuntimeError):
    """Raised when projection sampling cannot place anchors on the surface."""


# ---------------------------------------------------------------------------
# shape specifications


@dataclass(frozen=True)
class ShapeSpec:
    """A parametric solid inside [-1, 1]^3 with an exact signed distance."""

    kind: str
    params: tuple[tuple[str, float], ...] = ()
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    children: tuple["ShapeSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        for name, value in self.params:
            if not value > 0:
                raise ValueError(f"shape parameter {name}={value} must be positive")
        if self.kind == "union2":
            if len(self.children) != 2:
                raise ValueError("union2 requires exactly two member shapes")
        else:
            if self.children:
                raise ValueError("only union2 takes member shapes")
            if max(abs(c) for c in self.center) + self._radius_bound() > 1.0 - CUBE_MARGIN:
                raise ValueError("shape does not fit in the unit cube with margin 0.05")

    def param(self, name: str) -> float:
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    def _radius_bound(self) -> float:
        if self.kind == "sphere":
            return self.param("r")
        if self.kind == "box":
            return self.param("h")
        if self.kind == "torus":
            return self.param("R") + self.param("r")
        if self.kind == "thin_plate":
            return max(PLATE_HALF_EXTENT, self.param("h"))
        raise AssertionError(self.kind)


def sphere(r: float, center=(0.0, 0.0, 0.0)) -> ShapeSpec:
    return ShapeSpec("sphere", (("r", float(r)),), tuple(center))


def box(h: float, center=(0.0, 0.0, 0.0)) -> ShapeSpec:
    """Axis-aligned cube with half-extent ``h``."""
    return ShapeSpec("box", (("h", float(h)),), tuple(center))


def torus(R: float, r: float, center=(0.0, 0.0, 0.0)) -> ShapeSpec:
    """Torus around the z axis: major radius ``R``, tube radius ``r``."""
    return ShapeSpec("torus", (("R", float(R)), ("r", float(r))), tuple(center))


def thin_plate(h: float, center=(0.0, 0.0, 0.0)) -> ShapeSpec:
    """Thin axis-aligned slab: half-thickness ``h`` along z, fixed lateral extent."""
    return ShapeSpec("thin_plate", (("h", float(h)),), tuple(center))


def union2(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec:
    """Min-union of two members.

    The min of two SDFs is the exact distance outside the union but only a
    lower bound in the overlap region; sign is correct everywhere, which is
    all the decoding tests rely on.
    """
    return ShapeSpec("union2", (), (0.0, 0.0, 0.0), (a, b))


_SHAPE_DEFAULTS = {
    "sphere": {"r": 0.5},
    "box": {"h": 0.5},
    "torus": {"R": 0.5, "r": 0.15},
    "plate": {"h": 0.01},
    "thin_plate": {"h": 0.01},
    "union2": {"r": 0.35, "h": 0.25},
}


def parse_shape(text: str) -> ShapeSpec:
    """Parse a CLI shape string, e.g. ``sphere:r=0.5`` or ``torus:R=0.5,r=0.15``.

    ``plate`` is accepted as a short alias of ``thin_plate``.  ``union2``
    builds the canonical overlapping sphere+box pair from ``r`` and ``h``.
    """
    head, _, tail = text.partition(":")
    head = head.strip()
    if head not in _SHAPE_DEFAULTS:
        raise ValueError(f"unknown shape {head!r}")
    params = dict(_SHAPE_DEFAULTS[head])
    if tail.strip():
        for item in tail.split(","):
            m = re.fullmatch(r"\s*(\w+)\s*=\s*([-+0-9.eE]+)\s*", item)
            if not m:
                raise ValueError(f"malformed shape parameter {item!r}")
            key = m.group(1)
            if key not in params:
                raise ValueError(f"unknown parameter {key!r} for shape {head!r}")
            params[key] = float(m.group(2))
    if head in ("plate", "thin_plate"):
        return thin_plate(params["h"])
    if head == "sphere":
        return sphere(params["r"])
    if head == "box":
        return box(params["h"])
    if head == "torus":
        return torus(params["R"], params["r"])
    # canonical union: sphere on the left overlapping a cube on the right
    return union2(sphere(params["r"], (-0.25, 0.0, 0.0)), box(params["h"], (0.3, 0.0, 0.0)))


def format_shape(shape: ShapeSpec) -> str:
    if shape.kind == "union2":
        return "union2:r=%g,h=%g" % (shape.children[0].param("r"), shape.children[1].param("h"))
    return shape.kind + ":" + ",".join("%s=%g" % kv for kv in shape.params)


# ---------------------------------------------------------------------------
# analytic signed distances


def analytic_sdf(shape: ShapeSpec, points) -> np.ndarray:
    """Exact signed distance (negative inside), vectorized over points.

    Accepts a single point (3,) or a batch (n, 3); returns a scalar array
    matching the input batch shape.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    d = _sdf(shape, p)
    return d[0] if single else d


def _sdf(shape: ShapeSpec, p: np.ndarray) -> np.ndarray:
    if shape.kind == "union2":
        return np.minimum(_sdf(shape.children[0], p), _sdf(shape.children[1], p))
    q = p - np.asarray(shape.center)
    if shape.kind == "sphere":
        return np.linalg.norm(q, axis=1) - shape.param("r")
    if shape.kind in ("box", "thin_plate"):
        if shape.kind == "box":
            h = np.full(3, shape.param("h"))
        else:
            h = np.array([PLATE_HALF_EXTENT, PLATE_HALF_EXTENT, shape.param("h")])
        a = np.abs(q) - h
        outside = np.linalg.norm(np.maximum(a, 0.0), axis=1)
        inside = np.minimum(a.max(axis=1), 0.0)
        return outside + inside
    if shape.kind == "torus":
        ring = np.hypot(np.hypot(q[:, 0], q[:, 1]) - shape.param("R"), q[:, 2])
        return ring - shape.param("r")
    raise AssertionError(shape.kind)


def sdf_gradient(shape: ShapeSpec, points) -> np.ndarray:
    """Analytic gradient of the signed distance (unit length a.e.)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = _grad(shape, p)
    return g[0] if np.asarray(points).ndim == 1 else g


def _grad(shape: ShapeSpec, p: np.ndarray) -> np.ndarray:
    if shape.kind == "union2":
        da = _sdf(shape.children[0], p)
        db = _sdf(shape.children[1], p)
        ga = _grad(shape.children[0], p)
        gb = _grad(shape.children[1], p)
        return np.where((da <= db)[:, None], ga, gb)
    q = p - np.asarray(shape.center)
    if shape.kind == "sphere":
        n = np.linalg.norm(q, axis=1, keepdims=True)
        return q / np.where(n == 0, 1.0, n)
    if shape.kind in ("box", "thin_plate"):
        if shape.kind == "box":
            h = np.full(3, shape.param("h"))
        else:
            h = np.array([PLATE_HALF_EXTENT, PLATE_HALF_EXTENT, shape.param("h")])
        a = np.abs(q) - h
        out = np.maximum(a, 0.0) * np.sign(q)
        n = np.linalg.norm(out, axis=1, keepdims=True)
        grad_out = out / np.where(n == 0, 1.0, n)
        # inside: gradient points along the least-deep axis
        axis = np.argmax(a, axis=1)
        grad_in = np.zeros_like(q)
        grad_in[np.arange(len(q)), axis] = np.sign(q[np.arange(len(q)), axis])
        return np.where((n > 0), grad_out, grad_in)
    if shape.kind == "torus":
        rho = np.hypot(q[:, 0], q[:, 1])
        rho_safe = np.where(rho == 0, 1.0, rho)
        ring = np.stack([(rho - shape.param("R")) * q[:, 0] / rho_safe,
                         (rho - shape.param("R")) * q[:, 1] / rho_safe,
                         q[:, 2]], axis=1)
        n = np.linalg.norm(ring, axis=1, keepdims=True)
        return ring / np.where(n == 0, 1.0, n)
    raise AssertionError(shape.kind)


# ---------------------------------------------------------------------------
# vecset latents


@dataclass(frozen=True)
class ToyVecsetLatents:
    """Surface-anchored tokens defining the truncated field.

    ``anchors``/``normals`` are (M, 3); ``offsets`` is (M,) with
    ``offsets[i] = -normals[i] . anchors[i]`` so that
    ``normals[i] . q + offsets[i]`` is the signed distance of ``q`` to the
    token's tangent plane.  All arrays are frozen after construction.
    """

    anchors: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    tau: float
    trunc: float

    def __post_init__(self):
        anchors = np.ascontiguousarray(self.anchors, dtype=np.float64)
        normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        offsets = np.ascontiguousarray(self.offsets, dtype=np.float64)
        if anchors.ndim != 2 or anchors.shape[1] != 3 or anchors.shape[0] < 1:
            raise ValueError("anchors must be (M, 3) with M >= 1")
        if normals.shape != anchors.shape or offsets.shape != (anchors.shape[0],):
            raise ValueError("normals/offsets shapes do not match anchors")
        if not (self.tau > 0 and self.trunc > 0):
            raise ValueError("tau and trunc must be positive")
        norms = np.linalg.norm(normals, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("normals must have unit length")
        for arr, name in ((anchors, "anchors"), (normals, "normals"), (offsets, "offsets")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def num_tokens(self) -> int:
        return self.anchors.shape[0]


def build_surface_latents(shape: ShapeSpec, M: int, seed: int,
                          tau: float = 1e-3, trunc: float = 0.125) -> ToyVecsetLatents:
    """Sample M anchors quasi-uniformly on the zero level set.

    Candidates are drawn uniformly in the cube, projected onto the surface
    by damped gradient steps, and thinned with farthest-point selection so
    the anchors spread evenly.  Deterministic for a fixed seed.
    """
    if M < 4:
        raise ValueError("M must be >= 4")
    rng = np.random.default_rng(seed)
    want = 4 * M
    accepted = np.empty((0, 3))
    for _ in range(50):
        cand = rng.uniform(-1.0, 1.0, size=(want, 3))
        for _ in range(60):
            d = analytic_sdf(shape, cand)
            if np.max(np.abs(d)) <= 1e-12:
                break
            g = sdf_gradient(shape, cand)
            cand = cand - d[:, None] * g
        d = analytic_sdf(shape, cand)
        ok = np.abs(d) <= 1e-10
        accepted = np.concatenate([accepted, cand[ok]])
        if len(accepted) >= 4 * M:
            break
    if len(accepted) < M:
        raise SurfaceSamplingError("surface sampling exhausted")

    nrm = sdf_gradient(shape, accepted)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    # thin features put opposite-facing samples within epsilon of each other;
    # spreading in (position, scaled normal) space keeps both sides and the
    # rim covered instead of collapsing them to one representative
    feats = np.concatenate([accepted, _FPS_NORMAL_WEIGHT * nrm], axis=1)
    keep = _farthest_point_indices(feats, M)
    anchors = accepted[keep]
    normals = nrm[keep]
    offsets = -np.einsum("ij,ij->i", normals, anchors)
    return ToyVecsetLatents(anchors, normals, offsets, float(tau), float(trunc))


def _farthest_point_indices(points: np.ndarray, k: int) -> np.ndarray:
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


# ---------------------------------------------------------------------------
# attention and field evaluation


def attention_weights(q, latents: ToyVecsetLatents, selection=None) -> np.ndarray:
    """Exact softmax weights of one query over (a subset of) the tokens."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (3,):
        raise ValueError("q must be a single 3D point")
    if selection is None:
        anchors = latents.anchors
    else:
        selection = np.asarray(selection, dtype=np.int64)
        if selection.size == 0:
            raise ValueError("selection must be non-empty")
        if selection.min() < 0 or selection.max() >= latents.num_tokens:
            raise ValueError("selection indices out of range")
        anchors = latents.anchors[selection]
    scores = -np.sum((q - anchors) ** 2, axis=1) / latents.tau
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def eval_field(points, latents: ToyVecsetLatents, selection=None,
               group_ids=None) -> np.ndarray:
    """Evaluate the normalized truncated field at a batch of points.

    ``selection`` restricts the attention to token subsets: either a single
    index array applied to all points, or a list of index arrays with
    ``group_ids`` assigning each point to one subset.  Without a selection
    the full token set is used.

    The softmax is evaluated over tokens whose kernel score is within
    ``SCORE_WINDOW`` log-units of the per-query maximum; dropped tokens have
    relative weight below exp(-SCORE_WINDOW) ~ 9e-27, far under double
    rounding, so the result does not depend on how points are batched.
    """
    pts = check_points(points)
    if selection is None:
        token_ids = np.arange(latents.num_tokens, dtype=np.int64)
        groups = [token_ids]
        gid = _spatial_group_ids(pts, latents)
        gid = np.zeros(len(pts), dtype=np.int64) if gid is None else gid
        return _eval_grouped(pts, latents, groups_for_all=token_ids, group_ids=gid)
    sel_list, gid = _canonical_selection(pts, latents, selection, group_ids)
    return _eval_grouped(pts, latents, sel_list=sel_list, group_ids=gid)


def _spatial_group_ids(pts: np.ndarray, latents: ToyVecsetLatents):
    # bucket points into spatial cells so the kernel can share candidate
    # tokens within a cell; any bucketing gives identical values
    cell = max(2.0 * math.sqrt(SCORE_WINDOW * latents.tau), 1e-3)
    ij = np.floor((pts - pts.min(axis=0)) / cell).astype(np.int64)
    dims = ij.max(axis=0) + 1
    return (ij[:, 0] + dims[0] * (ij[:, 1] + dims[1] * ij[:, 2]))


def _canonical_selection(pts, latents, selection, group_ids):
    if isinstance(selection, np.ndarray) and selection.ndim == 1 and group_ids is None:
        sel = np.sort(np.asarray(selection, dtype=np.int64))
        _check_sel(sel, latents)
        return [sel], np.zeros(len(pts), dtype=np.int64)
    if group_ids is None:
        raise ValueError("group_ids required with per-group selections")
    gid = np.asarray(group_ids, dtype=np.int64)
    if gid.shape != (len(pts),):
        raise ValueError("group_ids must assign every point to one group")
    sel_list = [np.sort(np.asarray(s, dtype=np.int64)) for s in selection]
    for s in sel_list:
        _check_sel(s, latents)
    if gid.min() < 0 or gid.max() >= len(sel_list):
        raise ValueError("group id out of range")
    return sel_list, gid


def _check_sel(sel, latents):
    if sel.size == 0:
        raise ValueError("selection must be non-empty")
    if sel.min() < 0 or sel.max() >= latents.num_tokens:
        raise ValueError("selection indices out of range")


def _eval_grouped(pts, latents, sel_list=None, groups_for_all=None, group_ids=None):
    # compact group ids, sort points by group, run the kernel, unsort
    uniq, gid = np.unique(group_ids, return_inverse=True)
    order = np.argsort(gid, kind="stable")
    sorted_pts = np.ascontiguousarray(pts[order])
    counts = np.bincount(gid, minlength=len(uniq))
    group_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    if groups_for_all is not None:
        token_ids = groups_for_all
        token_ptr = np.zeros((len(uniq), 2), dtype=np.int64)
        token_ptr[:, 1] = len(token_ids)
    else:
        kept = [sel_list[g] for g in uniq]
        token_ids = (np.concatenate(kept) if kept else np.empty(0, np.int64))
        lens = np.array([len(s) for s in kept], dtype=np.int64)
        ends = np.cumsum(lens)
        token_ptr = np.stack([ends - lens, ends], axis=1)

    out = np.empty(len(pts), dtype=np.float64)
    eval_points_grouped(sorted_pts, group_ptr, token_ids, token_ptr,
                        latents.anchors, latents.normals, latents.offsets,
                        latents.tau, latents.trunc, out)
    result = np.empty_like(out)
    result[order] = out
    return result


# re-exported so callers can reason about the evaluation window
from ._kernels import SCORE_WINDOW  # noqa: E402


# ---------------------------------------------------------------------------
# attention statistics


@dataclass
class AttentionStats:
    """Activated-token statistics for a query batch."""

    counts: np.ndarray                      # per-query activated token count
    region_sets: dict[int, np.ndarray] = dc_field(default_factory=dict)
    histogram: tuple[np.ndarray, np.ndarray] = (np.empty(0), np.empty(0))

    @property
    def mean_count(self) -> float:
        return float(self.counts.mean())


def activated_token_stats(points, latents: ToyVecsetLatents, epsilon: float,
                          region_ids=None, bins: int = 32) -> AttentionStats:
    """Count tokens with softmax weight above ``epsilon`` per query.

    With ``region_ids`` given, also merge the per-query activated sets into
    one set per region.
    """
    if not (0.0 < epsilon < 1.0):
        raise ValueError("epsilon must lie in (0, 1)")
    pts = check_points(points)
    scores = -_pairwise_sq_dists(pts, latents.anchors) / latents.tau
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    active = w > epsilon
    counts = active.sum(axis=1)
    hist, edges = np.histogram(counts, bins=bins, range=(0, latents.num_tokens))
    region_sets: dict[int, np.ndarray] = {}
    if region_ids is not None:
        region_ids = np.asarray(region_ids)
        for rid in np.unique(region_ids):
            mask = region_ids == rid
            region_sets[int(rid)] = np.flatnonzero(active[mask].any(axis=0))
    return AttentionStats(counts=counts, region_sets=region_sets, histogram=(hist, edges))


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = -2.0 * (a @ b.T)
    d += np.sum(a * a, axis=1)[:, None]
    d += np.sum(b * b, axis=1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


# ---------------------------------------------------------------------------
# decoder FLOPs model


@dataclass(frozen=True)
class HeadConfig:
    """Shape of the query head whose per-query cost the FLOPs model counts."""

    width: int
    kv_width: int
    mlp_ratio: int
    num_layernorms: int
    m_kv: int

    def __post_init__(self):
        if min(self.width, self.kv_width, self.mlp_ratio, self.m_kv) < 1:
            raise ValueError("width, kv_width, mlp_ratio and m_kv must be >= 1")
        if self.num_layernorms < 0:
            raise ValueError("num_layernorms must be >= 0")


BASELINE_HEAD = HeadConfig(width=1024, kv_width=1024, mlp_ratio=4, num_layernorms=4, m_kv=3072)
EFFICIENT_HEAD = HeadConfig(width=512, kv_width=512, mlp_ratio=1, num_layernorms=1, m_kv=3072)


def flops_per_query(cfg: HeadConfig) -> int:
    """Analytic per-query cost of the attention head.

    Multiply-adds count as 2 FLOPs and layernorm as 5 FLOPs per channel,
    so the numbers are reproducible from the formula alone.
    """
    d_in = 3 + POSITIONAL_ENCODING_WIDTH
    return (2 * d_in * cfg.width
            + cfg.m_kv * 4 * cfg.kv_width
            + 2 * cfg.width * cfg.width
            + 4 * cfg.mlp_ratio * cfg.width * cfg.width
            + 5 * cfg.width * cfg.num_layernorms)


def attention_flops_per_query(cfg: HeadConfig) -> int:
    """Just the KV-dependent attention term (scores + weighted sum)."""
    return cfg.m_kv * 4 * cfg.kv_width
