"""Adaptive KV selection for field decoding.

The volume is partitioned into r^3 subvolumes.  A handful of probe queries
per subvolume scores all tokens once; each subvolume then keeps only the
tokens its probes care about, and every real query in that subvolume
attends to the kept subset with a renormalized softmax.  Because the
kernel scores decay with squared distance, the probes' top tokens carry
essentially all softmax mass for their neighbors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial.distance import cdist

from ._kernels import eval_points_grouped
from ._validation import check_points
from .field import BASELINE_HEAD, HeadConfig, ToyVecsetLatents, attention_weights

_SCORE_CHUNK = 4096  # probe rows scored per numpy call


@dataclass
class AkvsConfig:
    """Knobs of the subvolume token-selection scheme."""

    r: int = 16                  # subvolumes per axis
    n_probe: int = 8             # probe queries per subvolume
    mode: str = "mean_topk"      # or "topn_merge"
    K: int = 512                 # tokens kept by mean_topk
    N: int = 50                  # per-probe tokens merged by topn_merge
    pack_batch: int = 65536      # max queries per packed batch

    def __post_init__(self):
        if self.r < 1 or self.n_probe < 1 or self.K < 1 or self.N < 1:
            raise ValueError("r, n_probe, K, N must all be >= 1")
        if self.mode not in ("mean_topk", "topn_merge"):
            raise ValueError("mode must be 'mean_topk' or 'topn_merge'")
        if self.pack_batch < 1:
            raise ValueError("pack_batch must be >= 1")


@dataclass
class KVSelection:
    """Per-subvolume sorted, unique token-index lists."""

    tokens: dict[int, np.ndarray]

    def __getitem__(self, sv_id: int) -> np.ndarray:
        try:
            return self.tokens[sv_id]
        except KeyError:
            raise ValueError(f"no token selection for subvolume {sv_id}") from None


@dataclass
class PackedQueryBatch:
    """Subvolume-contiguous slice of a query set.

    ``segments`` rows are (subvolume id, start, end) into ``queries``;
    ``source_index`` maps each packed row back to its original position.
    """

    queries: np.ndarray
    segments: np.ndarray
    source_index: np.ndarray

    def __len__(self) -> int:
        return len(self.queries)


# ---------------------------------------------------------------------------
# partitioning


def partition_subvolumes(res: int, r: int) -> np.ndarray:
    """Subvolume id of every voxel, x-fastest order; id = sx + r*(sy + r*sz)."""
    if not (1 <= r <= res):
        raise ValueError("need 1 <= r <= res")
    s = (np.arange(res, dtype=np.int64) * r) // res
    idx = np.arange(res ** 3, dtype=np.int64)
    sx = s[idx % res]
    sy = s[(idx // res) % res]
    sz = s[idx // (res * res)]
    return sx + r * (sy + r * sz)


def subvolume_of(ijk: np.ndarray, res: int, r: int) -> np.ndarray:
    """Subvolume ids for an array of voxel index triples."""
    ijk = np.asarray(ijk, dtype=np.int64)
    s = (ijk * r) // res
    return s[:, 0] + r * (s[:, 1] + r * s[:, 2])


# ---------------------------------------------------------------------------
# probe-based token selection


def _top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lower index, sorted."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def probe_and_select(latents: ToyVecsetLatents,
                     queries_by_subvolume: dict[int, np.ndarray],
                     cfg: AkvsConfig, seed: int) -> KVSelection:
    """Pick probes per subvolume, score all tokens, keep the winners.

    mean_topk averages the probes' pre-softmax kernel scores per token and
    keeps the K largest; topn_merge unions each probe's top-N tokens.
    Pre-softmax comparison gives the same per-query ordering as softmax
    weights without coupling normalization across probes.
    """
    sv_ids = sorted(queries_by_subvolume)
    pts_list = []
    for sv in sv_ids:
        pts = check_points(queries_by_subvolume[sv])
        if len(pts) == 0:
            raise ValueError(f"subvolume {sv} has no queries")
        pts_list.append(pts)
    counts = np.array([len(p) for p in pts_list], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)])
    pts_sorted = (np.concatenate(pts_list) if pts_list
                  else np.empty((0, 3), dtype=np.float64))
    return _select_sorted(latents, pts_sorted,
                          np.asarray(sv_ids, dtype=np.int64), starts, cfg, seed)


def _select_sorted(latents: ToyVecsetLatents, pts: np.ndarray,
                   sv_ids: np.ndarray, starts: np.ndarray,
                   cfg: AkvsConfig, seed: int, order=None) -> KVSelection:
    """probe_and_select on subvolume-contiguous arrays.

    ``pts[starts[g]:starts[g + 1]]`` are the queries of subvolume
    ``sv_ids[g]``; probe picking is stratified within each run.  With
    ``order``, run positions index ``order`` instead, so callers can pass
    unsorted points plus their stable argsort without copying them.
    """
    rng = np.random.default_rng(seed)
    counts = np.diff(starts)
    npb = cfg.n_probe
    n_per = np.minimum(counts, npb)
    out_starts = np.concatenate([[0], np.cumsum(n_per)])
    rows = np.empty(out_starts[-1], dtype=np.int64)
    big = counts > npb
    if big.any():
        k = np.arange(npb, dtype=np.int64)
        lo = (k[None, :] * counts[big, None]) // npb
        hi = ((k[None, :] + 1) * counts[big, None]) // npb
        pick = lo + rng.integers(0, hi - lo)
        dest = (out_starts[:-1][big, None] + k).ravel()
        rows[dest] = (starts[:-1][big, None] + pick).ravel()
    small = ~big
    if small.any():
        reps = counts[small]
        intra = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
        dest = np.repeat(out_starts[:-1][small], reps) + intra
        rows[dest] = np.repeat(starts[:-1][small], reps) + intra
    probe_pts = pts[rows] if order is None else pts[order[rows]]

    M = latents.num_tokens
    K = min(cfg.K, M)
    N = min(cfg.N, M)
    tokens: dict[int, np.ndarray] = {}
    # chunked probe scoring keeps the (probes, M) matrix small
    bounds = out_starts
    pos = 0
    while pos < len(sv_ids):
        end = pos
        while end < len(sv_ids) and bounds[end + 1] - bounds[pos] <= _SCORE_CHUNK:
            end += 1
        end = max(end, pos + 1)
        rows = slice(bounds[pos], bounds[end])
        if cfg.mode == "mean_topk":
            # mean_j -||p_j - a||^2 = -(mean_j||p_j||^2 - 2 a.mean_j p_j
            # + ||a||^2): the probe average collapses to a centroid form,
            # one matvec per subvolume instead of a probes-by-tokens matrix
            starts = bounds[pos:end] - bounds[pos]
            chunk = probe_pts[rows]
            counts = np.diff(np.append(starts, chunk.shape[0]))
            centroid = np.add.reduceat(chunk, starts, axis=0) / counts[:, None]
            mean_sq = (np.add.reduceat((chunk ** 2).sum(axis=1), starts)
                       / counts)
            # ranking scores only, never field values: float32 is plenty
            # for a top-K cut and halves the score-matrix traffic
            anchors32 = latents.anchors.astype(np.float32)
            a_sq = (anchors32 ** 2).sum(axis=1)
            means = -(mean_sq.astype(np.float32)[:, None]
                      - 2.0 * centroid.astype(np.float32) @ anchors32.T
                      + a_sq[None, :])
            # deterministic top-K by mean score; introselect beats a full
            # sort and the kept set is order-insensitive downstream
            if K < means.shape[1]:
                top = np.argpartition(-means, K - 1, axis=1)[:, :K]
            else:
                top = np.broadcast_to(np.arange(K), means[:, :K].shape)
            top = np.sort(top, axis=1)
            for gi, g in enumerate(range(pos, end)):
                tokens[int(sv_ids[g])] = top[gi]
        else:
            scores = -cdist(probe_pts[rows], latents.anchors,
                            "sqeuclidean") / latents.tau
            for g in range(pos, end):
                sv_scores = scores[bounds[g] - bounds[pos]:bounds[g + 1] - bounds[pos]]
                merged = np.unique(np.concatenate(
                    [_top_indices(row, N) for row in sv_scores]))
                tokens[int(sv_ids[g])] = merged
        pos = end
    return KVSelection(tokens)


# ---------------------------------------------------------------------------
# packing


def pack_queries(points: np.ndarray, sv_ids: np.ndarray,
                 cfg: AkvsConfig, order=None) -> list[PackedQueryBatch]:
    """Sort queries subvolume-contiguously and cut greedy batches.

    Batches fill up to pack_batch without splitting a subvolume, except
    when a single subvolume alone exceeds pack_batch.  ``order`` may pass
    a precomputed stable argsort of ``sv_ids``.
    """
    pts = check_points(points)
    sv = np.asarray(sv_ids, dtype=np.int64)
    if sv.shape != (len(pts),):
        raise ValueError("one subvolume id per query required")
    if order is None:
        order = np.argsort(sv, kind="stable")
    sv_sorted = sv[order]
    # contiguous runs of equal subvolume id, long runs split to pack_batch
    cut = np.flatnonzero(np.diff(sv_sorted)) + 1
    starts = np.concatenate([[0], cut])
    ends = np.concatenate([cut, [len(sv_sorted)]])
    if int((ends - starts).max(initial=0)) > cfg.pack_batch:
        pieces = []
        for s, e in zip(starts, ends):
            while e - s > cfg.pack_batch:
                pieces.append((s, s + cfg.pack_batch))
                s += cfg.pack_batch
            pieces.append((s, e))
        starts = np.array([p[0] for p in pieces], dtype=np.int64)
        ends = np.array([p[1] for p in pieces], dtype=np.int64)

    # greedy batch boundaries: a batch takes every whole run that still
    # fits; runs are contiguous, so the cut is a single searchsorted
    bounds = [0]
    while bounds[-1] < len(starts):
        base = bounds[-1]
        nxt = int(np.searchsorted(ends, starts[base] + cfg.pack_batch,
                                  side="right"))
        bounds.append(max(nxt, base + 1))

    out = []
    for bi in range(len(bounds) - 1):
        lo, hi = bounds[bi], bounds[bi + 1]
        b0 = int(starts[lo])
        b1 = int(ends[hi - 1])
        idx = order[b0:b1]
        rel = np.stack([sv_sorted[starts[lo:hi]], starts[lo:hi] - b0,
                        ends[lo:hi] - b0], axis=1)
        out.append(PackedQueryBatch(np.ascontiguousarray(pts[idx]), rel, idx))
    return out


def unpack_values(batches: list[PackedQueryBatch],
                  values_per_batch: list[np.ndarray]) -> np.ndarray:
    """Scatter per-batch outputs back to the original query order."""
    n = sum(len(b) for b in batches)
    out = np.empty(n, dtype=np.float64)
    for batch, vals in zip(batches, values_per_batch):
        out[batch.source_index] = vals
    return out


# ---------------------------------------------------------------------------
# evaluation


def akvs_eval(latents: ToyVecsetLatents,
              packed: PackedQueryBatch | list[PackedQueryBatch],
              selection: KVSelection) -> np.ndarray:
    """Evaluate packed queries against their subvolumes' selected tokens.

    The softmax is renormalized over each subset; values come back in the
    original (pre-pack) query order.
    """
    batches = [packed] if isinstance(packed, PackedQueryBatch) else list(packed)
    results = []
    for batch in batches:
        segs = batch.segments
        group_ptr = np.concatenate([segs[:, 1], segs[-1:, 2]]).astype(np.int64)
        kept = [selection[int(sv_id)] for sv_id in segs[:, 0]]
        token_ids = np.concatenate(kept) if kept else np.empty(0, np.int64)
        lens = np.array([len(s) for s in kept], dtype=np.int64)
        ends = np.cumsum(lens)
        token_ptr = np.stack([ends - lens, ends], axis=1)
        out = np.empty(len(batch), dtype=np.float64)
        eval_points_grouped(batch.queries, group_ptr, token_ids, token_ptr,
                            latents.anchors, latents.normals, latents.offsets,
                            latents.tau, latents.trunc, out)
        results.append(out)
    return unpack_values(batches, results)


# ---------------------------------------------------------------------------
# hierarchical decoding with selection


def _kept_mass_quantiles(latents, pts, sv, selection, rng, max_samples=256):
    """Full-softmax mass captured by the selection, on sampled queries."""
    n = len(pts)
    take = rng.choice(n, size=min(n, max_samples), replace=False)
    masses = []
    for qi in take:
        w = attention_weights(pts[qi], latents)
        masses.append(float(w[selection[int(sv[qi])]].sum()))
    masses = np.array(masses)
    qs = np.quantile(masses, [0.01, 0.10, 0.50])
    return {"min": float(masses.min()), "q01": float(qs[0]),
            "q10": float(qs[1]), "q50": float(qs[2])}


def hierarchical_decode_akvs(latents: ToyVecsetLatents, cfg, seed: int = 0,
                             head: HeadConfig = BASELINE_HEAD,
                             kept_mass_stats: bool = False):
    """Coarse-to-fine decode where every query pass runs through selection.

    Per level: partition queries into subvolumes, probe-select tokens, pack,
    evaluate against the kept subsets.  The report records the effective KV
    size per level and the attention-FLOPs saved versus full-KV decoding
    (probe scoring is charged at full KV size).  ``kept_mass_stats`` adds
    sampled softmax-mass-captured quantiles to selection_stats; it reruns
    full-KV attention on sample queries, so it is off by default.
    """
    from .hierdec import (DecodeReport, LevelVolume, _select_voxels, _tile_for,
                          assemble, effective_schedule, expand, gen_grid_points,
                          voxel_centers)

    if cfg.akvs is None:
        raise ValueError("DecodeConfig.akvs must be set")
    acfg = cfg.akvs
    levels = effective_schedule(cfg)
    report = DecodeReport(target_res=cfg.target_res)
    rng = np.random.default_rng(seed + 1)
    M = latents.num_tokens
    att = 4 * head.kv_width  # attention FLOPs per query per KV token
    sel_cache: dict[int, np.ndarray] = {}

    def level_eval(pts, ijk, res, level_seed):
        # evaluation groups no coarser than the plain decoder's tiles: each
        # tile inherits its subvolume's token list, and the kernel's exact
        # per-query window makes the values independent of grouping; sorting
        # once by tile id also sorts by subvolume (tile ids nest in them)
        sv = subvolume_of(ijk, res, acfg.r)
        tile = _tile_for(res)
        nt = (res + tile - 1) // tile
        t = ijk // tile
        gid = sv * nt ** 3 + t[:, 0] + nt * (t[:, 1] + nt * t[:, 2])
        order = np.argsort(gid, kind="stable")
        sv_sorted = sv[order]
        cut = np.flatnonzero(np.diff(sv_sorted)) + 1
        starts = np.concatenate([[0], cut, [len(sv)]])
        sv_unique = sv_sorted[starts[:-1]]
        # a subvolume's token list is computed from the first queries that
        # touch it and reused at finer levels; the base level covers every
        # subvolume, so refinement levels normally probe nothing new
        miss = [g for g in range(len(sv_unique))
                if int(sv_unique[g]) not in sel_cache]
        if miss:
            mp = np.asarray(miss, dtype=np.int64)
            lens = starts[mp + 1] - starts[mp]
            new_order = np.concatenate(
                [order[starts[g]:starts[g + 1]] for g in miss])
            new_starts = np.concatenate([[0], np.cumsum(lens)])
            fresh = _select_sorted(latents, pts, sv_unique[mp], new_starts,
                                   acfg, level_seed, order=new_order)
            sel_cache.update(fresh.tokens)
            n_probes = int(np.minimum(lens, acfg.n_probe).sum())
        else:
            n_probes = 0
        selection = KVSelection(sel_cache)
        gid_sorted = gid[order]
        gid_unique = gid_sorted[np.concatenate(
            [[0], np.flatnonzero(np.diff(gid_sorted)) + 1])]
        sel_g = {int(g): selection[int(g) // nt ** 3] for g in gid_unique}
        batches = pack_queries(pts, gid, acfg, order=order)
        values = akvs_eval(latents, batches, sel_g)

        counts = np.diff(starts)
        if acfg.mode == "mean_topk":
            kv_total = min(acfg.K, M) * len(sv)
        else:
            sizes_u = np.array([len(selection[int(s)]) for s in sv_unique],
                               dtype=np.int64)
            kv_total = int((sizes_u * counts).sum())
        report.m_kv_per_level.append(kv_total / len(sv))
        report.attention_flops_full += len(pts) * M * att
        report.attention_flops_selected += kv_total * att
        report.attention_flops_selected += n_probes * M * att
        stats = {
            "res": res,
            "n_subvolumes": len(sv_unique),
            "n_probes": n_probes,
            "mean_selected": kv_total / len(sv),
        }
        if kept_mass_stats:
            stats["kept_mass"] = _kept_mass_quantiles(latents, pts, sv,
                                                      selection, rng)
        report.selection_stats.append(stats)
        return values

    t0 = time.perf_counter()
    base = levels[0]
    base_pts = gen_grid_points(base)
    idx = np.arange(base ** 3, dtype=np.int64)
    base_ijk = np.stack([idx % base, (idx // base) % base, idx // (base * base)],
                        axis=1)
    base_vals = level_eval(base_pts, base_ijk, base, seed).astype(np.float32)
    base_vals = base_vals.reshape((base,) * 3, order="F")
    report.per_level.append((base, base ** 3))
    report.stage_times[f"level_{base}"] = time.perf_counter() - t0

    vols = [LevelVolume(base, dense_values=base_vals)]
    staged = (cfg.final_double_expand and cfg.double_expand_style == "staged")
    from .hierdec import dilate as _dilate
    for li in range(1, len(levels)):
        t0 = time.perf_counter()
        res_from, res_to = levels[li - 1], levels[li]
        is_final = li == len(levels) - 1
        skip_fn = is_final and cfg.final_skip_findnear
        sel = _select_voxels(vols[-1].dense(), cfg, skip_fn)
        if staged and is_final and res_to == 4 * res_from:
            mid = expand(sel, res_from, 2 * res_from)
            mid = _dilate(mid, cfg.dilation_radius)
            children = expand(mid, 2 * res_from, res_to)
        else:
            children = expand(sel, res_from, res_to)
        ijk = children.indices()
        values = level_eval(voxel_centers(res_to, ijk), ijk, res_to,
                            seed + li).astype(np.float32)
        vols.append(LevelVolume(res_to, sparse=children, sparse_values=values,
                                parent=vols[-1]))
        report.per_level.append((res_to, len(children)))
        report.stage_times[f"level_{res_to}"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    volume = assemble(vols)
    report.stage_times["assemble"] = time.perf_counter() - t0
    from .hierdec import _evaluated_mask
    report.final_mask = _evaluated_mask(vols[-1])
    return volume, report
