"""Subvolume token selection: partitioning, probing, packing, evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxflow.akvs import (AkvsConfig, KVSelection, akvs_eval,
                          hierarchical_decode_akvs, pack_queries,
                          partition_subvolumes, probe_and_select,
                          subvolume_of, unpack_values)
from voxflow.field import (ToyVecsetLatents, attention_weights,
                           build_surface_latents, eval_field, parse_shape)
from voxflow.hierdec import DecodeConfig, hierarchical_decode


# ---------------------------------------------------------------------------
# partitioning


def test_partition_r1_all_zero():
    assert np.all(partition_subvolumes(res=4, r=1) == 0)


def test_partition_res4_r2_example():
    sv = partition_subvolumes(res=4, r=2)
    # voxel (3,0,0) lands in subvolume (1,0,0) -> id 1
    assert sv[3 + 4 * (0 + 4 * 0)] == 1
    assert subvolume_of(np.array([[3, 0, 0]]), res=4, r=2)[0] == 1


def test_partition_res64_r16_counts():
    sv = partition_subvolumes(res=64, r=16)
    counts = np.bincount(sv, minlength=16 ** 3)
    assert counts.shape == (16 ** 3,)
    assert np.all(counts == 64)


def test_partition_covers_and_matches_subvolume_of():
    res, r = 12, 5
    sv = partition_subvolumes(res, r)
    idx = np.arange(res ** 3)
    ijk = np.stack([idx % res, (idx // res) % res, idx // res ** 2], axis=1)
    np.testing.assert_array_equal(sv, subvolume_of(ijk, res, r))
    assert sv.min() >= 0 and sv.max() < r ** 3


def test_partition_rejects_bad_r():
    with pytest.raises(ValueError):
        partition_subvolumes(res=4, r=0)
    with pytest.raises(ValueError):
        partition_subvolumes(res=4, r=5)


def test_config_validation():
    with pytest.raises(ValueError):
        AkvsConfig(r=0)
    with pytest.raises(ValueError):
        AkvsConfig(mode="topk")
    with pytest.raises(ValueError):
        AkvsConfig(pack_batch=0)


# ---------------------------------------------------------------------------
# probe-based selection


def test_select_K_equals_M_is_full(sphere_latents_small):
    M = sphere_latents_small.num_tokens
    q = {0: np.random.default_rng(0).uniform(-1, 1, size=(20, 3))}
    for mode, kwargs in (("mean_topk", {"K": M}), ("topn_merge", {"N": M})):
        cfg = AkvsConfig(r=1, n_probe=4, mode=mode, **kwargs)
        sel = probe_and_select(sphere_latents_small, q, cfg, seed=0)
        np.testing.assert_array_equal(sel[0], np.arange(M))


def test_single_probe_topn1_nearest_anchor(sphere_latents_small):
    # one probe, one kept token: argmax of the distance kernel = closest anchor
    probe = np.array([[0.51, 0.02, -0.03]])
    cfg = AkvsConfig(r=1, n_probe=1, mode="topn_merge", N=1)
    sel = probe_and_select(sphere_latents_small, {0: probe}, cfg, seed=0)
    d2 = np.sum((sphere_latents_small.anchors - probe[0]) ** 2, axis=1)
    assert sel[0].shape == (1,)
    assert sel[0][0] == int(np.argmin(d2))


def test_selection_sorted_unique_and_deterministic(sphere_latents):
    rng = np.random.default_rng(3)
    q = {7: rng.uniform(-1, 1, size=(40, 3)),
         2: rng.uniform(-1, 1, size=(5, 3))}
    cfg = AkvsConfig(r=4, n_probe=8, K=64)
    sel1 = probe_and_select(sphere_latents, q, cfg, seed=5)
    sel2 = probe_and_select(sphere_latents, q, cfg, seed=5)
    for sv in (2, 7):
        tok = sel1[sv]
        assert len(np.unique(tok)) == len(tok)
        np.testing.assert_array_equal(tok, np.sort(tok))
        np.testing.assert_array_equal(tok, sel2[sv])
        assert len(tok) == 64


def test_empty_subvolume_rejected(sphere_latents_small):
    with pytest.raises(ValueError):
        probe_and_select(sphere_latents_small,
                         {0: np.empty((0, 3))}, AkvsConfig(), seed=0)


def test_kept_mass_sphere(sphere_latents):
    # near-surface queries partitioned at r=16: selected K=64 tokens should
    # capture nearly all softmax mass for almost every non-probe query
    rng = np.random.default_rng(11)
    n = 2000
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * (0.5 + rng.uniform(-0.05, 0.05, size=(n, 1)))
    res, r = 64, 16
    ijk = np.clip(((pts + 1.0) / 2.0 * res).astype(np.int64), 0, res - 1)
    sv = subvolume_of(ijk, res, r)
    by_sv = {int(s): pts[sv == s] for s in np.unique(sv)}
    cfg = AkvsConfig(r=r, n_probe=8, K=64)
    sel = probe_and_select(sphere_latents, by_sv, cfg, seed=0)
    kept = np.array([attention_weights(p, sphere_latents)[sel[int(s)]].sum()
                     for p, s in zip(pts, sv)])
    assert np.mean(kept >= 0.999) >= 0.99


def test_selection_missing_subvolume_errors():
    sel = KVSelection({0: np.array([0])})
    with pytest.raises(ValueError):
        sel[3]


# ---------------------------------------------------------------------------
# packing


def _sv_ids(n_per, ids):
    return np.repeat(np.asarray(ids, dtype=np.int64), n_per)


def test_pack_single_batch():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(10, 3))
    batches = pack_queries(pts, np.zeros(10, dtype=np.int64),
                           AkvsConfig(pack_batch=100))
    assert len(batches) == 1
    assert len(batches[0]) == 10
    np.testing.assert_array_equal(batches[0].segments, [[0, 0, 10]])


def test_pack_greedy_fill():
    # 3 subvolumes x 4 queries, batch cap 8 -> [sv0+sv1], [sv2]
    pts = np.random.default_rng(1).uniform(-1, 1, size=(12, 3))
    batches = pack_queries(pts, _sv_ids(4, [0, 1, 2]),
                           AkvsConfig(pack_batch=8))
    assert [len(b) for b in batches] == [8, 4]
    np.testing.assert_array_equal(batches[0].segments[:, 0], [0, 1])
    np.testing.assert_array_equal(batches[1].segments[:, 0], [2])


def test_pack_oversized_subvolume_splits():
    pts = np.random.default_rng(2).uniform(-1, 1, size=(10, 3))
    batches = pack_queries(pts, np.zeros(10, dtype=np.int64),
                           AkvsConfig(pack_batch=4))
    assert [len(b) for b in batches] == [4, 4, 2]


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, size=(50, 3))
    sv = rng.integers(0, 5, size=50)
    batches = pack_queries(pts, sv, AkvsConfig(pack_batch=13))
    # feeding each packed row's original index through unpack must give
    # back the identity permutation
    vals = [b.source_index.astype(np.float64) for b in batches]
    np.testing.assert_array_equal(unpack_values(batches, vals),
                                  np.arange(50, dtype=np.float64))
    packed_pts = np.concatenate([b.queries for b in batches])
    packed_src = np.concatenate([b.source_index for b in batches])
    np.testing.assert_array_equal(packed_pts, pts[packed_src])


def test_pack_segments_partition():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, size=(30, 3))
    sv = rng.integers(0, 4, size=30)
    for b in pack_queries(pts, sv, AkvsConfig(pack_batch=11)):
        segs = b.segments
        assert segs[0, 1] == 0 and segs[-1, 2] == len(b)
        np.testing.assert_array_equal(segs[1:, 1], segs[:-1, 2])


def test_pack_rejects_mismatched_ids():
    with pytest.raises(ValueError):
        pack_queries(np.zeros((3, 3)), np.zeros(2, dtype=np.int64),
                     AkvsConfig())


@settings(deadline=None, max_examples=25)
@given(st.integers(1, 60), st.integers(1, 6), st.integers(1, 20),
       st.integers(0, 2 ** 16))
def test_pack_roundtrip_property(n, n_sv, batch, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    sv = rng.integers(0, n_sv, size=n)
    batches = pack_queries(pts, sv, AkvsConfig(pack_batch=batch))
    vals = [b.source_index.astype(np.float64) for b in batches]
    np.testing.assert_array_equal(unpack_values(batches, vals),
                                  np.arange(n, dtype=np.float64))
    for b in batches:
        # one subvolume per segment, segments cover the batch
        for sid, s, e in b.segments:
            assert np.all(sv[b.source_index[s:e]] == sid)


# ---------------------------------------------------------------------------
# evaluation


def test_akvs_eval_full_selection_bitwise(sphere_latents_small):
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(64, 3))
    sv = rng.integers(0, 3, size=64)
    M = sphere_latents_small.num_tokens
    batches = pack_queries(pts, sv, AkvsConfig(pack_batch=30))
    sel = KVSelection({s: np.arange(M) for s in range(3)})
    vals = akvs_eval(sphere_latents_small, batches, sel)
    np.testing.assert_array_equal(vals, eval_field(pts, sphere_latents_small))


def test_akvs_eval_single_token_plane():
    lat = ToyVecsetLatents(
        anchors=np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]),
        normals=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        offsets=np.array([0.01, -0.02]), tau=1e-3, trunc=0.125)
    q = np.array([[0.03, 0.2, -0.1]])
    batches = pack_queries(q, np.zeros(1, dtype=np.int64), AkvsConfig())
    sel = KVSelection({0: np.array([0])})
    got = akvs_eval(lat, batches, sel)[0]
    # singleton softmax weight is 1: value is that token's clamped,
    # normalized plane distance
    want = np.clip(q[0, 0] - 0.0 + 0.01, -lat.trunc, lat.trunc) / lat.trunc
    assert got == pytest.approx(want, abs=1e-12)


def test_akvs_eval_missing_selection_errors(sphere_latents_small):
    pts = np.zeros((2, 3))
    batches = pack_queries(pts, np.array([0, 1]), AkvsConfig())
    with pytest.raises(ValueError):
        akvs_eval(sphere_latents_small, batches,
                  KVSelection({0: np.array([0])}))


def test_subset_softmax_error_bound(sphere_latents):
    # when the kept set holds the dominant tokens, the renormalized value
    # can move by at most twice the discarded softmax mass (values in [-1,1])
    rng = np.random.default_rng(7)
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * 0.5
    sv = np.zeros(200, dtype=np.int64)
    cfg = AkvsConfig(r=1, n_probe=8, K=96)
    sel = probe_and_select(sphere_latents, {0: pts[:8]}, cfg, seed=0)
    batches = pack_queries(pts, sv, cfg)
    approx = akvs_eval(sphere_latents, batches, sel)
    full = eval_field(pts, sphere_latents)
    for p, a, f in zip(pts, approx, full):
        w = attention_weights(p, sphere_latents)
        if int(np.argmax(w)) in sel[0]:
            kept = w[sel[0]].sum()
            assert abs(a - f) <= 2.0 * (1.0 - kept) + 1e-12


def test_akvs_field_error_vs_full(sphere_latents):
    # hierarchical query stream at r=16, K=512: selection-restricted values
    # stay within 1e-3 of the unrestricted field on every evaluated voxel
    cfg = DecodeConfig(target_res=128, base_res=64,
                       akvs=AkvsConfig(r=16, K=512))
    vol_a, rep = hierarchical_decode_akvs(sphere_latents, cfg, seed=0)
    vol_h, _ = hierarchical_decode(sphere_latents, cfg)
    mask = rep.final_mask
    assert np.max(np.abs(vol_a[mask] - vol_h[mask])) <= 1e-3


# ---------------------------------------------------------------------------
# decode integration


def test_decode_K_equals_M_bitwise(sphere_latents_small):
    M = sphere_latents_small.num_tokens
    cfg = DecodeConfig(target_res=64, base_res=32,
                       akvs=AkvsConfig(r=8, K=M))
    vol_a, _ = hierarchical_decode_akvs(sphere_latents_small, cfg, seed=0)
    vol_h, _ = hierarchical_decode(sphere_latents_small, cfg)
    np.testing.assert_array_equal(vol_a, vol_h)


def test_decode_requires_akvs_config(sphere_latents_small):
    with pytest.raises(ValueError):
        hierarchical_decode_akvs(sphere_latents_small,
                                 DecodeConfig(target_res=64, base_res=32))


def test_decode_report_flops_and_stats(sphere_latents):
    cfg = DecodeConfig(target_res=128, base_res=64,
                       akvs=AkvsConfig(r=16, K=256))
    _, rep = hierarchical_decode_akvs(sphere_latents, cfg, seed=0,
                                      kept_mass_stats=True)
    assert rep.attention_flops_selected < rep.attention_flops_full
    assert len(rep.m_kv_per_level) == len(rep.per_level)
    for m_kv in rep.m_kv_per_level:
        assert 0 < m_kv <= 256
    for stats in rep.selection_stats:
        assert stats["kept_mass"]["q01"] <= stats["kept_mass"]["q50"]
    # refinement levels reuse the base level's cached selections
    assert rep.selection_stats[1]["n_probes"] == 0


def test_decode_deterministic(sphere_latents_small):
    cfg = DecodeConfig(target_res=64, base_res=32,
                       akvs=AkvsConfig(r=8, K=64))
    a, _ = hierarchical_decode_akvs(sphere_latents_small, cfg, seed=3)
    b, _ = hierarchical_decode_akvs(sphere_latents_small, cfg, seed=3)
    np.testing.assert_array_equal(a, b)


def test_nested_partition_probe_mass(sphere_latents):
    # coarse-to-fine partition nesting: with shared probe points, the finer
    # partition keeps at least the coarse kept-mass on the probes themselves
    rng = np.random.default_rng(9)
    dirs = rng.normal(size=(64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * 0.5
    res = 64
    ijk = np.clip(((pts + 1.0) / 2.0 * res).astype(np.int64), 0, res - 1)
    masses = {}
    for r in (4, 16):
        sv = subvolume_of(ijk, res, r)
        by_sv = {int(s): pts[sv == s] for s in np.unique(sv)}
        cfg = AkvsConfig(r=r, n_probe=64, K=64)  # every point is a probe
        sel = probe_and_select(sphere_latents, by_sv, cfg, seed=0)
        masses[r] = np.array(
            [attention_weights(p, sphere_latents)[sel[int(s)]].sum()
             for p, s in zip(pts, sv)])
    assert np.all(masses[16] >= masses[4] - 1e-12)
