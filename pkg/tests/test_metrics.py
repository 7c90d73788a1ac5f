"""IoU metrics, benchmark harness records, and accounting identities."""

import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxflow.akvs import AkvsConfig
from voxflow.field import BASELINE_HEAD
from voxflow.hierdec import DecodeConfig, dense_decode, hierarchical_decode
from voxflow.metrics import (DEFAULT_MODES, DEFAULT_SUITE, RunReport,
                             bench_run, reports_to_csv, surface_iou,
                             volume_iou)


# ---------------------------------------------------------------------------
# volume IoU


def _grid(bits):
    return np.asarray(bits, dtype=bool).reshape(2, 2, 2)


def test_volume_iou_identical():
    g = _grid([1, 0, 1, 0, 0, 0, 1, 1])
    assert volume_iou(g, g) == 1.0


def test_volume_iou_disjoint():
    a = _grid([1, 1, 0, 0, 0, 0, 0, 0])
    b = _grid([0, 0, 1, 1, 0, 0, 0, 0])
    assert volume_iou(a, b) == 0.0


def test_volume_iou_half_subset():
    b = _grid([1, 1, 1, 1, 0, 0, 0, 0])
    a = _grid([1, 1, 0, 0, 0, 0, 0, 0])
    assert volume_iou(a, b) == 0.5


def test_volume_iou_both_empty():
    z = np.zeros((2, 2, 2), dtype=bool)
    assert volume_iou(z, z) == 1.0


def test_volume_iou_shape_mismatch():
    with pytest.raises(ValueError):
        volume_iou(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 255), st.integers(0, 255))
def test_volume_iou_symmetric_and_bounded(x, y):
    a = _grid([(x >> i) & 1 for i in range(8)])
    b = _grid([(y >> i) & 1 for i in range(8)])
    iou = volume_iou(a, b)
    assert iou == volume_iou(b, a)
    assert 0.0 <= iou <= 1.0
    assert (iou == 1.0) == bool(np.array_equal(a, b))


def test_volume_iou_monotone_bit_flip():
    # flipping one agreeing bit to disagree never raises the IoU
    a = _grid([1, 0, 1, 0, 1, 0, 1, 0])
    before = volume_iou(a, a)
    b = a.copy()
    b[0, 0, 0] = ~b[0, 0, 0]
    assert volume_iou(a, b) <= before


# ---------------------------------------------------------------------------
# surface IoU


def test_surface_iou_identical(sphere_volume_64):
    assert surface_iou(sphere_volume_64, sphere_volume_64) == 1.0


def test_surface_iou_scaled_magnitudes(sphere_volume_64):
    # occupancy depends on sign only; shrinking magnitudes widens the band
    # but cannot create disagreement
    assert surface_iou(sphere_volume_64, sphere_volume_64 * 0.5) == 1.0


def test_surface_iou_empty_band():
    a = np.ones((4, 4, 4))
    assert surface_iou(a, a) == 1.0


def test_surface_iou_validation(sphere_volume_64):
    with pytest.raises(ValueError):
        surface_iou(sphere_volume_64, sphere_volume_64, band_voxels=0)
    with pytest.raises(ValueError):
        surface_iou(sphere_volume_64, np.ones((4, 4, 4)))


def test_surface_iou_hier_vs_dense(sphere_latents):
    cfg = DecodeConfig(target_res=128, base_res=64)
    vol_h, _ = hierarchical_decode(sphere_latents, cfg)
    vol_d, _ = dense_decode(sphere_latents, 128)
    assert surface_iou(vol_d, vol_h) >= 0.99


def test_surface_iou_detects_band_error(sphere_volume_64):
    # flip signs on a shell of near-surface voxels: V-IoU barely moves
    # while S-IoU drops because the band is exactly where the damage is
    damaged = sphere_volume_64.copy()
    shell = np.abs(damaged) <= 0.1
    damaged[shell] = -damaged[shell] - 1e-6
    from voxflow.surface import sign_volume
    v = volume_iou(sign_volume(sphere_volume_64), sign_volume(damaged))
    s = surface_iou(sphere_volume_64, damaged)
    assert s < v


# ---------------------------------------------------------------------------
# benchmark harness


@pytest.fixture(scope="module")
def small_bench():
    sink = io.StringIO()
    cfg = DecodeConfig(target_res=64, base_res=32, akvs=AkvsConfig(r=8, K=64))
    reports = bench_run(shapes=("sphere:r=0.5",), modes=DEFAULT_MODES,
                        seeds=(0,), cfg=cfg, M=256, repeats=1, sink=sink)
    return reports, sink.getvalue()


def test_bench_one_shape_three_modes(small_bench):
    reports, _ = small_bench
    assert len(reports) == 3
    assert [r.mode for r in reports] == list(DEFAULT_MODES)
    assert all(r.shape == "sphere:r=0.5" for r in reports)


def test_bench_dense_reduction_zero(small_bench):
    reports, _ = small_bench
    dense = next(r for r in reports if r.mode == "dense")
    assert dense.decode.reduction == 0.0
    assert dense.v_iou == 1.0 and dense.s_iou == 1.0


def test_bench_hier_accuracy_and_reduction(small_bench):
    reports, _ = small_bench
    for r in reports:
        assert r.wall_time >= 0.0
        if r.v_iou is not None:
            assert 0.0 <= r.v_iou <= 1.0 and 0.0 <= r.s_iou <= 1.0
    hier = next(r for r in reports if r.mode == "hier")
    assert hier.decode.reduction > 0.5
    assert hier.v_iou >= 0.99


def test_bench_jsonl_records(small_bench):
    reports, text = small_bench
    lines = [json.loads(l) for l in text.strip().splitlines()]
    assert len(lines) == 3
    for line, rep in zip(lines, reports):
        assert line["mode"] == rep.mode
        assert line["schema_version"] == rep.schema_version
        assert line["reduction"] == rep.decode.reduction
        assert "per_level" in line["decode"]


def test_bench_csv(small_bench):
    reports, _ = small_bench
    sink = io.StringIO()
    reports_to_csv(reports, sink)
    rows = list(csv.reader(io.StringIO(sink.getvalue())))
    assert rows[0][0] == "shape"
    assert len(rows) == 1 + len(reports)
    assert rows[1][1] == "dense"


def test_bench_rejects_unknown_mode():
    with pytest.raises(ValueError):
        bench_run(shapes=("sphere:r=0.5",), modes=("magic",), seeds=(0,),
                  cfg=DecodeConfig(target_res=32, base_res=32), M=64,
                  repeats=1)


def test_bench_flushes_partial_on_failure():
    sink = io.StringIO()
    cfg = DecodeConfig(target_res=32, base_res=32)
    with pytest.raises(ValueError):
        bench_run(shapes=("sphere:r=0.5",), modes=("dense", "magic"),
                  seeds=(0,), cfg=cfg, M=64, repeats=1, sink=sink)
    assert len(sink.getvalue().strip().splitlines()) == 1


def test_default_suite_shapes_parse():
    from voxflow.field import parse_shape

    assert len(DEFAULT_SUITE) == 4
    for s in DEFAULT_SUITE:
        parse_shape(s)


# ---------------------------------------------------------------------------
# FLOPs accounting


def test_akvs_flops_accounting_identity(sphere_latents_small):
    # the reported full/selected totals must tie out exactly against the
    # per-level query counts and KV sizes at the head's per-token cost
    from voxflow.akvs import hierarchical_decode_akvs

    cfg = DecodeConfig(target_res=64, base_res=32, akvs=AkvsConfig(r=8, K=64))
    _, rep = hierarchical_decode_akvs(sphere_latents_small, cfg, seed=0)
    att = 4 * BASELINE_HEAD.kv_width
    M = sphere_latents_small.num_tokens
    counts = [n for _, n in rep.per_level]
    full = sum(n * M * att for n in counts)
    probes = sum(s["n_probes"] for s in rep.selection_stats)
    selected = sum(int(round(m_kv * n)) * att
                   for m_kv, n in zip(rep.m_kv_per_level, counts))
    selected += probes * M * att
    assert rep.attention_flops_full == full
    assert rep.attention_flops_selected == selected
    assert rep.total_queries == sum(counts)
