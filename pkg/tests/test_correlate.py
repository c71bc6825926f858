import itertools
import json
import math
import threading
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nightwatch.assignment import brute_force_lap
from nightwatch.correlate import (
    AisPosition, AisStore, GateParams, KNOT_MPS, build_cost_matrix, correlate, destination_point,
    interpolate_track, position_at, read_ais, write_ais,
)
from nightwatch.geo import EARTH_RADIUS_M, GeoPoint, haversine

T0 = datetime(2023, 10, 1, 1, 30, tzinfo=timezone.utc)


def report(vid, lat, lon, dt_s=0.0):
    return AisPosition(vid, T0 + timedelta(seconds=dt_s), GeoPoint(lat, lon))


def test_interpolation_at_report_time_is_exact():
    track = [report("a", 1.25, 3.5, 0), report("a", 2.0, 4.0, 600)]
    assert interpolate_track(track, T0) == GeoPoint(1.25, 3.5)
    assert interpolate_track(track, T0 + timedelta(seconds=600)) == GeoPoint(2.0, 4.0)


def test_interpolation_midpoint():
    track = [report("a", 0, 0, 0), report("a", 0, 2, 600)]
    assert interpolate_track(track, T0 + timedelta(seconds=300)) == GeoPoint(0.0, 1.0)


def test_interpolation_across_antimeridian():
    track = [report("a", 0, 179.0, 0), report("a", 0, -179.0, 600)]
    p = interpolate_track(track, T0 + timedelta(seconds=150))
    assert p.lat == 0.0 and p.lon == pytest.approx(179.5)
    p = interpolate_track(track, T0 + timedelta(seconds=450))
    assert p.lon == pytest.approx(-179.5)


def test_clamping_and_extrapolation_limit():
    track = [report("a", 1, 1, 0), report("a", 2, 2, 600)]
    assert position_at(track, T0 - timedelta(seconds=100), 3600) == (GeoPoint(1, 1), 100.0)
    assert interpolate_track(track, T0 + timedelta(seconds=600 + 3600), 3600) == GeoPoint(2, 2)
    assert interpolate_track(track, T0 + timedelta(seconds=600 + 3601), 3600) is None
    assert interpolate_track(track, T0 - timedelta(seconds=11), 10) is None


def test_offset_to_nearest_report_inside_span():
    track = [report("a", 0, 0, 0), report("a", 0, 1, 1000)]
    _, dt = position_at(track, T0 + timedelta(seconds=300))
    assert dt == 300.0


def test_unsorted_and_empty_tracks_raise():
    with pytest.raises(ValueError):
        interpolate_track([report("a", 0, 0, 600), report("a", 0, 1, 0)], T0)
    with pytest.raises(ValueError):
        interpolate_track([], T0)


def test_cost_matrix_entries():
    d = [GeoPoint(0, 0), GeoPoint(0, 1)]
    a = [GeoPoint(0, 0), GeoPoint(0, 1)]
    m = build_cost_matrix(d, a, 120_000)
    assert m[0, 0] == 0.0 and m[1, 1] == 0.0
    one_degree = math.pi * EARTH_RADIUS_M / 180.0
    assert m[0, 1] == pytest.approx(111_195.08, abs=0.5)
    assert m[0, 1] == pytest.approx(one_degree, abs=1e-6)
    assert np.isnan(build_cost_matrix([GeoPoint(0, 0)], [GeoPoint(0, 1)], 1000.0)).all()
    with pytest.raises(ValueError):
        build_cost_matrix(d, a, 0.0)


def test_cost_matrix_per_column_gate():
    m = build_cost_matrix([GeoPoint(0, 0)], [GeoPoint(0, 0.01), GeoPoint(0, 0.01)], [1000, 2000])
    assert np.isnan(m[0, 0]) and m[0, 1] == pytest.approx(1111.95, abs=0.01)


def test_gate_radius_formula():
    g = GateParams()
    assert g.radius(0) == 1500.0
    assert g.radius(-100) == pytest.approx(1500.0 + 1286.0)
    assert g.max_speed_mps == pytest.approx(25 * KNOT_MPS, abs=0.01)


def test_zero_detections_leaves_all_ais_unmatched():
    res = correlate([], [report("b", 0, 0), report("a", 1, 1)], T0)
    assert res.matches == [] and res.dark_detections == []
    assert res.unmatched_ais == ["a", "b"]


def test_detection_without_nearby_ais_is_dark():
    res = correlate([GeoPoint(0, 0)], [report("a", 0, 1)], T0, detection_ids=["d0"])
    assert res.dark_detections == ["d0"] and res.matches == []
    assert res.unmatched_ais == ["a"]


def test_gate_grows_with_report_age():
    det = [GeoPoint(0, 0)]
    near = destination_point(GeoPoint(0, 0), 90, 2000)
    fresh = correlate(det, [report("a", near.lat, near.lon, 0)], T0)
    stale = correlate(det, [report("a", near.lat, near.lon, -60)], T0)
    assert fresh.matches == []
    assert [m[1] for m in stale.matches] == ["a"]


def test_optimal_not_greedy_assignment():
    # greedy nearest-first would pair d0-b and leave d1 out of its gate
    det = [GeoPoint(0, 0), GeoPoint(0, 0.012)]
    ais = [report("a", 0, -0.005), report("b", 0, 0.004)]
    res = correlate(det, ais, T0)
    assert sorted((d, v) for d, v, _ in res.matches) == [(0, "a"), (1, "b")]


def _random_scene(rng, n_det, n_ais):
    det = [GeoPoint(rng.uniform(10, 10.05), rng.uniform(20, 20.05)) for _ in range(n_det)]
    ais = [report(f"v{j}", rng.uniform(10, 10.05), rng.uniform(20, 20.05),
                  rng.uniform(-300, 300)) for j in range(n_ais)]
    return det, ais


@pytest.mark.parametrize("seed", range(20))
def test_matching_cost_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    det, ais = _random_scene(rng, rng.integers(0, 7), rng.integers(1, 7))
    res = correlate(det, ais, T0)
    gate = GateParams()
    radii = [gate.radius((a.timestamp - T0).total_seconds()) for a in sorted(ais, key=lambda a: a.vessel_id)]
    pts = [a.geo for a in sorted(ais, key=lambda a: a.vessel_id)]
    oracle = brute_force_lap(build_cost_matrix(det, pts, radii)) if det else None
    if oracle is not None:
        assert len(res.matches) == oracle.cardinality
        assert res.total_cost == pytest.approx(oracle.total_cost, abs=1e-6)
    by_vid = {a.vessel_id: a for a in ais}
    for d, v, dist in res.matches:
        a = by_vid[v]
        assert dist <= gate.radius((a.timestamp - T0).total_seconds())
        assert dist == pytest.approx(haversine(det[d], a.geo))
    assert len({d for d, _, _ in res.matches}) == len(res.matches)
    assert len({v for _, v, _ in res.matches}) == len(res.matches)
    assert len(res.matches) + len(res.dark_detections) == len(det)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_far_track_only_changes_unmatched_ais(seed):
    rng = np.random.default_rng(seed)
    det, ais = _random_scene(rng, 5, 5)
    base = correlate(det, ais, T0)
    more = correlate(det, ais + [report("zz-far", -40, -120)], T0)
    assert more.matches == base.matches
    assert more.dark_detections == base.dark_detections
    assert more.unmatched_ais == base.unmatched_ais + ["zz-far"]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), small=st.floats(10, 3000), extra=st.floats(0, 3000))
def test_shrinking_gate_never_adds_matches(seed, small, extra):
    rng = np.random.default_rng(seed)
    det, ais = _random_scene(rng, 6, 6)
    tight = correlate(det, ais, T0, GateParams(small, 1.0))
    loose = correlate(det, ais, T0, GateParams(small + extra, 1.0))
    assert len(tight.matches) <= len(loose.matches)


def test_detections_accept_objects_with_geo():
    class Det:
        geo = GeoPoint(0, 0)

    res = correlate([Det()], [report("a", 0, 0)], T0)
    assert res.matches == [(0, "a", 0.0)]


def test_ais_json_round_trip(tmp_path):
    rows = [{"mmsi": "367000001", "ts": "2023-10-01T01:00:00Z", "lat": 1.5, "lon": -2.5,
             "sog_knots": 10.0, "cog_deg": 45.0},
            {"mmsi": "367000002", "ts": "2023-10-01T01:05:00Z", "lat": 1.0, "lon": 2.0}]
    path = tmp_path / "ais.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    got = read_ais(path)
    assert got[0].speed_over_ground == pytest.approx(10 * 1852 / 3600)
    assert got[1].speed_over_ground is None
    assert read_ais(write_ais(got, tmp_path / "b.jsonl")) == got


def test_bad_ais_line_reports_line_number(tmp_path):
    path = tmp_path / "ais.jsonl"
    path.write_text('{"mmsi":"1","ts":"2023-10-01T00:00:00Z","lat":0,"lon":0}\n{"mmsi":"2"}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_ais(path)


def test_store_snapshot_is_isolated_from_later_writes():
    store = AisStore([report("a", 0, 0, 0)])
    snap = store.snapshot()
    store.add([report("a", 0, 1, 60), report("b", 1, 1, 0)])
    assert list(snap) == ["a"] and len(snap["a"]) == 1
    assert len(store) == 3
    assert [p.geo.lon for p in store.snapshot()["a"]] == [0.0, 1.0]


def test_store_keeps_tracks_sorted_under_concurrent_adds():
    store = AisStore()

    def writer(k):
        store.add([report("a", 0, 0, float(t)) for t in range(k, 400, 4)])

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    times = [p.timestamp for p in store.snapshot()["a"]]
    assert len(times) == 400 and times == sorted(times)


def test_destination_point_distance():
    start = GeoPoint(45, 10)
    for brg, dist in itertools.product((0, 45, 200), (1.0, 500.0, 20_000.0)):
        assert haversine(start, destination_point(start, brg, dist)) == pytest.approx(dist, rel=1e-9)
