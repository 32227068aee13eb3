import itertools
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spiketrack.events import Box, EventStream, EventVoxel, crop_rescale, voxelize
from spiketrack.mot import LogRow, TrackingLog, write_mot
from spiketrack.siamese import BackboneConfig, ScoreMap, SiameseTracker
from spiketrack.synth import generate, scenario
from spiketrack.tracker import (
    CONFIRMED, REMOVED, TENTATIVE, Detection, FileDetections, OracleDetections, SiameseEstimator,
    Tracker, TrackerConfig, Tracklet, associate, hausdorff, run, solve_assignment, step_track,
)


class HoldEstimator:
    """Keeps every box where it is; counts calls."""

    def __init__(self, peak=0.9):
        self.calls = 0
        self.peak = peak

    def template(self, voxel, box):
        return None, None

    def locate(self, tracklet, voxel):
        self.calls += 1
        return tracklet.box, self.peak, None


class FlakyEstimator(HoldEstimator):
    def locate(self, tracklet, voxel):
        self.calls += 1
        if tracklet.id == 2:
            raise RuntimeError("boom")
        return tracklet.box.moved(tracklet.box.cx + 1, tracklet.box.cy), 0.7, None


def _voxel(w=100, h=80, bins=4):
    return EventVoxel(np.zeros((2, h, w, bins), np.uint8), 40_000, 10_000)


def _box(x, y, w=10, h=8):
    return Box(x, y, w, h)


# Hausdorff -----------------------------------------------------------------------

def test_hausdorff_examples():
    assert hausdorff(_box(5, 5), _box(5, 5)) == 0
    assert hausdorff(_box(5, 5), _box(8, 9)) == pytest.approx(5)


box_st = st.builds(Box, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40))


@settings(max_examples=200, deadline=None)
@given(a=box_st, b=box_st)
def test_hausdorff_matches_brute_force(a, b):
    ca, cb = a.corners(), b.corners()
    d = [[float(np.hypot(*(p - q))) for q in cb] for p in ca]
    directed_ab = max(min(row) for row in d)
    directed_ba = max(min(d[i][j] for i in range(4)) for j in range(4))
    assert hausdorff(a, b) == pytest.approx(max(directed_ab, directed_ba), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(a=box_st, b=box_st, c=box_st)
def test_hausdorff_metric_axioms(a, b, c):
    assert hausdorff(a, b) == pytest.approx(hausdorff(b, a), abs=1e-9)
    assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-9
    assert hausdorff(a, a) == 0


# assignment ----------------------------------------------------------------------

def _brute(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def test_assignment_example():
    pairs = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert sorted(pairs) == [(0, 0), (1, 1)]


def test_assignment_optimal_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = rng.integers(1, 7, 2)
        cost = rng.uniform(0, 100, (n, m))
        pairs = solve_assignment(cost)
        assert len(pairs) == min(n, m)
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(_brute(cost), abs=1e-9)


def _tracks(boxes, cls=0, peak=0.9):
    return [(Tracklet(i + 1, b, cls, peak_score=peak), b) for i, b in enumerate(boxes)]


def test_associate_gates_and_validates():
    cfg = TrackerConfig()
    preds = _tracks([_box(10, 10)])
    far = [Detection(_box(80, 60))]
    a = associate(preds, far, cfg, gate=20)
    assert a.matches == [] and a.unmatched_tracks == [0] and a.unmatched_detections == [0]
    near = [Detection(_box(12, 11))]
    assert associate(preds, near, cfg, gate=20).matches == [(0, 0)]
    weak = _tracks([_box(10, 10)], peak=0.1)
    a = associate(weak, near, cfg, gate=20)
    assert a.matches == [] and a.unmatched_detections == [0]


def test_associate_forbids_class_mismatch():
    cfg = TrackerConfig()
    preds = _tracks([_box(10, 10)], cls=0)
    a = associate(preds, [Detection(_box(10, 10), class_id=1)], cfg, gate=1e9)
    assert a.matches == []


def test_associate_prefers_global_optimum():
    cfg = TrackerConfig()
    preds = _tracks([_box(10, 10), _box(30, 10)])
    dets = [Detection(_box(31, 10)), Detection(_box(9, 10))]
    assert sorted(associate(preds, dets, cfg, gate=50).matches) == [(0, 1), (1, 0)]


# step_track ----------------------------------------------------------------------

def test_step_track_invokes_estimator_once_per_tracklet_and_survives_failure():
    trs = [Tracklet(i, _box(20 + 10 * i, 20)) for i in (1, 2, 3)]
    est = FlakyEstimator()
    step_track(trs, _voxel(), est)
    assert est.calls == 3
    assert trs[1].failed and trs[1].box == _box(40, 20)
    assert trs[0].box.cx == 31 and trs[2].box.cx == 51


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    return SiameseTracker(BackboneConfig.miniature(), seed=0)


def test_zero_voxel_follows_tie_rule(untrained):
    est = SiameseEstimator(untrained)
    vox = EventVoxel(np.zeros((2, 240, 320, 3), np.uint8), 30_000, 10_000)
    box = Box(160, 120, 30, 20)
    tr = Tracklet(1, box)
    _, tr.template_feat = est.template(vox, box)
    step_track([tr], vox, est)
    assert tr.peak_score == pytest.approx(0.5)
    cell = 8 * 4 * 30 / 255
    assert tr.box.cx == pytest.approx(160 - 8 * cell) and tr.box.cy == pytest.approx(120 - 8 * cell)
    hold = SiameseEstimator(untrained, hold_on_flat_map=True)
    tr2 = Tracklet(2, box, template_feat=tr.template_feat)
    step_track([tr2], vox, hold)
    assert tr2.box == box


def test_planted_template_is_found(untrained):
    # a lone blob in the search crop: the correlation peaks where the template's
    # blob lines up, so the box lands on the plant at a whole number of cells
    rng = np.random.default_rng(1)
    box = Box(160, 120, 32, 32)  # search side 128, template side 64
    cell = 8 * 128 / 255
    patch = (rng.random((2, 24, 24, 6)) < 0.5).astype(np.uint8)

    def scene(cx, cy):
        data = np.zeros((2, 240, 320, 6), np.uint8)
        data[:, cy - 12:cy + 12, cx - 12:cx + 12] = patch
        return EventVoxel(data, 60_000, 10_000)

    est = SiameseEstimator(untrained)
    _, feat = est.template(scene(160, 120), box)
    dx, dy = round(3 * cell), round(-2 * cell)
    tr = Tracklet(1, box, template_feat=feat)
    new, peak, score = est.locate(tr, scene(160 + dx, 120 + dy))
    assert abs(new.cx - box.cx - dx) <= cell / 2 + 1e-9
    assert abs(new.cy - box.cy - dy) <= cell / 2 + 1e-9


# lifecycle -----------------------------------------------------------------------

def _tracker(**kw):
    return Tracker(TrackerConfig(**kw), HoldEstimator(), 320, 240)


def test_confirmation_on_third_consecutive_detection():
    tk = _tracker()
    det = [Detection(_box(50, 50))]
    states = []
    for f in (1, 2, 3):
        rows = tk.step_frame(f, det, _voxel())
        states.append(tk.tracklets[0].state)
        assert (len(rows) == 1) == (f == 3)
    assert states == [TENTATIVE, TENTATIVE, CONFIRMED]
    assert tk.tracklets[0].id == 1


def test_tentative_gap_resets_hits():
    tk = _tracker()
    det = [Detection(_box(50, 50))]
    tk.step_frame(1, det, _voxel())
    tk.step_frame(2, det, _voxel())
    tk.step_frame(3, [], _voxel())
    assert tk.tracklets[0].hits == 0
    for f in (4, 5):
        tk.step_frame(f, det, _voxel())
        assert tk.tracklets[0].state == TENTATIVE
    tk.step_frame(6, det, _voxel())
    assert tk.tracklets[0].state == CONFIRMED and len(tk.tracklets) == 1


def test_removal_on_hundredth_miss():
    tk = _tracker()
    det = [Detection(_box(50, 50))]
    for f in (1, 2, 3):
        tk.step_frame(f, det, _voxel())
    for k in range(1, 101):
        rows = tk.step_frame(3 + k, [], _voxel())
        if k < 100:
            assert tk.tracklets[0].state == CONFIRMED and tk.tracklets[0].misses == k
            assert len(rows) == 1
        else:
            assert tk.tracklets == [] and rows == []


def test_ids_increase_and_are_not_reused():
    tk = _tracker(max_misses=1)
    seen = []
    for f in range(1, 9):
        det = [Detection(_box(30 + 35 * (f % 4), 50))] if f % 2 else []
        tk.step_frame(f, det, _voxel())
        seen.extend(t.id for t in tk.tracklets if t.id not in seen)
    assert seen == sorted(seen) and len(seen) == len(set(seen)) == 4


def test_coasting_through_occlusion_keeps_id():
    tk = _tracker()
    rows = []
    for f in range(1, 21):
        det = [] if 8 <= f < 13 else [Detection(_box(100 + f, 80))]
        rows += tk.step_frame(f, det, _voxel())
    ids = {r.id for r in rows}
    assert ids == {1}
    assert [r.frame for r in rows] == list(range(3, 21))


def test_log_never_carries_tentative_ids():
    rng = np.random.default_rng(3)
    tk = _tracker(max_misses=3)
    for f in range(1, 60):
        det = [Detection(_box(*rng.uniform(20, 200, 2))) for _ in range(rng.integers(0, 4))]
        rows = tk.step_frame(f, det, _voxel())
        confirmed = {t.id for t in tk.tracklets if t.state == CONFIRMED}
        assert {r.id for r in rows} == confirmed


# run -----------------------------------------------------------------------------

def _empty_stream(n_frames=6):
    return EventStream(320, 240, [n_frames * 50_000 - 1], [0], [0], [1])


def test_run_with_no_detections_is_empty():
    out = run(_empty_stream(), lambda f: [], TrackerConfig(voxel_bins=2), HoldEstimator())
    assert len(out) == 0


def test_run_steps_each_tracklet_tau_over_delta_times():
    gt = TrackingLog([LogRow(f, 1, _box(100, 100)) for f in range(1, 7)])
    est = HoldEstimator()
    counts = []

    def watch(f, tk):
        counts.append(est.calls)

    out = run(_empty_stream(), OracleDetections(gt), TrackerConfig(voxel_bins=2), est, on_frame=watch)
    assert np.diff(counts).tolist() == [5] * 5
    assert [r.frame for r in out] == [3, 4, 5, 6]


def test_run_warns_when_detections_end_early():
    gt = TrackingLog([LogRow(f, 1, _box(100, 100)) for f in range(1, 4)])
    with pytest.warns(UserWarning):
        out = run(_empty_stream(), OracleDetections(gt), TrackerConfig(voxel_bins=2), HoldEstimator())
    assert max(r.frame for r in out) == 3


def test_oracle_dropout_and_jitter_are_seeded():
    gt = TrackingLog([LogRow(f, i, _box(50 * i, 100)) for f in range(1, 30) for i in (1, 2, 3)])
    a = OracleDetections(gt, sigma_px=2.0, p_drop=0.3, seed=4)
    b = OracleDetections(gt, sigma_px=2.0, p_drop=0.3, seed=4)
    assert [a(f) for f in range(1, 30)] == [b(f) for f in range(1, 30)]
    kept = sum(len(a(f)) for f in range(1, 30))
    assert 0.5 < kept / 87 < 0.9
    assert OracleDetections(gt)(1) == [Detection(r.box, 0, 1.0, 50_000) for r in gt.by_frame()[1]]


def test_file_detections(tmp_path):
    rows = [LogRow(1, -1, _box(10, 10)), LogRow(2, -1, _box(12, 10), 0.8, 2)]
    rows = [LogRow(r.frame, -1 - k, r.box, r.conf, r.class_id) for k, r in enumerate(rows)]
    write_mot(tmp_path / "d.csv", rows)
    src = FileDetections(tmp_path / "d.csv")
    assert src.n_frames == 2 and src(2)[0].class_id == 2 and src(3) == []


def test_untrained_estimator_static_object_keeps_one_id(untrained):
    spec = scenario("single-static", 0)
    ev, gt = generate(spec)
    cfg = TrackerConfig(voxel_bins=5, gate_distance=1e6)
    out = run(ev, OracleDetections(gt, n_frames=8), cfg, SiameseEstimator(untrained), n_frames=8)
    assert out.ids() == [1]
    assert out.frames() == list(range(3, 9))


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(delta_us=15_000, tau_us=50_000)
    assert TrackerConfig().steps_per_frame == 5
    assert TrackerConfig().gate(320, 240) == pytest.approx(40.0)
    with pytest.raises(ValueError):
        Detection(_box(1, 1), confidence=1.5)
