"""Tracking-by-detection loop with Siamese position updates between detector frames.

Every ``delta_us`` each live tracklet re-localises itself by correlating its
template against a search crop of the newest voxel. Every ``tau_us`` the predicted
boxes are matched to detections (Hungarian on corner Hausdorff distances), and
tracklets are spawned, confirmed, coasted or removed.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .events import (
    SEARCH_SIZE, TEMPLATE_SIZE, Box, EventStream, EventVoxel, SubVoxel, crop_rescale, crop_side,
    voxelize,
)
from .mot import LogRow, TrackingLog, read_rows
from .siamese import ScoreMap, SiameseTracker, decode_position, subvoxel_input

log = logging.getLogger(__name__)

TENTATIVE, CONFIRMED, REMOVED = "tentative", "confirmed", "removed"
# stands in for an infinite cost; the solver needs finite entries
FORBIDDEN = 1e12


@dataclass
class Detection:
    box: Box
    class_id: int = 0
    confidence: float = 1.0
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class Tracklet:
    id: int
    box: Box
    class_id: int = 0
    template: SubVoxel | None = None
    template_feat: torch.Tensor | None = None
    peak_score: float = 0.0
    hits: int = 1
    misses: int = 0
    state: str = TENTATIVE
    failed: bool = False  # last estimator call raised; box was held

    @property
    def live(self) -> bool:
        return self.state != REMOVED


@dataclass
class TrackerConfig:
    delta_us: int = 10_000
    tau_us: int = 50_000
    voxel_bins: int = 100
    granularity_us: int = 10_000
    gate_distance: float | None = None  # px; None means 0.1 x image diagonal
    min_validate_score: float = 0.30
    confirm_hits: int = 3
    max_misses: int = 100
    template_context: float = 2.0
    search_context: float = 4.0
    hold_on_flat_map: bool = False
    drop_outside: bool = True  # remove tracklets whose box has left the sensor

    def __post_init__(self):
        if self.delta_us < 1 or self.tau_us % self.delta_us:
            raise ValueError("tau_us must be a positive multiple of delta_us")
        if self.confirm_hits < 1 or self.max_misses < 1:
            raise ValueError("confirm_hits and max_misses must be >= 1")

    @property
    def steps_per_frame(self) -> int:
        return self.tau_us // self.delta_us

    def gate(self, width: int, height: int) -> float:
        if self.gate_distance is not None:
            return self.gate_distance
        return 0.1 * float(np.hypot(width, height))


def hausdorff(box_a: Box, box_b: Box) -> float:
    """Symmetric Hausdorff distance between the two boxes' corner sets."""
    d = np.linalg.norm(box_a.corners()[:, None, :] - box_b.corners()[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class Association:
    matches: list  # (track index, detection index)
    unmatched_tracks: list
    unmatched_detections: list
    cost: np.ndarray = field(repr=False, default=None)


def associate(predictions: Sequence[tuple[Tracklet, Box]], detections: Sequence[Detection],
              config: TrackerConfig, gate: float) -> Association:
    """Single-round Hungarian matching; gated and validated pairs are dismissed."""
    n, m = len(predictions), len(detections)
    cost = np.zeros((n, m))
    for i, (tr, box) in enumerate(predictions):
        for j, det in enumerate(detections):
            cost[i, j] = FORBIDDEN if tr.class_id != det.class_id else hausdorff(box, det.box)
    matches = []
    for i, j in solve_assignment(cost):
        if cost[i, j] >= FORBIDDEN or cost[i, j] > gate:
            continue
        if predictions[i][0].peak_score < config.min_validate_score:
            continue
        matches.append((i, j))
    mt = {i for i, _ in matches}
    md = {j for _, j in matches}
    return Association(
        matches,
        [i for i in range(n) if i not in mt],
        [j for j in range(m) if j not in md],
        cost,
    )


class Estimator(Protocol):
    def template(self, voxel: EventVoxel, box: Box) -> tuple[SubVoxel, torch.Tensor]: ...

    def locate(self, tracklet: Tracklet, voxel: EventVoxel) -> tuple[Box, float, ScoreMap]: ...


class SiameseEstimator:
    """Wraps a trained :class:`SiameseTracker` for inference."""

    def __init__(self, model: SiameseTracker, template_context: float = 2.0, search_context: float = 4.0,
                 hold_on_flat_map: bool = False):
        self.model = model.eval()
        self.template_context = template_context
        self.search_context = search_context
        self.hold_on_flat_map = hold_on_flat_map
        self.calls = 0
        self._dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def template(self, voxel, box):
        sub = crop_rescale(voxel, box, self.template_context, TEMPLATE_SIZE)
        return sub, self.model.embed(subvoxel_input(sub, self._dtype))

    @torch.no_grad()
    def locate(self, tracklet, voxel):
        self.calls += 1
        box = tracklet.box
        search = crop_rescale(voxel, box, self.search_context, SEARCH_SIZE)
        feat = self.model.embed(subvoxel_input(search, self._dtype))
        score = ScoreMap(self.model.head(tracklet.template_feat, feat)[0])
        if self.hold_on_flat_map and bool((score.values == score.values.flatten()[0]).all()):
            peak = float(torch.sigmoid(score.values.flatten()[0]))
            return box, peak, score
        new_box, peak = decode_position(score, box, crop_side(box, self.search_context))
        return new_box, peak, score


def step_track(tracklets: Sequence[Tracklet], voxel: EventVoxel, estimator: Estimator) -> list[Box]:
    """One Siamese update for every live tracklet; a failing estimator holds that box."""
    out = []
    for tr in tracklets:
        if not tr.live:
            out.append(tr.box)
            continue
        try:
            box, peak, _ = estimator.locate(tr, voxel)
        except Exception as err:  # one bad crop must not stop the others
            log.warning("estimator failed on tracklet %d: %s", tr.id, err)
            tr.failed = True
            out.append(tr.box)
            continue
        tr.box, tr.peak_score, tr.failed = box, peak, False
        out.append(box)
    return out


def _inside(box: Box, width: int, height: int) -> bool:
    return box.right > 0 and box.left < width and box.bottom > 0 and box.top < height


class Tracker:
    """Tracklet state for one sequence; ids start at 1 and are never reused."""

    def __init__(self, config: TrackerConfig, estimator: Estimator, width: int, height: int):
        self.config = config
        self.estimator = estimator
        self.width, self.height = width, height
        self.tracklets: list[Tracklet] = []
        self.next_id = 1

    @property
    def live(self) -> list[Tracklet]:
        return [t for t in self.tracklets if t.live]

    def step_track(self, voxel: EventVoxel) -> None:
        step_track(self.live, voxel, self.estimator)

    def _refresh(self, tr: Tracklet, voxel: EventVoxel) -> None:
        tr.template, tr.template_feat = self.estimator.template(voxel, tr.box)

    def step_frame(self, frame: int, detections: Sequence[Detection], voxel: EventVoxel) -> list[LogRow]:
        cfg = self.config
        live = self.live
        assoc = associate([(t, t.box) for t in live], detections, cfg, cfg.gate(self.width, self.height))
        for i, j in assoc.matches:
            tr, det = live[i], detections[j]
            tr.box, tr.class_id = det.box, det.class_id
            self._refresh(tr, voxel)
            tr.hits += 1
            tr.misses = 0
            if tr.state == TENTATIVE and tr.hits >= cfg.confirm_hits:
                tr.state = CONFIRMED
        for i in assoc.unmatched_tracks:
            tr = live[i]
            tr.misses += 1
            if tr.state == TENTATIVE:
                tr.hits = 0
            if tr.misses >= cfg.max_misses or (cfg.drop_outside and not _inside(tr.box, self.width, self.height)):
                tr.state = REMOVED
        for j in assoc.unmatched_detections:
            det = detections[j]
            tr = Tracklet(self.next_id, det.box, det.class_id, peak_score=1.0)
            self.next_id += 1
            self._refresh(tr, voxel)
            if tr.hits >= cfg.confirm_hits:
                tr.state = CONFIRMED
            self.tracklets.append(tr)
        self.tracklets = [t for t in self.tracklets if t.live]
        return [
            LogRow(frame, t.id, t.box, round(t.peak_score, 3), t.class_id, 1.0)
            for t in sorted(self.tracklets, key=lambda t: t.id) if t.state == CONFIRMED
        ]


# detection sources ---------------------------------------------------------------

class DetectionSource(Protocol):
    n_frames: int

    def __call__(self, frame: int) -> list[Detection]: ...


class OracleDetections:
    """Groundtruth boxes with optional centre jitter (``sigma_px``) and random
    drop-out (``p_drop``); each frame draws from its own seeded stream."""

    def __init__(self, gt: TrackingLog, tau_us: int = 50_000, sigma_px: float = 0.0, p_drop: float = 0.0,
                 seed: int = 0, n_frames: int | None = None):
        if sigma_px < 0 or not 0 <= p_drop <= 1:
            raise ValueError("sigma_px must be >= 0 and p_drop in [0, 1]")
        self.frames = gt.by_frame()
        self.tau_us = tau_us
        self.sigma_px, self.p_drop, self.seed = sigma_px, p_drop, seed
        self.n_frames = n_frames if n_frames is not None else max(self.frames, default=0)

    def __call__(self, frame):
        rows = self.frames.get(frame, [])
        rng = np.random.default_rng([self.seed, frame])
        keep = rng.random(len(rows)) >= self.p_drop
        jitter = rng.normal(0.0, self.sigma_px, (len(rows), 2)) if self.sigma_px > 0 else np.zeros((len(rows), 2))
        return [
            Detection(r.box.moved(r.box.cx + dx, r.box.cy + dy), r.class_id, min(max(r.conf, 0.0), 1.0),
                      frame * self.tau_us)
            for r, k, (dx, dy) in zip(rows, keep, jitter) if k
        ]


class FileDetections:
    """Detections from a MOT-style CSV (ids ignored)."""

    def __init__(self, path, tau_us: int = 50_000, n_frames: int | None = None):
        self.frames: dict[int, list[Detection]] = {}
        for r in read_rows(path):
            self.frames.setdefault(r.frame, []).append(
                Detection(r.box, r.class_id, min(max(r.conf, 0.0), 1.0), r.frame * tau_us))
        self.n_frames = n_frames if n_frames is not None else max(self.frames, default=0)

    def __call__(self, frame):
        return list(self.frames.get(frame, []))


def run(events: EventStream, detections: DetectionSource | Callable, config: TrackerConfig,
        estimator: Estimator, n_frames: int | None = None,
        on_frame: Callable[[int, Tracker], None] | None = None) -> TrackingLog:
    """Whole-sequence loop: for frame ``f`` (time ``f * tau``) run ``tau/delta``
    Siamese steps on the voxels ending at ``(f-1)*tau + k*delta``, then associate."""
    cfg = config
    horizon = n_frames if n_frames is not None else (int(events.t[-1]) // cfg.tau_us + 1 if len(events) else 0)
    det_frames = getattr(detections, "n_frames", horizon)
    if det_frames < horizon:
        warnings.warn(f"detection source ends at frame {det_frames}, before the events (frame {horizon})")
        horizon = det_frames
    tracker = Tracker(cfg, estimator, events.width, events.height)
    rows = []
    for f in range(1, horizon + 1):
        t_prev = (f - 1) * cfg.tau_us
        n = cfg.steps_per_frame
        for k in range(1, n + 1):
            # the last voxel also serves template refreshes, so it is always built
            if tracker.live or k == n:
                voxel = voxelize(events, t_prev + k * cfg.delta_us, cfg.voxel_bins, cfg.granularity_us)
            if tracker.live:
                tracker.step_track(voxel)
        rows.extend(tracker.step_frame(f, detections(f), voxel))
        if on_frame is not None:
            on_frame(f, tracker)
    return TrackingLog(rows)
