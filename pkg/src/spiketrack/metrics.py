"""CLEAR, IDF1 and HOTA scoring of a TrackingLog against groundtruth.

The matching rules follow the reference TrackEval implementation:

* HOTA matches per frame on IoU weighted by the global alignment score of each
  (gt id, predicted id) pair and sweeps alpha = 0.05, 0.10, ..., 0.95;
* CLEAR matches at IoU >= 0.5 and keeps last frame's pairings when possible;
* IDF1 solves one global bipartite problem between whole identities.

Evaluation is class aware unless ``class_aware=False``: boxes of different
classes never overlap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .events import Box
from .mot import TrackingLog

ALPHAS = np.arange(1, 20) * 0.05
IOU_THRESHOLD = 0.5
EPS = np.finfo(float).eps
TABLE_COLUMNS = ("HOTA", "DetA", "AssA", "MOTA", "IDF1", "FN", "FP", "IDSw")


def box_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.left, b.top, b.right, b.bottom] for b in boxes], dtype=np.float64)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of two box lists; disjoint boxes score exactly 0."""
    a, b = box_array(a), box_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)


def match_frame(pred: list[Box], gt: list[Box], iou_threshold: float = IOU_THRESHOLD,
                bonus: np.ndarray | None = None, sim: np.ndarray | None = None) -> list[tuple[int, int]]:
    """IoU-maximising one-to-one matching; returns ``(pred_index, gt_index)`` pairs.

    ``bonus`` (shape ``[gt, pred]``) is added before solving; CLEAR uses it to keep
    previous pairings. ``sim`` overrides the IoU matrix (``[gt, pred]``).
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if sim is None:
        sim = iou_matrix(gt, pred)
    if sim.size == 0:
        return []
    score = sim.copy() if bonus is None else sim + bonus
    score[sim < iou_threshold - EPS] = 0
    rows, cols = linear_sum_assignment(-score)
    keep = score[rows, cols] > 0
    return [(int(c), int(r)) for r, c in zip(rows[keep], cols[keep])]


@dataclass
class _Frame:
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    sim: np.ndarray  # [gt, pred]


@dataclass
class _Sequence:
    frames: list[_Frame]
    n_gt_ids: int
    n_pred_ids: int
    n_gt_dets: int
    n_pred_dets: int


def _prepare(log: TrackingLog, gt: TrackingLog, class_aware: bool) -> _Sequence:
    gt_index = {k: i for i, k in enumerate(gt.ids())}
    pred_index = {k: i for i, k in enumerate(log.ids())}
    gt_frames, pred_frames = gt.by_frame(), log.by_frame()
    frames = []
    for f in sorted(set(gt_frames) | set(pred_frames)):
        g, p = gt_frames.get(f, []), pred_frames.get(f, [])
        sim = iou_matrix([r.box for r in g], [r.box for r in p])
        if class_aware and sim.size:
            same = np.array([r.class_id for r in g])[:, None] == np.array([r.class_id for r in p])[None, :]
            sim = np.where(same, sim, 0.0)
        frames.append(_Frame(
            np.array([gt_index[r.id] for r in g], dtype=np.int64),
            np.array([pred_index[r.id] for r in p], dtype=np.int64),
            sim,
        ))
    return _Sequence(frames, len(gt_index), len(pred_index), len(gt), len(log))


@dataclass
class ClearCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    idsw: int = 0
    n_gt: int = 0

    @property
    def mota(self) -> float:
        # undefined without groundtruth; reported as NaN
        if self.n_gt == 0:
            return float("nan")
        return 1.0 - (self.fn + self.fp + self.idsw) / self.n_gt

    def __add__(self, o: "ClearCounts") -> "ClearCounts":
        return ClearCounts(self.tp + o.tp, self.fn + o.fn, self.fp + o.fp, self.idsw + o.idsw, self.n_gt + o.n_gt)


def _clear(seq: _Sequence, threshold: float = IOU_THRESHOLD) -> ClearCounts:
    c = ClearCounts(n_gt=seq.n_gt_dets)
    last = np.full(seq.n_gt_ids, -1)  # last matched pred id, ever
    prev = np.full(seq.n_gt_ids, -1)  # pred id matched in the previous frame
    for fr in seq.frames:
        n_g, n_p = len(fr.gt_ids), len(fr.pred_ids)
        if n_g == 0 or n_p == 0:
            c.fn += n_g
            c.fp += n_p
            prev[:] = -1
            continue
        bonus = 1000.0 * (prev[fr.gt_ids][:, None] == fr.pred_ids[None, :])
        pairs = match_frame([], [], threshold, bonus=bonus, sim=fr.sim)
        gi = np.array([g for _, g in pairs], dtype=np.int64)
        pi = np.array([p for p, _ in pairs], dtype=np.int64)
        g_ids, p_ids = fr.gt_ids[gi], fr.pred_ids[pi]
        switched = (last[g_ids] >= 0) & (last[g_ids] != p_ids)
        c.idsw += int(switched.sum())
        last[g_ids] = p_ids
        prev[:] = -1
        prev[g_ids] = p_ids
        c.tp += len(pairs)
        c.fn += n_g - len(pairs)
        c.fp += n_p - len(pairs)
    return c


@dataclass
class IdCounts:
    idtp: int = 0
    idfn: int = 0
    idfp: int = 0

    @property
    def idf1(self) -> float:
        denom = 2 * self.idtp + self.idfp + self.idfn
        return 2 * self.idtp / denom if denom else 1.0

    def __add__(self, o: "IdCounts") -> "IdCounts":
        return IdCounts(self.idtp + o.idtp, self.idfn + o.idfn, self.idfp + o.idfp)


def _identity(seq: _Sequence, threshold: float = IOU_THRESHOLD) -> IdCounts:
    overlap = np.zeros((seq.n_gt_ids, seq.n_pred_ids))
    for fr in seq.frames:
        g, p = np.nonzero(fr.sim >= threshold - EPS)
        np.add.at(overlap, (fr.gt_ids[g], fr.pred_ids[p]), 1)
    idtp = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        idtp = int(overlap[rows, cols].sum())
    return IdCounts(idtp, seq.n_gt_dets - idtp, seq.n_pred_dets - idtp)


@dataclass
class HotaCounts:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    ass_sum: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))  # sum over TPs of the association score

    @property
    def det_a(self) -> np.ndarray:
        return self.tp / np.maximum(1.0, self.tp + self.fn + self.fp)

    @property
    def ass_a(self) -> np.ndarray:
        return self.ass_sum / np.maximum(1.0, self.tp)

    @property
    def hota_alpha(self) -> np.ndarray:
        return np.sqrt(self.det_a * self.ass_a)

    def __add__(self, o: "HotaCounts") -> "HotaCounts":
        return HotaCounts(self.tp + o.tp, self.fn + o.fn, self.fp + o.fp, self.ass_sum + o.ass_sum)


def _hota(seq: _Sequence) -> HotaCounts:
    n_a = len(ALPHAS)
    h = HotaCounts()
    if seq.n_pred_dets == 0 or seq.n_gt_dets == 0:
        h.fn[:] = seq.n_gt_dets
        h.fp[:] = seq.n_pred_dets
        return h
    potential = np.zeros((seq.n_gt_ids, seq.n_pred_ids))
    gt_count = np.zeros((seq.n_gt_ids, 1))
    pred_count = np.zeros((1, seq.n_pred_ids))
    for fr in seq.frames:
        if fr.sim.size:
            denom = fr.sim.sum(0)[None, :] + fr.sim.sum(1)[:, None] - fr.sim
            part = np.zeros_like(fr.sim)
            ok = denom > EPS
            part[ok] = fr.sim[ok] / denom[ok]
            potential[fr.gt_ids[:, None], fr.pred_ids[None, :]] += part
        gt_count[fr.gt_ids] += 1
        pred_count[0, fr.pred_ids] += 1
    alignment = potential / (gt_count + pred_count - potential)

    matches = np.zeros((n_a, seq.n_gt_ids, seq.n_pred_ids))
    for fr in seq.frames:
        n_g, n_p = len(fr.gt_ids), len(fr.pred_ids)
        if n_g == 0 or n_p == 0:
            h.fn += n_g
            h.fp += n_p
            continue
        score = alignment[fr.gt_ids[:, None], fr.pred_ids[None, :]] * fr.sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(ALPHAS):
            ok = fr.sim[rows, cols] >= alpha - EPS
            r, c = rows[ok], cols[ok]
            n = len(r)
            h.tp[a] += n
            h.fn[a] += n_g - n
            h.fp[a] += n_p - n
            if n:
                matches[a, fr.gt_ids[r], fr.pred_ids[c]] += 1
    for a in range(n_a):
        m = matches[a]
        ass = m / np.maximum(1.0, gt_count + pred_count - m)
        h.ass_sum[a] = float((m * ass).sum())
    return h


@dataclass
class MetricReport:
    HOTA: float
    DetA: float
    AssA: float
    MOTA: float
    IDF1: float
    FN: int
    FP: int
    IDSw: int
    hota_alpha: np.ndarray = field(repr=False, default=None)
    deta_alpha: np.ndarray = field(repr=False, default=None)
    assa_alpha: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}


@dataclass
class SequenceCounts:
    clear: ClearCounts
    ident: IdCounts
    hota: HotaCounts

    def __add__(self, o: "SequenceCounts") -> "SequenceCounts":
        return SequenceCounts(self.clear + o.clear, self.ident + o.ident, self.hota + o.hota)

    def report(self) -> MetricReport:
        h = self.hota
        if h.tp.sum() + h.fn.sum() + h.fp.sum() == 0:
            # nothing to score on either side: vacuously perfect
            ones = np.ones(len(ALPHAS))
            return MetricReport(1.0, 1.0, 1.0, self.clear.mota, self.ident.idf1, 0, 0, 0, ones, ones, ones)
        return MetricReport(
            HOTA=float(h.hota_alpha.mean()),
            DetA=float(h.det_a.mean()),
            AssA=float(h.ass_a.mean()),
            MOTA=self.clear.mota,
            IDF1=self.ident.idf1,
            FN=self.clear.fn,
            FP=self.clear.fp,
            IDSw=self.clear.idsw,
            hota_alpha=h.hota_alpha,
            deta_alpha=h.det_a,
            assa_alpha=h.ass_a,
        )


def sequence_counts(log: TrackingLog, gt: TrackingLog, class_aware: bool = True) -> SequenceCounts:
    seq = _prepare(log, gt, class_aware)
    return SequenceCounts(_clear(seq), _identity(seq), _hota(seq))


def clear_metrics(log: TrackingLog, gt: TrackingLog, class_aware: bool = True) -> tuple[float, int, int, int]:
    """``(MOTA, FP, FN, IDSw)`` at IoU 0.5."""
    c = _clear(_prepare(log, gt, class_aware))
    return c.mota, c.fp, c.fn, c.idsw


def idf1(log: TrackingLog, gt: TrackingLog, class_aware: bool = True) -> float:
    return _identity(_prepare(log, gt, class_aware)).idf1


def hota(log: TrackingLog, gt: TrackingLog, class_aware: bool = True) -> tuple[float, float, float]:
    r = evaluate(log, gt, class_aware)
    return r.HOTA, r.DetA, r.AssA


def evaluate(log: TrackingLog, gt: TrackingLog, class_aware: bool = True) -> MetricReport:
    return sequence_counts(log, gt, class_aware).report()


def combined(counts: list[SequenceCounts], pool: bool = True) -> MetricReport:
    """Aggregate several sequences.

    ``pool`` sums the underlying counts before forming ratios; otherwise the
    per-sequence ratio metrics are averaged and counts summed.
    """
    if not counts:
        raise ValueError("nothing to combine")
    if pool:
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        return total.report()
    reps = [c.report() for c in counts]
    mean = lambda k: float(np.mean([getattr(r, k) for r in reps]))
    return MetricReport(mean("HOTA"), mean("DetA"), mean("AssA"), mean("MOTA"), mean("IDF1"),
                        sum(r.FN for r in reps), sum(r.FP for r in reps), sum(r.IDSw for r in reps))


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return f"{int(v):,}"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{100 * v:.1f}"


def format_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, ratio metrics in percent."""
    header = ("Sequence",) + TABLE_COLUMNS
    body = [(name,) + tuple(_cell(getattr(r, k)) for k in TABLE_COLUMNS) for name, r in reports.items()]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_keyvalue(reports: dict[str, MetricReport]) -> str:
    """One ``sequence.metric=value`` line per entry, full precision."""
    lines = []
    for name, r in reports.items():
        for k in TABLE_COLUMNS:
            v = getattr(r, k)
            lines.append(f"{name}.{k}={v if isinstance(v, (int, np.integer)) else repr(float(v))}")
    return "\n".join(lines) + "\n"


def parse_keyvalue(text: str) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = line.split("=", 1)
        name, metric = key.rsplit(".", 1)
        out.setdefault(name, {})[metric] = float(value)
    return out

