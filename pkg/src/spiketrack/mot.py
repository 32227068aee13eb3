"""MOTChallenge-style CSV logs: ``frame,id,bb_left,bb_top,w,h,conf,class,vis``.

Frames are numbered from 1. Raw detection files carry ``id = -1``.
"""
from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

from .events import Box


class MotFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LogRow:
    frame: int
    id: int
    box: Box
    conf: float = 1.0
    class_id: int = 0
    vis: float = 1.0


class TrackingLog:
    """Rows of one sequence, kept sorted by (frame, id)."""

    def __init__(self, rows: Iterable[LogRow] = ()):
        rows = sorted(rows, key=lambda r: (r.frame, r.id))
        seen = set()
        for r in rows:
            if r.frame < 1:
                raise ValueError(f"frame numbers start at 1, got {r.frame}")
            key = (r.frame, r.id)
            if key in seen:
                raise ValueError(f"duplicate (frame, id) = {key}")
            seen.add(key)
        self.rows: list[LogRow] = rows

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, TrackingLog) and self.rows == other.rows

    def ids(self) -> list[int]:
        return sorted({r.id for r in self.rows})

    def frames(self) -> list[int]:
        return sorted({r.frame for r in self.rows})

    def by_frame(self) -> dict[int, list[LogRow]]:
        out = defaultdict(list)
        for r in self.rows:
            out[r.frame].append(r)
        return dict(out)

    def track(self, ident: int) -> list[LogRow]:
        return [r for r in self.rows if r.id == ident]

    def without(self, frame: int, ident: int) -> "TrackingLog":
        return TrackingLog(r for r in self.rows if (r.frame, r.id) != (frame, ident))


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def format_rows(rows: Iterable[LogRow]) -> str:
    buf = io.StringIO()
    for r in rows:
        left, top, w, h = r.box.ltwh()
        buf.write(
            f"{r.frame},{r.id},{_fmt(left)},{_fmt(top)},{_fmt(w)},{_fmt(h)},"
            f"{_fmt(r.conf)},{r.class_id},{_fmt(r.vis)}\n"
        )
    return buf.getvalue()


def write_mot(path: str | os.PathLike, rows: Iterable[LogRow]) -> None:
    with open(path, "w", newline="") as f:
        f.write(format_rows(rows))


def parse_rows(lines: Iterable[str]) -> list[LogRow]:
    out = []
    for lineno, fields in enumerate(csv.reader(lines), start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) not in (7, 8, 9):
            raise MotFormatError(f"expected 9 fields, got {len(fields)}", lineno)
        try:
            frame, ident = int(fields[0]), int(fields[1])
            left, top, w, h, conf = (float(x) for x in fields[2:7])
            cls = int(float(fields[7])) if len(fields) > 7 else 0
            vis = float(fields[8]) if len(fields) > 8 else 1.0
        except ValueError as err:
            raise MotFormatError(str(err), lineno) from None
        if frame < 1:
            raise MotFormatError(f"frame must be >= 1, got {frame}", lineno)
        if not (w > 0 and h > 0):
            raise MotFormatError(f"box extents must be positive, got w={w} h={h}", lineno)
        out.append(LogRow(frame, ident, Box.from_ltwh(left, top, w, h), conf, cls, vis))
    return out


def read_rows(path: str | os.PathLike) -> list[LogRow]:
    with open(path, newline="") as f:
        return parse_rows(f)


def read_mot(path: str | os.PathLike) -> TrackingLog:
    rows = read_rows(path)
    try:
        return TrackingLog(rows)
    except ValueError as err:
        raise MotFormatError(f"{path}: {err}") from None
