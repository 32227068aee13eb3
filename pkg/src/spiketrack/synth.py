"""Synthetic event scenes: rectangles on parametric paths emit contour events.

Brightness change is approximated by contour-normal velocity. Every 0.5 ms tick
each contour pixel of a moving rectangle fires with probability
``contrast * |v_n| * tick`` (leading edges positive, trailing negative). Pixels
hidden behind an object with higher z emit nothing. Background pixels carry
Bernoulli noise, and camera ego-motion drags a random static texture of
rectangles across the sensor.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .events import Box, EventStream
from .mot import LogRow, TrackingLog

TICK_US = 500
GT_PERIOD_US = 50_000
MIN_AREA_FRACTION = 0.002
MIN_VISIBILITY = 0.1


@dataclass(frozen=True)
class Trajectory:
    """``linear``: piecewise-linear through ``waypoints`` ``[(t_us, x, y), ...]``,
    held constant outside their time span.

    ``sine``: ``origin + velocity*t + amplitude*sin(2*pi*t/period + phase)`` per axis.
    """

    kind: str = "linear"
    waypoints: tuple = ((0, 0.0, 0.0),)
    origin: tuple = (0.0, 0.0)
    velocity: tuple = (0.0, 0.0)  # px/s
    amplitude: tuple = (0.0, 0.0)
    period_us: float = 1e6
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "sine"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "linear":
            t = [w[0] for w in self.waypoints]
            if not t or any(b <= a for a, b in zip(t, t[1:])):
                raise ValueError("waypoint times must be strictly increasing")
        if not self.period_us > 0:
            raise ValueError("period must be positive")
        vals = [v for w in self.waypoints for v in w] + list(self.origin + self.velocity + self.amplitude)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("trajectory parameters must be finite")

    @classmethod
    def line(cls, *points) -> "Trajectory":
        return cls("linear", tuple(tuple(float(v) for v in p) for p in points))

    def positions(self, t_us) -> np.ndarray:
        """``[len(t_us), 2]`` centre positions."""
        t = np.asarray(t_us, dtype=np.float64)
        if self.kind == "linear":
            w = np.asarray(self.waypoints, dtype=np.float64)
            return np.stack([np.interp(t, w[:, 0], w[:, 1]), np.interp(t, w[:, 0], w[:, 2])], axis=-1)
        s = t * 1e-6
        wave = np.sin(2 * math.pi * t / self.period_us + self.phase)
        return np.stack([
            self.origin[0] + self.velocity[0] * s + self.amplitude[0] * wave,
            self.origin[1] + self.velocity[1] * s + self.amplitude[1] * wave,
        ], axis=-1)

    def position(self, t_us: float) -> tuple[float, float]:
        x, y = self.positions(np.array([t_us]))[0]
        return float(x), float(y)


@dataclass(frozen=True)
class ObjectSpec:
    track_id: int
    class_id: int
    size: tuple  # (w, h) px
    trajectory: Trajectory
    contrast: float = 1.0  # events per contour pixel per pixel of normal motion
    z: int = 0

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise ValueError("object size must be positive")
        if self.contrast < 0:
            raise ValueError("contrast must be non-negative")

    def box(self, t_us: float) -> Box:
        cx, cy = self.trajectory.position(t_us)
        return Box(cx, cy, float(self.size[0]), float(self.size[1]))


@dataclass(frozen=True)
class SceneSpec:
    width: int = 320
    height: int = 240
    duration_us: int = 2_000_000
    objects: tuple = ()
    noise_rate: float = 0.0  # events per pixel per second
    ego_motion: tuple = (0.0, 0.0)  # px/s
    texture_density: float = 4e-4  # texture rectangles per square pixel
    texture_contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.duration_us < 0:
            raise ValueError("bad geometry or duration")
        if self.noise_rate < 0 or self.texture_density < 0 or self.texture_contrast < 0:
            raise ValueError("rates must be non-negative")
        ids = [o.track_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object track ids must be unique")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        objs = []
        for o in d.get("objects", ()):
            o = dict(o)
            tr = dict(o["trajectory"])
            tr["waypoints"] = tuple(tuple(w) for w in tr.get("waypoints", ((0, 0.0, 0.0),)))
            for k in ("origin", "velocity", "amplitude"):
                if k in tr:
                    tr[k] = tuple(tr[k])
            o["trajectory"] = Trajectory(**tr)
            o["size"] = tuple(o["size"])
            objs.append(ObjectSpec(**o))
        d["objects"] = tuple(objs)
        d["ego_motion"] = tuple(d.get("ego_motion", (0.0, 0.0)))
        return cls(**d)


def save_spec(spec: SceneSpec, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_spec(path: str | os.PathLike) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_dict(json.load(f))


# contour sampling ----------------------------------------------------------------

def contour_offsets(w: float, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Contour sample points relative to the box centre, one per pixel of edge
    length, with the outward normal of their edge: ``(dx, dy, nx, ny)``."""
    ny_pts = max(1, math.ceil(h))
    nx_pts = max(1, math.ceil(w))
    ys = -h / 2 + (np.arange(ny_pts) + 0.5) * (h / ny_pts)
    xs = -w / 2 + (np.arange(nx_pts) + 0.5) * (w / nx_pts)
    dx = np.concatenate([np.full(ny_pts, -w / 2), np.full(ny_pts, w / 2), xs, xs])
    dy = np.concatenate([ys, ys, np.full(nx_pts, -h / 2), np.full(nx_pts, h / 2)])
    nx = np.concatenate([np.full(ny_pts, -1.0), np.full(ny_pts, 1.0), np.zeros(2 * nx_pts)])
    ny = np.concatenate([np.zeros(2 * ny_pts), np.full(nx_pts, -1.0), np.full(nx_pts, 1.0)])
    return dx, dy, nx, ny


def _pixel(v: np.ndarray, limit: int) -> np.ndarray:
    # a point exactly on the far edge of the sensor belongs to the last pixel row
    return np.floor(np.minimum(v, np.nextafter(limit, 0))).astype(np.int64)


def _inside(px, py, boxes: np.ndarray) -> np.ndarray:
    """``[points, boxes]``: pixel centre lies inside the box ``(l, t, r, b)``."""
    cx, cy = px[:, None] + 0.5, py[:, None] + 0.5
    return (cx >= boxes[None, :, 0]) & (cx < boxes[None, :, 2]) & (cy >= boxes[None, :, 1]) & (cy < boxes[None, :, 3])


def _ltrb(centres: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    half = sizes / 2
    return np.concatenate([centres - half, centres + half], axis=1)


def visibility(spec: SceneSpec, obj: ObjectSpec, t_us: float) -> float:
    """Visible (in-frame and unoccluded) contour samples over all contour samples."""
    box = obj.box(t_us)
    dx, dy, _, _ = contour_offsets(box.w, box.h)
    x, y = box.cx + dx, box.cy + dy
    ok = (x >= 0) & (x <= spec.width) & (y >= 0) & (y <= spec.height)
    px, py = _pixel(x, spec.width), _pixel(y, spec.height)
    front = [o.box(t_us) for o in spec.objects if o.z > obj.z]
    if front:
        ltrb = np.array([[b.left, b.top, b.right, b.bottom] for b in front])
        ok &= ~_inside(px, py, ltrb).any(axis=1)
    return float(ok.mean())


def clip_box(box: Box, width: int, height: int) -> Box | None:
    l, t = max(box.left, 0.0), max(box.top, 0.0)
    r, b = min(box.right, float(width)), min(box.bottom, float(height))
    if r <= l or b <= t:
        return None
    return Box.from_ltwh(l, t, r - l, b - t)


def _texture(spec: SceneSpec, rng: np.random.Generator):
    vx, vy = spec.ego_motion
    if vx == 0 and vy == 0 or spec.texture_density == 0:
        return None
    dur = spec.duration_us * 1e-6
    # texture lives in world coordinates; cover everything that crosses the view
    x0, x1 = min(0.0, vx * dur) - 40, spec.width + max(0.0, vx * dur) + 40
    y0, y1 = min(0.0, vy * dur) - 40, spec.height + max(0.0, vy * dur) + 40
    n = rng.poisson(spec.texture_density * (x1 - x0) * (y1 - y0))
    pts = []
    for _ in range(n):
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        dx, dy, nx, ny = contour_offsets(rng.uniform(4, 30), rng.uniform(4, 30))
        pts.append(np.stack([cx + dx, cy + dy, nx, ny]))
    return np.concatenate(pts, axis=1) if pts else None


def _track_table(spec: SceneSpec, times: np.ndarray) -> np.ndarray:
    """``[objects, len(times), 2]`` centre positions."""
    out = np.zeros((len(spec.objects), len(times), 2))
    for k, o in enumerate(spec.objects):
        out[k] = o.trajectory.positions(times)
    return out


def generate(spec: SceneSpec) -> tuple[EventStream, TrackingLog]:
    """Events and 20 Hz groundtruth for ``spec``; deterministic given its seed."""
    rng = np.random.default_rng(spec.seed)
    texture = _texture(spec, rng)
    tick_s = TICK_US * 1e-6
    ego = np.asarray(spec.ego_motion, dtype=np.float64)
    n_px = spec.width * spec.height
    starts = np.arange(0, spec.duration_us, TICK_US)
    n_obj = len(spec.objects)

    # per-object contour samples, flattened with their owner index
    sizes = np.array([o.size for o in spec.objects], dtype=np.float64).reshape(-1, 2)
    offs = [contour_offsets(*o.size) for o in spec.objects]
    owner = np.concatenate([np.full(len(c[0]), k) for k, c in enumerate(offs)]) if n_obj else np.zeros(0, int)
    odx, ody, onx, ony = (np.concatenate([c[i] for c in offs]) if n_obj else np.zeros(0) for i in range(4))
    contrast = np.array([o.contrast for o in spec.objects])
    z = np.array([o.z for o in spec.objects])
    # occluder[k, j]: object j is drawn in front of object k
    front = z[None, :] > z[:, None]
    if n_obj:
        pos0 = _track_table(spec, starts)
        pos1 = _track_table(spec, starts + TICK_US)
        posm = _track_table(spec, starts + TICK_US / 2)

    chunks = []
    for i, t0 in enumerate(starts):
        parts = []
        if n_obj:
            boxes = _ltrb(posm[:, i], sizes)
            vel = (pos1[:, i] - pos0[:, i]) / tick_s
            vn = vel[owner, 0] * onx + vel[owner, 1] * ony
            fire = rng.random(len(owner)) < np.minimum(contrast[owner] * np.abs(vn) * tick_s, 1.0)
            if fire.any():
                x = posm[owner[fire], i, 0] + odx[fire]
                y = posm[owner[fire], i, 1] + ody[fire]
                ok = (x >= 0) & (x <= spec.width) & (y >= 0) & (y <= spec.height)
                px, py = _pixel(x, spec.width), _pixel(y, spec.height)
                hidden = (_inside(px, py, boxes) & front[owner[fire]]).any(axis=1)
                ok &= ~hidden
                parts.append((px[ok], py[ok], (vn[fire] > 0)[ok]))
        if texture is not None:
            shift = -ego * (t0 + TICK_US / 2) * 1e-6
            vn = -(ego[0] * texture[2] + ego[1] * texture[3])
            x, y = texture[0] + shift[0], texture[1] + shift[1]
            ok = (x >= 0) & (x <= spec.width) & (y >= 0) & (y <= spec.height)
            ok &= rng.random(len(x)) < min(spec.texture_contrast * float(np.hypot(*ego)) * tick_s, 1.0) * (
                np.abs(vn) / max(float(np.hypot(*ego)), 1e-12))
            px, py = _pixel(x[ok], spec.width), _pixel(y[ok], spec.height)
            pol = vn[ok] > 0
            if n_obj:
                keep = ~_inside(px, py, boxes).any(axis=1)
                px, py, pol = px[keep], py[keep], pol[keep]
            parts.append((px, py, pol))
        if spec.noise_rate > 0:
            k = rng.binomial(n_px, min(1.0, spec.noise_rate * tick_s))
            if k:
                idx = rng.integers(0, n_px, k)
                px, py = idx % spec.width, idx // spec.width
                pol = rng.integers(0, 2, k).astype(bool)
                if n_obj:
                    keep = ~_inside(px, py, boxes).any(axis=1)
                    px, py, pol = px[keep], py[keep], pol[keep]
                parts.append((px, py, pol))
        for px, py, pol in parts:
            if len(px):
                chunks.append((t0 + rng.integers(0, TICK_US, len(px)), px, py, pol.astype(np.int64)))
    if chunks:
        t, x, y, p = (np.concatenate([c[j] for c in chunks]) for j in range(4))
        order = np.argsort(t, kind="stable")
        stream = EventStream(spec.width, spec.height, t[order], x[order], y[order], p[order])
    else:
        stream = EventStream.empty(spec.width, spec.height)
    return stream, groundtruth(spec)


def groundtruth(spec: SceneSpec) -> TrackingLog:
    """Boxes at ``t = f * 50 ms`` for frames ``f = 1, 2, ...`` within the duration,
    clipped to the sensor; tiny or barely visible objects are left out."""
    rows = []
    min_area = MIN_AREA_FRACTION * spec.width * spec.height
    for f in range(1, spec.duration_us // GT_PERIOD_US + 1):
        t = f * GT_PERIOD_US
        for o in spec.objects:
            box = clip_box(o.box(t), spec.width, spec.height)
            if box is None or box.w * box.h < min_area:
                continue
            vis = visibility(spec, o, t)
            if vis < MIN_VISIBILITY:
                continue
            rows.append(LogRow(f, o.track_id, box, 1.0, o.class_id, round(vis, 3)))
    return TrackingLog(rows)


# scenario library ----------------------------------------------------------------

def _obj(ident, cls, size, traj, z=0, contrast=1.0):
    return ObjectSpec(ident, cls, tuple(float(s) for s in size), traj, contrast, z)


def _single_static(rng, seed):
    # hovering in place: small oscillation so the target stays visible to the sensor
    x, y = rng.uniform(120, 200), rng.uniform(90, 150)
    w, h = rng.uniform(24, 34), rng.uniform(18, 26)
    traj = Trajectory("sine", origin=(x, y), amplitude=(3.0, 2.0), period_us=400_000.0,
                      phase=float(rng.uniform(0, 6.28)))
    return SceneSpec(objects=(_obj(1, 0, (w, h), traj, contrast=2.0),), noise_rate=0.05,
                     duration_us=1_500_000, seed=seed)


def _single_linear(rng, seed):
    y = rng.uniform(80, 160)
    speed = rng.uniform(90, 130)
    x0 = rng.uniform(50, 70)
    dur = 2_000_000
    dy = rng.uniform(-20, 20)
    traj = Trajectory.line((0, x0, y), (dur, x0 + speed * dur * 1e-6, y + dy))
    return SceneSpec(objects=(_obj(1, 0, (rng.uniform(26, 34), rng.uniform(20, 26)), traj),),
                     noise_rate=0.05, duration_us=dur, seed=seed)


def _two_crossing(rng, seed):
    dur = 2_000_000
    y = rng.uniform(100, 140)
    off = rng.uniform(8, 12)
    speed = rng.uniform(90, 110)
    a = Trajectory.line((0, 60, y - off), (dur, 60 + speed * 2, y - off))
    b = Trajectory.line((0, 260, y + off), (dur, 260 - speed * 2, y + off))
    # same class, different sizes; the smaller one passes in front
    return SceneSpec(
        objects=(_obj(1, 0, (36, 28), a, z=0), _obj(2, 0, (26, 20), b, z=1)),
        noise_rate=0.05, duration_us=dur, seed=seed,
    )


def _occlusion_reappear(rng, seed):
    # a wide occluder sweeps over a slow target, hiding it completely for a while
    dur = 2_000_000
    y = rng.uniform(100, 140)
    speed = rng.uniform(30, 40)
    x0 = rng.uniform(120, 140)
    meet = rng.uniform(0.9e6, 1.1e6)
    occ_speed = rng.uniform(75, 90)
    occ_x0 = x0 + speed * meet * 1e-6 + occ_speed * meet * 1e-6
    target = Trajectory.line((0, x0, y), (dur, x0 + speed * dur * 1e-6, y))
    occluder = Trajectory.line((0, occ_x0, y + 3), (dur, occ_x0 - occ_speed * dur * 1e-6, y + 3))
    return SceneSpec(
        objects=(_obj(1, 0, (22, 16), target, z=0, contrast=1.5),
                 _obj(2, 1, (100, 64), occluder, z=1)),
        noise_rate=0.05, duration_us=dur, seed=seed,
    )


def _dense(rng, seed):
    dur = 2_000_000
    objs = []
    for i in range(8):
        w, h = rng.uniform(16, 32), rng.uniform(14, 26)
        if i % 2:
            traj = Trajectory("sine", origin=(rng.uniform(60, 260), rng.uniform(50, 190)),
                              velocity=tuple(rng.uniform(-30, 30, 2)), amplitude=tuple(rng.uniform(15, 35, 2)),
                              period_us=float(rng.uniform(1.2e6, 2.0e6)), phase=float(rng.uniform(0, 6.28)))
        else:
            x0, y0 = rng.uniform(40, 280), rng.uniform(40, 200)
            vx, vy = rng.uniform(-60, 60, 2)
            traj = Trajectory.line((0, x0, y0), (dur, x0 + vx * 2, y0 + vy * 2))
        objs.append(_obj(i + 1, i % 3, (w, h), traj, z=i))
    return SceneSpec(objects=tuple(objs), noise_rate=0.1, duration_us=dur, seed=seed)


def _ego_noise(rng, seed):
    dur = 2_000_000
    a = Trajectory.line((0, 70, 90), (dur, 250, rng.uniform(110, 150)))
    b = Trajectory.line((0, 240, 170), (dur, 90, rng.uniform(140, 180)))
    return SceneSpec(
        objects=(_obj(1, 0, (30, 24), a, contrast=1.5), _obj(2, 1, (26, 30), b, z=1, contrast=1.5)),
        noise_rate=1.0, ego_motion=tuple(rng.uniform(40, 60, 2) * rng.choice([-1, 1], 2)),
        duration_us=dur, seed=seed,
    )


SCENARIOS = {
    "single-static": _single_static,
    "single-linear": _single_linear,
    "two-crossing": _two_crossing,
    "occlusion-reappear": _occlusion_reappear,
    "dense-8-object": _dense,
    "high-ego-noise": _ego_noise,
}


def scenario(name: str, seed: int = 0) -> SceneSpec:
    """One named scenario; ``seed`` varies placement, speed and event noise."""
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    rng = np.random.default_rng([seed, sorted(SCENARIOS).index(name)])
    return SCENARIOS[name](rng, seed)


def scenario_library(seed: int = 0) -> dict[str, SceneSpec]:
    return {name: scenario(name, seed) for name in SCENARIOS}
