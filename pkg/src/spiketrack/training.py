"""Offline training of the Siamese estimator on synthetic scenes."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import AdamW, NumericalError, load_checkpoint, save_checkpoint
from .events import Box, EventStream, EventVoxel, voxelize
from .mot import TrackingLog
from .siamese import BackboneConfig, PairConfig, SiameseTracker, pair_loss, sample_pairs, subvoxel_input
from .synth import GT_PERIOD_US, MIN_VISIBILITY, SceneSpec, clip_box, generate, scenario, visibility

log = logging.getLogger(__name__)

TRAIN_SCENARIOS = ("single-linear", "two-crossing", "occlusion-reappear", "dense-8-object")


@dataclass
class TrainConfig:
    backbone: str = "miniature"  # or "table1"
    neuron: str = "srm"
    epochs: int = 50
    steps_per_epoch: int = 20
    batch_size: int = 4
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 1e-4
    voxel_bins: int = 20
    granularity_us: int = 10_000
    scenarios: tuple = TRAIN_SCENARIOS
    scene_seeds: tuple = (100, 101)
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("miniature", "table1"):
            raise ValueError(f"unknown backbone preset {self.backbone!r}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")

    def backbone_config(self) -> BackboneConfig:
        preset = BackboneConfig.miniature if self.backbone == "miniature" else BackboneConfig.table1
        return preset(neuron=self.neuron)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenarios"] = list(self.scenarios)
        d["scene_seeds"] = list(self.scene_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("scenarios", "scene_seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _coerce(name: str, raw: str):
    f = {x.name: x for x in dataclasses.fields(TrainConfig)}[name]
    default = f.default
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(int(p) for p in parts) if default and isinstance(default[0], int) else tuple(parts)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    return type(default)(raw)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, val)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {val!r} for {key}") from None
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Flag > file > default."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**merged)


class SceneDataset:
    """Pair source over generated scenes. Boxes come straight from the scene
    trajectories, so positives can be drawn at any time step."""

    def __init__(self, scenes: list[tuple[SceneSpec, EventStream, TrackingLog]], voxel_bins: int = 20,
                 granularity_us: int = 10_000, cache_size: int = 48):
        self.scenes = scenes
        self.voxel_bins = voxel_bins
        self.granularity_us = granularity_us
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._idents = []
        self._times = {}
        for k, (spec, _, gt) in enumerate(scenes):
            for o in spec.objects:
                # a template needs a full voxel window behind it and room for the search steps
                lo = voxel_bins * granularity_us
                times = np.array(sorted(
                    r.frame * GT_PERIOD_US for r in gt.track(o.track_id)
                    if lo <= r.frame * GT_PERIOD_US <= spec.duration_us - 5 * 10_000
                ), dtype=np.int64)
                if len(times):
                    self._idents.append(((k, o.track_id), o.class_id))
                    self._times[(k, o.track_id)] = times

    @classmethod
    def from_specs(cls, specs, **kw) -> "SceneDataset":
        return cls([(s, *generate(s)) for s in specs], **kw)

    def identities(self):
        return list(self._idents)

    def visible_times(self, identity):
        return self._times[identity]

    def scene_of(self, identity):
        return identity[0]

    def _obj(self, identity):
        spec = self.scenes[identity[0]][0]
        return spec, next(o for o in spec.objects if o.track_id == identity[1])

    def box(self, identity, t) -> Box | None:
        spec, obj = self._obj(identity)
        if not 0 <= t <= spec.duration_us:
            return None
        box = clip_box(obj.box(t), spec.width, spec.height)
        if box is None or visibility(spec, obj, t) < MIN_VISIBILITY:
            return None
        return box

    def voxel(self, scene, t) -> EventVoxel:
        key = (scene, int(t))
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        v = voxelize(self.scenes[scene][1], int(t), self.voxel_bins, self.granularity_us)
        self._cache[key] = v
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return v

    def boxes_at(self, scene, t):
        spec = self.scenes[scene][0]
        out = []
        for o in spec.objects:
            b = self.box((scene, o.track_id), t)
            if b is not None:
                out.append(b)
        return out

    def geometry(self, scene):
        spec = self.scenes[scene][0]
        return spec.width, spec.height


def training_specs(cfg: TrainConfig) -> list[SceneSpec]:
    return [scenario(name, seed) for name in cfg.scenarios for seed in cfg.scene_seeds]


class TrainingAborted(RuntimeError):
    pass


def model_tensors(model: SiameseTracker) -> dict[str, torch.Tensor]:
    return {k: v.detach().float() for k, v in model.state_dict().items()}


def save_model(path, model: SiameseTracker, meta: dict | None = None, opt: AdamW | None = None) -> None:
    tensors = model_tensors(model)
    meta = dict(meta or {})
    meta["backbone"] = model.config.to_dict()
    if opt is not None:
        for i, (m, v) in opt.moments().items():
            tensors[f"opt.m.{i}"] = m
            tensors[f"opt.v.{i}"] = v
        meta["opt_step"] = opt.step_count
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[SiameseTracker, dict, dict]:
    """Model, metadata and the optimizer moment tensors stored with it."""
    tensors, meta = load_checkpoint(path)
    model = SiameseTracker(BackboneConfig.from_dict(meta["backbone"]))
    state = model.state_dict()
    own = {k: tensors[k].to(state[k].dtype).reshape(state[k].shape) for k in state}
    model.load_state_dict(own)
    moments = {}
    for k, t in tensors.items():
        if k.startswith("opt.m."):
            i = int(k.rsplit(".", 1)[1])
            moments[i] = (t, tensors[f"opt.v.{i}"])
    return model, meta, moments


def _batch(pairs):
    return subvoxel_input([p.template for p in pairs]), subvoxel_input([p.search for p in pairs])


def train(cfg: TrainConfig, dataset: SceneDataset, checkpoint_path, loss_csv, resume: str | None = None,
          max_steps: int | None = None) -> SiameseTracker:
    """Run (or continue) training; one CSV row per optimizer step.

    Pairs for step ``k`` come from an rng seeded with ``(seed, k)``, so a resumed
    run sees the same data as an uninterrupted one.
    """
    if resume:
        model, meta, moments = load_model(resume)
        start = int(meta.get("step", 0))
        if meta.get("train") and TrainConfig.from_dict(meta["train"]).backbone_config() != cfg.backbone_config():
            raise ValueError("checkpoint backbone differs from the configured one")
    else:
        torch.manual_seed(cfg.seed)
        model = SiameseTracker(cfg.backbone_config(), seed=cfg.seed)
        start, moments = 0, {}
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, cfg.lr_start, cfg.lr_end, cfg.epochs, cfg.weight_decay)
    if moments:
        opt.load_moments(moments, start)
    model.train()
    end = cfg.total_steps if max_steps is None else min(cfg.total_steps, start + max_steps)
    mode = "a" if resume and os.path.exists(loss_csv) else "w"
    with open(loss_csv, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "epoch", "lr", "loss", "pos", "neg"])
        for step in range(start, end):
            epoch = step // cfg.steps_per_epoch
            opt.set_epoch(epoch)
            it = sample_pairs(dataset, np.random.default_rng([cfg.seed, step]), PairConfig())
            pairs = [next(it) for _ in range(cfg.batch_size)]
            template, search = _batch(pairs)
            logits = model(template, search)
            loss, stats = pair_loss(logits, pairs)
            if not torch.isfinite(loss):
                f.flush()
                raise TrainingAborted(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {opt.lr:.3g}); "
                    f"positive part {stats['pos']}, negative part {stats['neg']}")
            opt.zero_grad()
            loss.backward()
            bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
            if bad:
                raise TrainingAborted(f"non-finite gradient at step {step} in {', '.join(bad)}")
            opt.step()
            writer.writerow([step + 1, epoch, f"{opt.lr:.6g}", f"{float(loss.detach()):.6f}",
                             f"{stats['pos']:.6f}", f"{stats['neg']:.6f}"])
            log.info("step %d loss %.4f", step + 1, float(loss.detach()))
    save_model(checkpoint_path, model, {"step": end, "train": cfg.to_dict()}, opt)
    return model.eval()
