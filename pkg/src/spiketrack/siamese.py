"""Siamese position estimator: shared spiking backbone, correlation head, labels and losses."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Literal, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import TemporalBatchNorm, conv_out_size, kaiming_uniform_
from .events import SEARCH_SIZE, TEMPLATE_SIZE, Box, EventVoxel, SubVoxel, crop_rescale, crop_side
from .snn import LIF, SRM, PixelLSTM, SrmParams

log = logging.getLogger(__name__)

NeuronKind = Literal["srm", "lif", "none", "lstm"]
PAIR_KINDS = ("positive", "neg_same_class", "neg_diff_class", "neg_background")
PAIR_MIX = (0.5, 0.25, 0.125, 0.125)
EPS_SMALL = 1e-12


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (96, 256, 384, 384, 256)
    kernels: tuple[int, ...] = (11, 5, 3, 3, 3)
    strides: tuple[int, ...] = (2, 1, 1, 1, 1)
    pool_kernel: int = 3
    pool_stride: int = 2
    in_channels: int = 2
    neuron: NeuronKind = "srm"
    srm: SrmParams = field(default_factory=SrmParams)
    bn_over_time: bool = True
    # the last conv feeds a neuron without batch norm; plain Kaiming init leaves
    # its drive far below threshold and the network silent
    final_gain: float = 3.0

    def __post_init__(self):
        if not (len(self.channels) == len(self.kernels) == len(self.strides) == 5):
            raise ValueError("backbone has exactly five blocks")
        if self.neuron not in ("srm", "lif", "none", "lstm"):
            raise ValueError(f"unknown neuron kind {self.neuron!r}")

    @classmethod
    def table1(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def miniature(cls, **kw) -> "BackboneConfig":
        return cls(channels=(8, 16, 24, 24, 16), **kw)

    @property
    def total_stride(self) -> int:
        s = self.strides[0] * self.pool_stride * self.strides[1] * self.pool_stride
        return s * self.strides[2] * self.strides[3] * self.strides[4]

    def shape_chain(self, size: int) -> list[int]:
        """Spatial extent after every conv / pool layer, in order."""
        out = [size]
        for i in range(5):
            out.append(conv_out_size(out[-1], self.kernels[i], self.strides[i]))
            if i < 2:
                out.append(conv_out_size(out[-1], self.pool_kernel, self.pool_stride))
        return out

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["srm"] = dict(self.srm.__dict__)
        for k in ("channels", "kernels", "strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["srm"] = SrmParams(**d.get("srm", {}))
        for k in ("channels", "kernels", "strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class Backbone(nn.Module):
    """Five blocks: two conv/BN/GELU/max-pool reducers, then conv/BN/GELU/neuron
    twice and a final conv/neuron. Convs run per time bin; neurons scan time."""

    def __init__(self, config: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        c_in = (config.in_channels,) + tuple(config.channels[:-1])
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in[i], config.channels[i], config.kernels[i], stride=config.strides[i])
            for i in range(5)
        )
        self.norms = nn.ModuleList(TemporalBatchNorm(config.channels[i], config.bn_over_time) for i in range(4))
        self.neurons = nn.ModuleList(self._neuron(config.channels[i]) for i in (2, 3, 4))
        for conv in self.convs:
            kaiming_uniform_(conv.weight, generator)
            nn.init.zeros_(conv.bias)
        with torch.no_grad():
            self.convs[4].weight.mul_(config.final_gain)

    def _neuron(self, channels: int) -> nn.Module:
        kind = self.config.neuron
        if kind == "srm":
            return SRM(self.config.srm)
        if kind == "lif":
            return LIF(self.config.srm)
        if kind == "lstm":
            return PixelLSTM(channels)
        return nn.Identity()

    def spike_layers(self) -> list[SRM]:
        return [m for m in self.neurons if isinstance(m, SRM)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[N, T, C_in, S, S]`` -> neuron output ``[N, T, C, h, w]``."""
        n, t = x.shape[:2]
        # channels-last is several times faster for the CPU pooling kernels
        z = x.reshape(n * t, *x.shape[2:]).contiguous(memory_format=torch.channels_last)
        cfg = self.config
        for norm in self.norms:
            norm.time_bins = t
        for i in range(2):
            z = F.gelu(self.norms[i](self.convs[i](z)))
            z = F.max_pool2d(z, cfg.pool_kernel, cfg.pool_stride)
        for i in range(2, 5):
            z = self.convs[i](z)
            if i < 4:
                z = F.gelu(self.norms[i](z))
            z = z.reshape(n, t, *z.shape[1:])
            z = self.neurons[i - 2](z)
            z = z.reshape(n * t, *z.shape[2:])
        return z.reshape(n, t, *z.shape[1:])

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Firing-rate map ``[N, C, h, w]``: neuron output averaged over time bins."""
        return self.forward(x).mean(dim=1)


def subvoxel_input(subs: Sequence[SubVoxel] | SubVoxel, dtype=torch.float32) -> torch.Tensor:
    """Stack sub-voxels ``[2, S, S, T]`` into network input ``[N, T, 2, S, S]``."""
    if isinstance(subs, SubVoxel):
        subs = [subs]
    # pack as [N, T, S, S, C] so the result is already channels-last per time bin
    arr = np.ascontiguousarray(np.stack([s.data for s in subs]).transpose(0, 4, 2, 3, 1))
    return torch.from_numpy(arr).to(dtype).permute(0, 1, 4, 2, 3)


def embed(sub: SubVoxel, backbone: Backbone) -> torch.Tensor:
    """Rate map ``[C, h, w]`` of a single sub-voxel."""
    return backbone.embed(subvoxel_input(sub, next(backbone.parameters()).dtype))[0]


@dataclass
class ScoreMap:
    values: torch.Tensor  # [Hs, Ws] logits
    stride: int = 8

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])

    @property
    def center(self) -> tuple[float, float]:
        return map_center(self.shape)


def map_center(shape: tuple[int, int]) -> tuple[float, float]:
    return ((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0)


def correlate(template_feat: torch.Tensor, search_feat: torch.Tensor) -> torch.Tensor:
    """Valid cross-correlation summed over channels.

    ``[C,h,w] x [C,H,W] -> [H-h+1, W-w+1]``, or batched ``[N,C,h,w] x [N,C,H,W] -> [N, ., .]``.
    """
    single = template_feat.dim() == 3
    if single:
        template_feat, search_feat = template_feat[None], search_feat[None]
    n, c, h, w = template_feat.shape
    if search_feat.shape[-2] < h or search_feat.shape[-1] < w:
        raise ValueError("template features larger than search features")
    out = F.conv2d(search_feat.reshape(1, n * c, *search_feat.shape[-2:]), template_feat, groups=n)
    out = out[0]
    return out[0] if single else out


class SiameseTracker(nn.Module):
    """Weight-shared backbone plus a learnable affine on the correlation map."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.backbone = Backbone(config, g)
        self.gain = nn.Parameter(torch.tensor(1.0))
        self.bias = nn.Parameter(torch.tensor(0.0))

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone.embed(x)

    def head(self, template_feat: torch.Tensor, search_feat: torch.Tensor) -> torch.Tensor:
        return self.gain * correlate(template_feat, search_feat) + self.bias

    def forward(self, template: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(template), self.embed(search))


def decode_position(score: ScoreMap, prev_box: Box, search_side: float) -> tuple[Box, float]:
    """Move ``prev_box`` by the peak's offset from the map centre.

    One map cell equals ``stride * search_side / 255`` source pixels. Ties go to
    the lowest linear index. The box size is kept.
    """
    v = score.values.detach().double().cpu().numpy()
    if not np.isfinite(v).all():
        raise ValueError("score map contains non-finite values")
    k = int(np.argmax(v))  # first occurrence on ties
    j, i = divmod(k, v.shape[1])
    cy0, cx0 = score.center
    cell = score.stride * search_side / SEARCH_SIZE
    box = prev_box.moved(prev_box.cx + (i - cx0) * cell, prev_box.cy + (j - cy0) * cell)
    peak = float(1.0 / (1.0 + np.exp(-v.flat[k])))
    return box, peak


@dataclass(frozen=True)
class LabelSpec:
    center: tuple[float, float]  # (row, col) in score-map cells
    radius: float = 2.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("label radius must be positive")


def label_center(target: tuple[float, float], search_center: tuple[float, float], search_side: float,
                 shape: tuple[int, int] = (17, 17), stride: int = 8) -> tuple[float, float]:
    """Score-map cell ``(row, col)`` of pixel ``target=(cx, cy)`` for a search crop centred on ``search_center``."""
    cell = stride * search_side / SEARCH_SIZE
    r0, c0 = map_center(shape)
    return (r0 + (target[1] - search_center[1]) / cell, c0 + (target[0] - search_center[0]) / cell)


def _cell_distance(shape: tuple[int, int], center: tuple[float, float]) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return np.hypot(rows - center[0], cols - center[1])


def make_labels(spec: LabelSpec, shape: tuple[int, int] = (17, 17)) -> tuple[np.ndarray, np.ndarray]:
    """Binary target map and balancing weights: inside and outside each sum to 0.5."""
    inside = _cell_distance(shape, spec.center) <= spec.radius
    n_in = int(inside.sum())
    n_out = inside.size - n_in
    if n_in == 0 or n_out == 0:
        raise LabelError(f"degenerate label: {n_in} cells inside radius, {n_out} outside")
    y = inside.astype(np.float64)
    w = np.where(inside, 0.5 / n_in, 0.5 / n_out)
    return y, w


def loss_positive(logits: torch.Tensor, y, w, radius: float, eps: float = EPS_SMALL) -> torch.Tensor:
    """Peak-aware weighted loss on a ``[Hs, Ws]`` map.

    Cells farther than ``radius`` from the predicted peak pay ``-y*log(eps)``;
    cells near the peak pay the binary cross-entropy against ``y``.
    """
    y = torch.as_tensor(y, dtype=logits.dtype)
    w = torch.as_tensor(w, dtype=logits.dtype)
    k = int(torch.argmax(logits.detach()))
    peak = divmod(k, logits.shape[1])
    near = torch.from_numpy(_cell_distance(tuple(logits.shape), peak) <= radius)
    bce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    miss = -y * float(np.log(eps))
    return (w * torch.where(near, bce, miss)).sum()


def loss_negative(logits: torch.Tensor, w=None) -> torch.Tensor:
    """``sum(-w * log(1 - sigmoid(v)))`` with uniform ``w = 1/N`` by default."""
    if w is None:
        return F.softplus(logits).mean()
    return (torch.as_tensor(w, dtype=logits.dtype) * F.softplus(logits)).sum()


@dataclass(eq=False)
class TrainPair:
    template: SubVoxel
    search: SubVoxel
    kind: str
    label: LabelSpec | None = None

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        if (self.kind == "positive") != (self.label is not None):
            raise ValueError("positive pairs carry a label, negatives do not")


class PairSource(Protocol):
    """What :func:`sample_pairs` needs from a dataset."""

    def identities(self) -> list[tuple[object, int]]: ...
    def visible_times(self, identity) -> np.ndarray: ...
    def scene_of(self, identity): ...
    def box(self, identity, t: int) -> Box | None: ...
    def voxel(self, scene, t: int) -> EventVoxel: ...
    def boxes_at(self, scene, t: int) -> list[Box]: ...
    def geometry(self, scene) -> tuple[int, int]: ...


@dataclass(frozen=True)
class PairConfig:
    template_context: float = 2.0
    search_context: float = 4.0
    step_us: int = 10_000
    max_steps: int = 5
    jitter: float = 0.25  # of the box's larger side
    radius: float = 2.0
    map_shape: tuple[int, int] = (17, 17)
    stride: int = 8


def _template(src: PairSource, ident, rng, cfg: PairConfig):
    times = src.visible_times(ident)
    t = int(times[rng.integers(len(times))])
    box = src.box(ident, t)
    sub = crop_rescale(src.voxel(src.scene_of(ident), t), box, cfg.template_context, TEMPLATE_SIZE)
    return sub, box, t


def _jittered(box: Box, size_box: Box, rng, cfg: PairConfig) -> Box:
    j = cfg.jitter * max(size_box.w, size_box.h)
    return Box(box.cx + rng.uniform(-j, j), box.cy + rng.uniform(-j, j), size_box.w, size_box.h)


def _positive(src, ident, rng, cfg):
    tmpl, tbox, t = _template(src, ident, rng, cfg)
    for _ in range(8):
        ts = t + cfg.step_us * int(rng.integers(1, cfg.max_steps + 1))
        prev, cur = src.box(ident, ts - cfg.step_us), src.box(ident, ts)
        if prev is None or cur is None:
            continue
        sbox = _jittered(prev, tbox, rng, cfg)
        side = crop_side(sbox, cfg.search_context)
        center = label_center((cur.cx, cur.cy), (sbox.cx, sbox.cy), side, cfg.map_shape, cfg.stride)
        spec = LabelSpec(center, cfg.radius)
        try:
            make_labels(spec, cfg.map_shape)
        except LabelError:
            continue
        search = crop_rescale(src.voxel(src.scene_of(ident), ts), sbox, cfg.search_context, SEARCH_SIZE)
        return TrainPair(tmpl, search, "positive", spec)
    return None


def _distractor(src, ident, other, kind, rng, cfg):
    tmpl, tbox, _ = _template(src, ident, rng, cfg)
    times = src.visible_times(other)
    ts = int(times[rng.integers(len(times))])
    sbox = _jittered(src.box(other, ts), tbox, rng, cfg)
    search = crop_rescale(src.voxel(src.scene_of(other), ts), sbox, cfg.search_context, SEARCH_SIZE)
    return TrainPair(tmpl, search, kind)


def _background(src, ident, rng, cfg):
    tmpl, tbox, t = _template(src, ident, rng, cfg)
    scene = src.scene_of(ident)
    width, height = src.geometry(scene)
    ts = t + cfg.step_us * int(rng.integers(1, cfg.max_steps + 1))
    side = crop_side(tbox, cfg.search_context)
    boxes = src.boxes_at(scene, ts)
    for _ in range(20):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        half = side / 2.0
        clear = all(
            b.right < cx - half or b.left > cx + half or b.bottom < cy - half or b.top > cy + half
            for b in boxes
        )
        if clear:
            sbox = Box(cx, cy, tbox.w, tbox.h)
            search = crop_rescale(src.voxel(scene, ts), sbox, cfg.search_context, SEARCH_SIZE)
            return TrainPair(tmpl, search, "neg_background")
    return None


def sample_pairs(src: PairSource, rng: np.random.Generator, cfg: PairConfig = PairConfig()) -> Iterator[TrainPair]:
    """Endless stream of training pairs mixing 50% positive, 25% same-class,
    12.5% other-class and 12.5% background negatives.

    Kinds that cannot be built from ``src`` are skipped and the kind is redrawn.
    """
    idents = src.identities()
    if not idents:
        raise ValueError("dataset has no identities")
    classes = {}
    for ident, cls in idents:
        classes.setdefault(cls, []).append(ident)
    same_ok = any(len(v) >= 2 for v in classes.values())
    diff_ok = len(classes) >= 2
    if not (same_ok and diff_ok):
        missing = [k for k, ok in (("neg_same_class", same_ok), ("neg_diff_class", diff_ok)) if not ok]
        warnings.warn(f"dataset cannot produce {', '.join(missing)} pairs; they are skipped", stacklevel=2)
    probs = np.array(PAIR_MIX)
    while True:
        kind = PAIR_KINDS[int(rng.choice(4, p=probs))]
        if (kind == "neg_same_class" and not same_ok) or (kind == "neg_diff_class" and not diff_ok):
            continue
        # a kind that fails for one identity is retried with another, so the
        # long-run mix is kept
        for _ in range(50):
            pair = _build(src, kind, idents, classes, rng, cfg)
            if pair is not None:
                yield pair
                break
        else:
            log.debug("could not build a %s pair; redrawing", kind)


def _build(src, kind, idents, classes, rng, cfg):
    ident, cls = idents[int(rng.integers(len(idents)))]
    if kind == "positive":
        return _positive(src, ident, rng, cfg)
    if kind == "neg_background":
        return _background(src, ident, rng, cfg)
    if kind == "neg_same_class":
        others = [o for o in classes[cls] if o != ident]
    else:
        others = [o for o, c in idents if c != cls]
    if not others:
        return None
    return _distractor(src, ident, others[int(rng.integers(len(others)))], kind, rng, cfg)


def pair_loss(logits: torch.Tensor, pairs: Sequence[TrainPair], shape=(17, 17)) -> tuple[torch.Tensor, dict]:
    """Mean per-pair loss over a batch, plus the positive/negative split."""
    losses, pos, neg = [], [], []
    for k, pair in enumerate(pairs):
        if pair.label is not None:
            y, w = make_labels(pair.label, shape)
            l = loss_positive(logits[k], y, w, pair.label.radius)
            pos.append(l)
        else:
            l = loss_negative(logits[k])
            neg.append(l)
        losses.append(l)
    total = torch.stack(losses).mean()
    stats = {
        "pos": float(torch.stack(pos).detach().mean()) if pos else float("nan"),
        "neg": float(torch.stack(neg).detach().mean()) if neg else float("nan"),
    }
    return total, stats
