"""Dense tensor ops with reverse-mode gradients, the optimizer and checkpoints.

Tensors are ``torch.Tensor``; the tape is torch's autograd graph. Spatial ops
take the voxel layout ``[C, H, W, T]`` (optionally with a leading batch axis)
and apply 2-D kernels independently to every time bin. Inside the network the
same ops run on the time-folded layout ``[N*T, C, H, W]`` to avoid permutes.
"""
from __future__ import annotations

import json
import math
import os
import struct
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_EPS = 1e-5


class NumericalError(FloatingPointError):
    """A NaN or Inf surfaced in a loss or gradient."""


def conv_out_size(n: int, kernel: int, stride: int = 1) -> int:
    if kernel > n:
        raise ValueError(f"kernel {kernel} does not fit input extent {n}")
    return (n - kernel) // stride + 1


pool_out_size = conv_out_size


def fold_time(x: torch.Tensor) -> torch.Tensor:
    """``[N, C, H, W, T]`` -> ``[N*T, C, H, W]``."""
    n, c, h, w, t = x.shape
    return x.permute(0, 4, 1, 2, 3).reshape(n * t, c, h, w)


def unfold_time(x: torch.Tensor, n: int) -> torch.Tensor:
    """Inverse of :func:`fold_time`."""
    nt, c, h, w = x.shape
    return x.reshape(n, nt // n, c, h, w).permute(0, 2, 3, 4, 1)


def _per_bin(fn, x: torch.Tensor) -> torch.Tensor:
    batched = x.dim() == 5
    if not batched:
        if x.dim() != 4:
            raise ValueError(f"expected [C,H,W,T] or [N,C,H,W,T], got shape {tuple(x.shape)}")
        x = x.unsqueeze(0)
    out = unfold_time(fn(fold_time(x)), x.shape[0])
    return out if batched else out.squeeze(0)


def conv_spatial(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                 stride: int = 1) -> torch.Tensor:
    """Unpadded 2-D convolution applied to every time bin."""
    c_in = x.shape[-4]
    if weight.dim() != 4 or weight.shape[1] != c_in:
        raise ValueError(f"weight {tuple(weight.shape)} incompatible with {c_in} input channels")
    conv_out_size(x.shape[-3], weight.shape[2], stride)
    conv_out_size(x.shape[-2], weight.shape[3], stride)
    return _per_bin(lambda z: F.conv2d(z, weight, bias, stride=stride), x)


def maxpool_spatial(x: torch.Tensor, kernel: int = 3, stride: int = 2) -> torch.Tensor:
    # torch keeps the first maximum of a window, i.e. ties go to the lowest index
    conv_out_size(x.shape[-3], kernel, stride)
    return _per_bin(lambda z: F.max_pool2d(z, kernel, stride), x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


class TemporalBatchNorm(nn.Module):
    """Batch norm for time-folded ``[N*T, C, H, W]`` activations.

    With ``over_time`` (default) every time bin is a sample of the same
    per-channel statistic, so mean and variance pool over batch, time and
    space. Otherwise each bin is normalised with its own batch statistics and
    the running estimate averages the per-bin moments.
    """

    def __init__(self, channels: int, over_time: bool = True, momentum: float = 0.1,
                 eps: float = BN_EPS):
        super().__init__()
        self.over_time = over_time
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.time_bins = 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.over_time or not self.training:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                self.training, self.momentum, self.eps)
        t = self.time_bins
        n = x.shape[0] // t
        z = x.reshape(n, t, *x.shape[1:])
        mean = z.mean(dim=(0, 3, 4), keepdim=True)
        var = z.var(dim=(0, 3, 4), unbiased=False, keepdim=True)
        with torch.no_grad():
            count = n * x.shape[2] * x.shape[3]
            unbiased = var.mean(dim=1).flatten() * count / max(count - 1, 1)
            self.running_mean.lerp_(mean.mean(dim=1).flatten(), self.momentum)
            self.running_var.lerp_(unbiased, self.momentum)
        z = (z - mean) / torch.sqrt(var + self.eps)
        z = z * self.weight.view(1, 1, -1, 1, 1) + self.bias.view(1, 1, -1, 1, 1)
        return z.reshape(x.shape)


def batchnorm(x: torch.Tensor, running_mean: torch.Tensor, running_var: torch.Tensor,
              weight: torch.Tensor | None = None, bias: torch.Tensor | None = None,
              training: bool = True, momentum: float = 0.1, eps: float = BN_EPS) -> torch.Tensor:
    """Per-channel batch norm on the voxel layout; statistics pool batch, space and time."""
    return _per_bin(
        lambda z: F.batch_norm(z, running_mean, running_var, weight, bias, training, momentum, eps),
        x,
    )


def check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum())
        raise NumericalError(f"{name}: {bad} non-finite value(s)")


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse pass from a scalar loss; returns (and stores in ``.grad``) parameter gradients.

    Gradients are accumulated only into ``params``; other leaves keep their
    ``.grad`` untouched.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite("loss", loss)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = torch.zeros_like(p) if g is None else g
        check_finite(f"gradient of parameter {i} {tuple(p.shape)}", g)
        p.grad = g if p.grad is None else p.grad + g
        out.append(g)
    return out


def kaiming_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fan-in Kaiming-uniform initialisation (gain sqrt(2))."""
    fan_in = weight[0].numel()
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound, generator=generator)


class AdamW:
    """AdamW with decoupled weight decay and a per-epoch exponential learning rate.

    The rate starts at ``lr_start`` and is multiplied by a constant factor per
    epoch so that after ``epochs`` epochs it equals ``lr_end``.
    """

    def __init__(self, params: Iterable[torch.Tensor], lr_start: float = 1e-3, lr_end: float = 1e-4,
                 epochs: int = 50, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.epochs = epochs
        self.decay = (lr_end / lr_start) ** (1.0 / epochs) if epochs > 0 else 1.0
        self.epoch = 0
        self._opt = torch.optim.AdamW(self.params, lr=lr_start, betas=betas, eps=eps,
                                      weight_decay=weight_decay, foreach=False)

    def lr_at(self, epoch: float) -> float:
        return self.lr_start * self.decay ** epoch

    @property
    def lr(self) -> float:
        return self._opt.param_groups[0]["lr"]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        for group in self._opt.param_groups:
            group["lr"] = self.lr_at(epoch)

    @property
    def step_count(self) -> int:
        st = self._opt.state.get(self.params[0], {})
        return int(st["step"]) if "step" in st else 0

    def step(self) -> None:
        self._opt.step()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def moments(self) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for i, p in enumerate(self.params):
            st = self._opt.state.get(p)
            if st:
                out[i] = (st["exp_avg"], st["exp_avg_sq"])
        return out

    def load_moments(self, moments: Mapping[int, tuple[torch.Tensor, torch.Tensor]], step: int) -> None:
        for i, (m, v) in moments.items():
            p = self.params[i]
            self._opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": m.clone().to(p.dtype),
                "exp_avg_sq": v.clone().to(p.dtype),
            }


def adamw_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: AdamW) -> None:
    """One optimizer update of ``params`` from explicit ``grads``."""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g
    state.step()


# Checkpoint container (little-endian):
#   magic "STKP" | u32 version | u32 meta_len | meta JSON (utf-8)
#   u32 n_tensors | n x { u16 name_len | name | u8 ndim | ndim x u32 dim | f32 payload }
CKPT_MAGIC = b"STKP"
CKPT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")
            key = name.encode()
            f.write(struct.pack("<H", len(key)) + key)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    pos = 12
    meta = json.loads(raw[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, meta


def set_threads(n: int | None = None) -> int:
    """Pin intra-op parallelism; ``SPIKETRACK_THREADS`` is the fallback, then 1."""
    if n is None:
        n = int(os.environ.get("SPIKETRACK_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return torch.get_num_threads()
