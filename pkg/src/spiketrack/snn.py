"""Spiking neuron layers: Spike Response Model (SRM), LIF, and a per-pixel LSTM cell.

All layers consume time-major input ``[N, T, C, H, W]`` and scan over ``T``.

SRM membrane potential per bin ``b``::

    response   <- a_s * response + (1 - a_s) * x[b]            a_s = exp(-dt / tau_s)
    u          =  response - refractory
    s[b]       =  u >= v_th
    refractory <- a_r * refractory + (1 - a_r) * v_th * s[b] / dt   a_r = exp(-dt / tau_r)

Both kernels are unit-gain first-order low-pass filters. The spike enters the
refractory filter with amplitude ``1/dt`` (a discretised Dirac) scaled by the
threshold, so the layer is positively homogeneous in ``(x, v_th)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class SrmParams:
    tau_s: float = 10.0  # ms
    tau_r: float = 1.0  # ms
    v_th: float = 1.0
    dt: float = 10.0  # ms, equal to the voxel granularity
    surrogate_gamma: float = 0.3

    def __post_init__(self):
        for name in ("tau_s", "tau_r", "v_th", "dt", "surrogate_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def a_s(self) -> float:
        return math.exp(-self.dt / self.tau_s)

    @property
    def a_r(self) -> float:
        return math.exp(-self.dt / self.tau_r)

    def replace(self, **kw) -> "SrmParams":
        return SrmParams(**{**self.__dict__, **kw})


@dataclass
class SrmState:
    response_trace: torch.Tensor
    refractory_trace: torch.Tensor


def surrogate_density(u: torch.Tensor, v_th: float, gamma: float) -> torch.Tensor:
    """Laplace density centred on the threshold; stands in for dspike/du."""
    return torch.exp(-(u - v_th).abs() / gamma) / (2.0 * gamma)


def smoothed_spike(u: torch.Tensor, v_th: float, gamma: float) -> torch.Tensor:
    """Laplace CDF, the smooth step whose derivative is :func:`surrogate_density`."""
    z = (u - v_th) / gamma
    return torch.where(z < 0, 0.5 * torch.exp(z.clamp(max=0)), 1.0 - 0.5 * torch.exp(-z.clamp(min=0)))


def srm_backward(upstream: torch.Tensor, potentials: torch.Tensor, params: SrmParams) -> torch.Tensor:
    """Input gradient of the SRM layer, time axis 1.

    The response filter is transposed by running it backwards in time
    (a correlation); the refractory feedback is treated as constant.
    """
    g_u = upstream * surrogate_density(potentials, params.v_th, params.surrogate_gamma)
    a_s = params.a_s
    grad = torch.empty_like(g_u)
    acc = torch.zeros_like(g_u[:, 0])
    for b in range(g_u.shape[1] - 1, -1, -1):
        acc = g_u[:, b] + a_s * acc
        grad[:, b] = (1.0 - a_s) * acc
    return grad


class _SrmFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, params: SrmParams, smooth: bool, replay):
        a_s, a_r, v_th = params.a_s, params.a_r, params.v_th
        kick = (1.0 - a_r) * v_th / params.dt
        response = torch.zeros_like(x[:, 0])
        refractory = torch.zeros_like(x[:, 0])
        spikes = torch.empty_like(x)
        potentials = torch.empty_like(x)
        refr_seq = torch.empty_like(x)
        for b in range(x.shape[1]):
            response = a_s * response + (1.0 - a_s) * x[:, b]
            if replay is not None:
                refractory = replay[:, b]
            refr_seq[:, b] = refractory
            u = response - refractory
            potentials[:, b] = u
            if smooth:
                s = smoothed_spike(u, v_th, params.surrogate_gamma)
            else:
                s = (u >= v_th).to(x.dtype)
            spikes[:, b] = s
            refractory = a_r * refractory + kick * s
        ctx.save_for_backward(potentials)
        ctx.params = params
        ctx.mark_non_differentiable(refr_seq)
        return spikes, refr_seq

    @staticmethod
    def backward(ctx, g_spikes, _g_refr):
        (potentials,) = ctx.saved_tensors
        return srm_backward(g_spikes, potentials, ctx.params), None, None, None


class SRM(nn.Module):
    """SRM neuron layer on ``[N, T, C, H, W]``.

    ``smooth`` swaps the hard threshold for its Laplace CDF, and
    ``replay_refractory`` substitutes a fixed refractory sequence; together they
    define the smooth function whose exact derivative the surrogate backward
    computes, which is what finite-difference checks compare against.
    Recorded and replayed sequences are keyed by input shape, so one layer can
    serve both branches of a Siamese pair.
    """

    def __init__(self, params: SrmParams = SrmParams()):
        super().__init__()
        self.params = params
        self.smooth = False
        self.record = False
        self.replay_refractory: dict | None = None
        self.last_refractory: dict = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        key = tuple(x.shape)
        replay = None if self.replay_refractory is None else self.replay_refractory[key]
        spikes, refr = _SrmFunction.apply(x, self.params, self.smooth, replay)
        if self.record:
            self.last_refractory[key] = refr.detach()
        return spikes

    def extra_repr(self) -> str:
        p = self.params
        return f"tau_s={p.tau_s}, tau_r={p.tau_r}, v_th={p.v_th}, dt={p.dt}"


def smooth_mode(module: nn.Module, on: bool = True) -> None:
    """Switch every SRM layer in ``module`` to the smoothed forward and start recording."""
    for m in module.modules():
        if isinstance(m, SRM):
            m.smooth = on
            m.record = on
            m.replay_refractory = None
            m.last_refractory = {}


def freeze_refractory(module: nn.Module) -> None:
    """Replay the refractory sequences recorded by the last forward from now on."""
    for m in module.modules():
        if isinstance(m, SRM):
            m.replay_refractory = dict(m.last_refractory)
            m.record = False


class _SpikeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, v_th, gamma):
        ctx.save_for_backward(u)
        ctx.v_th, ctx.gamma = v_th, gamma
        return (u >= v_th).to(u.dtype)

    @staticmethod
    def backward(ctx, g):
        (u,) = ctx.saved_tensors
        return g * surrogate_density(u, ctx.v_th, ctx.gamma), None, None


class LIF(nn.Module):
    """Leaky integrate-and-fire with hard reset: ``u <- a_s*u + x``; reset to 0 on a spike."""

    def __init__(self, params: SrmParams = SrmParams()):
        super().__init__()
        self.params = params

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.params
        a_s = p.a_s
        u = torch.zeros_like(x[:, 0])
        out = []
        for b in range(x.shape[1]):
            u = a_s * u + x[:, b]
            s = _SpikeFunction.apply(u, p.v_th, p.surrogate_gamma)
            out.append(s)
            u = u * (1.0 - s.detach())
        return torch.stack(out, dim=1)


class PixelLSTM(nn.Module):
    """LSTM cell shared across pixels (1x1 gate convolutions); dense, non-spiking."""

    def __init__(self, channels: int):
        super().__init__()
        self.gates = nn.Conv2d(2 * channels, 4 * channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.zeros_like(x[:, 0])
        c = torch.zeros_like(h)
        out = []
        for b in range(x.shape[1]):
            i, f, g, o = self.gates(torch.cat([x[:, b], h], dim=1)).chunk(4, dim=1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            out.append(h)
        return torch.stack(out, dim=1)


def _time_major(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.permute(3, 0, 1, 2).unsqueeze(0), False
    if x.dim() == 5:
        return x.permute(0, 4, 1, 2, 3), True
    raise ValueError(f"expected [C,H,W,T] or [N,C,H,W,T], got {tuple(x.shape)}")


def _voxel_layout(y: torch.Tensor, batched: bool) -> torch.Tensor:
    y = y.permute(0, 2, 3, 4, 1)
    return y if batched else y.squeeze(0)


def srm_forward(x: torch.Tensor, params: SrmParams = SrmParams(),
                return_state: bool = False):
    """Spike train of an SRM layer driven by ``x`` laid out ``[C, H, W, T]``.

    With ``return_state`` also returns the final :class:`SrmState`.
    """
    z, batched = _time_major(x)
    spikes, refr = _SrmFunction.apply(z, params, False, None)
    out = _voxel_layout(spikes, batched)
    if not return_state:
        return out
    with torch.no_grad():
        a_s = params.a_s
        response = torch.zeros_like(z[:, 0])
        for b in range(z.shape[1]):
            response = a_s * response + (1 - a_s) * z[:, b]
        last = refr[:, -1] * params.a_r + (1 - params.a_r) * params.v_th * spikes[:, -1] / params.dt
    squeeze = (lambda t: t) if batched else (lambda t: t.squeeze(0))
    return out, SrmState(squeeze(response), squeeze(last))


def lif_forward(x: torch.Tensor, params: SrmParams = SrmParams()) -> torch.Tensor:
    z, batched = _time_major(x)
    return _voxel_layout(LIF(params)(z), batched)
